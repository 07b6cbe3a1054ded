#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "aashnet/model.hpp"
#include "oracles.hpp"

using namespace aashnet;
using namespace aashnet::model;

namespace {

Topology topo(std::size_t m, std::size_t j, Activation a = Activation::tanh, bool bias = true) {
  Topology t;
  t.inputs = m;
  t.hidden = j;
  t.activation = a;
  t.bias = bias;
  return t;
}

Weights random_weights(const Topology& t, std::mt19937_64& rng, double scale = 0.7) {
  std::normal_distribution<double> n(0.0, scale);
  Weights w(t);
  for (double& x : w.flat()) x = n(rng);
  return w;
}

HyperParams random_hyper(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return HyperParams::from_natural(0.1 * u(rng), 0.5 * u(rng), 0.1 + 0.8 * u(rng), 1e-3);
}

}  // namespace

TEST(ModelLayout, ParameterCountAndBlocks) {
  const Topology t = topo(3, 2);
  EXPECT_EQ(t.width(), 4u);
  EXPECT_EQ(t.parameter_count(), 4u + 8u + 2u);
  Weights w(t);
  EXPECT_EQ(w.skip().size(), 4u);
  EXPECT_EQ(w.input_hidden().size(), 8u);
  EXPECT_EQ(w.hidden_out().size(), 2u);
  EXPECT_EQ(topo(3, 0, Activation::tanh, false).parameter_count(), 3u);
  EXPECT_THROW(Weights(t, std::vector<double>(5)), ShapeMismatch);
  EXPECT_THROW(activation_from_string("relu"), ValidationError);
}

TEST(ModelPredict, ZeroWeightsGiveZero) {
  const Topology t = topo(3, 2);
  const Weights w(t);
  const std::vector<double> x = {1.0, -2.0, 0.5};
  EXPECT_EQ(predict(w, HyperParams::from_natural(0, 0, 0.3), x), 0.0);
}

TEST(ModelPredict, AlphaOneIsLinearRegression) {
  std::mt19937_64 rng(1);
  const Topology t = topo(3, 4);
  Weights w = random_weights(t, rng);
  const std::vector<double> x = {0.2, -1.1, 0.7};
  const double expect = w.skip()[0] * x[0] + w.skip()[1] * x[1] + w.skip()[2] * x[2] + w.skip()[3];
  EXPECT_DOUBLE_EQ(predict(w, HyperParams::from_natural(0, 0, 1.0), x), expect);
  for (double& z : w.input_hidden()) z *= 3.0;
  for (double& z : w.hidden_out()) z = -z;
  EXPECT_DOUBLE_EQ(predict(w, HyperParams::from_natural(0, 0, 1.0), x), expect);
}

TEST(ModelPredict, HandEvaluatedExample) {
  const Topology t = topo(2, 1, Activation::tanh, false);
  Weights w(t);
  w.skip()[0] = 1.0;
  w.skip()[1] = 1.0;
  w.input_hidden()[0] = 1.0;
  w.input_hidden()[1] = 0.0;
  w.hidden_out()[0] = 2.0;
  const std::vector<double> x = {0.3, 0.5};
  const double y = predict(w, HyperParams::from_natural(0, 0, 0.5), x);
  EXPECT_NEAR(y, 0.69131, 5e-6);
  EXPECT_DOUBLE_EQ(y, 0.5 * 0.8 + 0.5 * 2.0 * std::tanh(0.3));
}

TEST(ModelPredict, ShapeMismatchRejected) {
  const Weights w(topo(3, 1));
  const std::vector<double> x = {1.0, 2.0};
  EXPECT_THROW(predict(w, HyperParams{}, x), ShapeMismatch);
}

TEST(ModelPredict, DecompositionAndAlphaExtremes) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Topology t = topo(4, 3, trial % 2 ? Activation::tanh : Activation::logistic);
    const Weights w = random_weights(t, rng);
    std::vector<double> x(4);
    for (double& v : x) v = n(rng);
    const PredictionParts p = predict_parts(w, x);
    const double a = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const HyperParams h = HyperParams::from_natural(0, 0, a);
    EXPECT_NEAR(predict(w, h, x), h.alpha() * p.linear + (1 - h.alpha()) * p.dense, 1e-12);
    EXPECT_DOUBLE_EQ(predict(w, HyperParams::from_natural(0, 0, 1.0), x), p.linear);
    EXPECT_DOUBLE_EQ(predict(w, HyperParams::from_natural(0, 0, 0.0), x), p.dense);
    // continuity in alpha
    const double y0 = predict(w, HyperParams::from_natural(0, 0, 0.5), x);
    const double y1 = predict(w, HyperParams::from_natural(0, 0, 0.5 + 1e-9), x);
    EXPECT_LT(std::abs(y1 - y0), 1e-8 * (1.0 + std::abs(p.linear - p.dense)));
  }
}

TEST(ModelLoss, MseBasics) {
  const Topology t = topo(2, 1);
  const Weights w(t);
  Dataset d(4, 2);
  for (double& y : d.y) y = 1.0;
  EXPECT_DOUBLE_EQ(mse(w, HyperParams{}, d), 1.0);
  for (double& y : d.y) y = 0.0;
  EXPECT_EQ(mse(w, HyperParams{}, d), 0.0);
  EXPECT_THROW(mse(w, HyperParams{}, Dataset(0, 2)), ValidationError);
}

TEST(ModelLoss, MseMatchesNaiveLoop) {
  std::mt19937_64 rng(3);
  const Topology t = topo(3, 2);
  const Weights w = random_weights(t, rng);
  const Dataset d = oracle::random_dataset(17, 3, rng);
  const HyperParams h = HyperParams::from_natural(0, 0, 0.4);
  double s = 0.0;
  for (std::size_t i = 0; i < d.rows; ++i) {
    double lin = w.skip()[3], dense = 0.0;
    for (std::size_t k = 0; k < 3; ++k) lin += w.skip()[k] * d.at(i, k);
    for (std::size_t j = 0; j < 2; ++j) {
      double z = w.input_hidden(j, 3);
      for (std::size_t k = 0; k < 3; ++k) z += w.input_hidden(j, k) * d.at(i, k);
      dense += std::tanh(z) * w.hidden_out()[j];
    }
    const double r = d.y[i] - (0.4 * lin + 0.6 * dense);
    s += r * r;
  }
  EXPECT_NEAR(mse(w, h, d), s / 17.0, 1e-13);
}

TEST(ModelPenalty, Examples) {
  const Topology lin = topo(1, 0, Activation::tanh, false);
  Weights w(lin);
  w.skip()[0] = 2.0;
  EXPECT_DOUBLE_EQ(penalty(w, HyperParams::from_natural(0, 1.0, 0.5)), 2.0);

  const Topology t = topo(1, 1, Activation::tanh, false);
  Weights d(t);
  d.input_hidden()[0] = 3.0;
  d.hidden_out()[0] = -4.0;
  EXPECT_NEAR(penalty(d, HyperParams::from_natural(0.5, 0, 0.5, 1e-12)), 3.5, 1e-6);

  EXPECT_NEAR(penalty(Weights(t), HyperParams::from_natural(1.0, 1.0, 0.5, 1e-14)), 0.0, 1e-6);
}

TEST(ModelPenalty, BiasIsNeverPenalized) {
  const Topology t = topo(2, 2);
  Weights w(t);
  w.skip()[2] = 100.0;                 // skip bias
  w.input_hidden()[2] = 50.0;          // hidden unit 0 bias
  w.input_hidden()[t.width() + 2] = 7.0;
  const HyperParams h = HyperParams::from_natural(1.0, 1.0, 0.5, 1e-6);
  const double zero_pen = penalty(Weights(t), h);
  EXPECT_DOUBLE_EQ(penalty(w, h), zero_pen);
}

TEST(ModelPenalty, NonNegativeAndMonotoneInStrengths) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Weights w = random_weights(topo(3, 2), rng);
    const double l1 = u(rng), l2 = u(rng);
    const double p = penalty(w, HyperParams::from_natural(l1, l2, 0.5));
    EXPECT_GE(p, 0.0);
    EXPECT_GE(penalty(w, HyperParams::from_natural(l1 + 0.1, l2, 0.5)), p);
    EXPECT_GE(penalty(w, HyperParams::from_natural(l1, l2 + 0.1, 0.5)), p);
  }
}

TEST(ModelLoss, RegularizedLossComposition) {
  std::mt19937_64 rng(5);
  const Topology t = topo(3, 2);
  const Dataset d = oracle::random_dataset(20, 3, rng);
  const Weights w = random_weights(t, rng);
  EXPECT_DOUBLE_EQ(regularized_loss(w, HyperParams::from_natural(0, 0, 0.5), d),
                   mse(w, HyperParams::from_natural(0, 0, 0.5), d));
  const HyperParams h = HyperParams::from_natural(0.3, 0.2, 0.5, 1e-4);
  const Weights z(t);
  const double dense_count = 2.0 * 3.0 + 2.0;
  EXPECT_NEAR(regularized_loss(z, h, d), mse(z, h, d) + 0.3 * dense_count * std::sqrt(1e-4), 1e-14);
}

TEST(ModelLoss, TapeEvaluationMatchesDirectFormula) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Topology t = topo(1 + trial % 5, trial % 4, trial % 3 ? Activation::tanh : Activation::logistic, trial % 2);
    const Dataset d = oracle::random_dataset(15, t.inputs, rng);
    const Weights w = random_weights(t, rng);
    const HyperParams h = random_hyper(rng);
    const LossProblem prob(t, d);
    const double direct = regularized_loss(w, h, d);
    EXPECT_NEAR(prob.loss(w.flat(), h), direct, 1e-12 * std::max(1.0, direct));
    EXPECT_NEAR(prob.loss(w.flat(), h, false), mse(w, h, d), 1e-12 * std::max(1.0, direct));
  }
}

TEST(ModelLoss, LinearCaseIsRidgeObjective) {
  std::mt19937_64 rng(7);
  const Topology t = topo(4, 0);
  const Dataset d = oracle::random_dataset(30, 4, rng);
  const Weights w = random_weights(t, rng);
  const double l2 = 0.37;
  double rss = 0.0;
  for (std::size_t i = 0; i < d.rows; ++i) {
    double yhat = w.skip()[4];
    for (std::size_t k = 0; k < 4; ++k) yhat += w.skip()[k] * d.at(i, k);
    rss += (d.y[i] - yhat) * (d.y[i] - yhat);
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < 4; ++k) sq += w.skip()[k] * w.skip()[k];
  EXPECT_NEAR(regularized_loss(w, HyperParams::from_natural(0, l2, 1.0), d), rss / 30.0 + 0.5 * l2 * sq, 1e-12);
}

TEST(ModelGrad, SkipBlockUnderPerfectFit) {
  // Zero residuals: only the penalty contributes.
  const Topology t = topo(2, 1);
  Weights w(t);
  w.skip()[0] = 0.4;
  w.skip()[1] = -1.3;
  Dataset d(5, 2);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (double& x : d.x) x = n(rng);
  const HyperParams h = HyperParams::from_natural(0.0, 0.7, 1.0);
  for (std::size_t i = 0; i < d.rows; ++i) d.y[i] = predict(w, h, d.row(i));
  const auto g = grad_w(w, h, d);
  EXPECT_NEAR(g[0], 0.7 * 0.4, 1e-15);
  EXPECT_NEAR(g[1], 0.7 * -1.3, 1e-15);
}

TEST(ModelGrad, SmoothAbsGradientVanishesAtZero) {
  const Topology t = topo(2, 2);
  const Weights w(t);
  Dataset d(3, 2);
  const auto g = grad_w(w, HyperParams::from_natural(5.0, 0.0, 0.5, 1e-6), d);
  for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(ModelGrad, MatchesFiniteDifferencesAtFiftyDraws) {
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Topology t = topo(1 + rng() % 10, rng() % 6, trial % 2 ? Activation::tanh : Activation::logistic);
    const Dataset d = oracle::random_dataset(12, t.inputs, rng);
    const Weights w = random_weights(t, rng);
    const HyperParams h = random_hyper(rng);
    const auto g = grad_w(w, h, d);
    const auto fd = oracle::fd_grad_w(w, h, d);
    worst = std::max(worst, oracle::rel_error(g, fd));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ModelGrad, HvpMatchesDifferencedGradient) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const Topology t = topo(3, 3);
    const Dataset d = oracle::random_dataset(10, 3, rng);
    const Weights w = random_weights(t, rng);
    const HyperParams h = random_hyper(rng);
    std::vector<double> v(w.size());
    std::normal_distribution<double> n;
    for (double& x : v) x = n(rng);
    const LossProblem prob(t, d);
    const auto hv = prob.hvp(w.flat(), h, v);
    const double eps = 1e-6;
    std::vector<double> wp(w.flat().begin(), w.flat().end()), wm = wp;
    for (std::size_t k = 0; k < v.size(); ++k) {
      wp[k] += eps * v[k];
      wm[k] -= eps * v[k];
    }
    const auto gp = prob.value_and_grad(wp, h).grad, gm = prob.value_and_grad(wm, h).grad;
    std::vector<double> fd(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) fd[k] = (gp[k] - gm[k]) / (2 * eps);
    EXPECT_LT(oracle::rel_error(hv, fd), 1e-6);
  }
}

TEST(ModelMixed, ZeroDirection) {
  std::mt19937_64 rng(11);
  const Topology t = topo(2, 2);
  const Dataset d = oracle::random_dataset(8, 2, rng);
  const Weights w = random_weights(t, rng);
  const std::vector<double> v(w.size(), 0.0);
  const auto mp = mixed_partial_vec(w, random_hyper(rng), d, v);
  EXPECT_EQ(mp.lambda1, 0.0);
  EXPECT_EQ(mp.lambda2, 0.0);
  EXPECT_EQ(mp.alpha, 0.0);
}

TEST(ModelMixed, Lambda2AlongSkipBlock) {
  std::mt19937_64 rng(12);
  const Topology t = topo(3, 1);
  const Dataset d = oracle::random_dataset(8, 3, rng);
  const Weights w = random_weights(t, rng);
  std::vector<double> v(w.size(), 0.0);
  double expect = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    v[k] = w.skip()[k];
    expect += w.skip()[k] * w.skip()[k];
  }
  v[3] = w.skip()[3];  // bias: outside the penalty
  EXPECT_DOUBLE_EQ(mixed_partial_vec(w, random_hyper(rng), d, v).lambda2, expect);
}

TEST(ModelMixed, AllComponentsMatchDifferencedGradients) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 10; ++trial) {
    const Topology t = topo(3, 2, trial % 2 ? Activation::tanh : Activation::logistic);
    const Dataset d = oracle::random_dataset(10, 3, rng);
    const Weights w = random_weights(t, rng);
    const HyperParams h = random_hyper(rng);
    std::vector<double> v(w.size());
    for (double& x : v) x = n(rng);
    const auto mp = mixed_partial_vec(w, h, d, v);

    auto vdot_grad = [&](double l1, double l2, double a) {
      const auto g = grad_w(w, HyperParams::from_natural(l1, l2, a, h.eps_smooth), d);
      double s = 0.0;
      for (std::size_t k = 0; k < v.size(); ++k) s += v[k] * g[k];
      return s;
    };
    const double e = 1e-5;
    const double l1 = h.lambda1(), l2 = h.lambda2(), a = h.alpha();
    const double fd1 = (vdot_grad(l1 + e, l2, a) - vdot_grad(l1 - e, l2, a)) / (2 * e);
    const double fd2 = (vdot_grad(l1, l2 + e, a) - vdot_grad(l1, l2 - e, a)) / (2 * e);
    const double fda = (vdot_grad(l1, l2, a + e) - vdot_grad(l1, l2, a - e)) / (2 * e);
    EXPECT_LT(oracle::rel_error(mp.lambda1, fd1, 1e-8), 1e-4);
    EXPECT_LT(oracle::rel_error(mp.lambda2, fd2, 1e-8), 1e-4);
    EXPECT_LT(oracle::rel_error(mp.alpha, fda, 1e-8), 1e-4);
  }
}

TEST(ModelMixed, ExplicitAlphaDerivativeOfLoss) {
  std::mt19937_64 rng(14);
  const Topology t = topo(2, 2);
  const Dataset d = oracle::random_dataset(10, 2, rng);
  const Weights w = random_weights(t, rng);
  const HyperParams h = random_hyper(rng);
  double d_alpha = 0.0;
  LossProblem(t, d).value_and_grad(w.flat(), h, false, d_alpha);
  const double e = 1e-6, a = h.alpha();
  const double fd = (mse(w, HyperParams::from_natural(0, 0, a + e), d) - mse(w, HyperParams::from_natural(0, 0, a - e), d)) /
                    (2 * e);
  EXPECT_LT(oracle::rel_error(d_alpha, fd), 1e-6);
}

TEST(ModelHyper, TransformRoundTrip) {
  const HyperParams h = HyperParams::from_natural(0.25, 3.0, 0.8);
  EXPECT_NEAR(h.lambda1(), 0.25, 1e-15);
  EXPECT_NEAR(h.lambda2(), 3.0, 1e-15);
  EXPECT_NEAR(h.alpha(), 0.8, 1e-15);
  const HyperParams z = HyperParams::from_natural(0.0, 0.0, 1.0);
  EXPECT_EQ(z.lambda1(), 0.0);
  EXPECT_EQ(z.alpha(), 1.0);
  EXPECT_EQ(HyperParams::from_natural(0, 0, 0.0).alpha(), 0.0);
  EXPECT_THROW(HyperParams::from_natural(-1, 0, 0.5), ValidationError);
  EXPECT_THROW(HyperParams::from_natural(0, 0, 1.5), ValidationError);
  EXPECT_THROW(HyperParams::from_natural(0, 0, 0.5, 0.0), ValidationError);
}

TEST(ModelInit, DeterministicAndScaled) {
  const Topology t = topo(50, 40);
  const Weights a = initialize(t, 42), b = initialize(t, 42), c = initialize(t, 43);
  EXPECT_TRUE(std::equal(a.flat().begin(), a.flat().end(), b.flat().begin()));
  EXPECT_FALSE(std::equal(a.flat().begin(), a.flat().end(), c.flat().begin()));
  double ss = 0.0;
  for (double x : a.input_hidden()) ss += x * x;
  const double sd = std::sqrt(ss / static_cast<double>(a.input_hidden().size()));
  EXPECT_NEAR(sd, 1.0 / std::sqrt(51.0), 0.01);
}

TEST(ModelJson, WeightsRoundTripBitExact) {
  std::mt19937_64 rng(15);
  const Topology t = topo(4, 3, Activation::logistic);
  const Weights w = random_weights(t, rng);
  const HyperParams h = HyperParams::from_natural(0.01, 0.2, 0.3);
  const auto doc = nlohmann::json::parse(to_json(w, &h).dump());
  const Weights back = weights_from_json(doc);
  EXPECT_EQ(back.topology(), t);
  EXPECT_TRUE(std::equal(w.flat().begin(), w.flat().end(), back.flat().begin()));
  const HyperParams hb = hyper_from_json(doc.at("hyper"));
  EXPECT_DOUBLE_EQ(hb.lambda2(), 0.2);
  auto bad = doc;
  bad["skip"].push_back(1.0);
  EXPECT_THROW(weights_from_json(bad), ShapeMismatch);
  bad = doc;
  bad["format"] = "other";
  EXPECT_THROW(weights_from_json(bad), ValidationError);
}
