#pragma once

// Momentum SGD with exactly reversible arithmetic.
//
//   g_t     = grad L(w_t, t)
//   v_{t+1} = gamma_t v_t - (1 - gamma_t) g_t
//   w_{t+1} = w_t + eta_t v_{t+1}
//
// Weights and velocities live on a fixed-point grid with `frac_bits`
// fractional bits. gamma_t is an integer numerator over 2^decay_bits, so
// gamma * v = (n * v) >> B; the B-bit remainder of that shift is the only
// information the update destroys, and it is pushed onto the buffer. Every
// other term is a deterministic function of the state it is subtracted from,
// which makes the whole step invertible bit for bit.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aashnet/errors.hpp"

namespace aashnet::trainer {

struct Schedule {
  std::vector<double> eta;
  std::vector<double> gamma;

  static Schedule constant(std::size_t steps, double eta, double gamma) {
    return {std::vector<double>(steps, eta), std::vector<double>(steps, gamma)};
  }

  std::size_t size() const { return eta.size(); }

  void validate() const {
    if (eta.size() != gamma.size()) throw ValidationError("eta and gamma schedules differ in length");
    for (std::size_t t = 0; t < eta.size(); ++t) {
      if (!(eta[t] > 0.0) || !std::isfinite(eta[t])) {
        throw ValidationError("eta must be positive (step " + std::to_string(t + 1) + ")");
      }
      if (!(gamma[t] > 0.0 && gamma[t] < 1.0)) {
        throw ValidationError("gamma must lie in (0, 1) (step " + std::to_string(t + 1) + ")");
      }
    }
  }
};

struct FixedPointFormat {
  int frac_bits = 32;
  int decay_bits = 16;

  void validate() const {
    if (frac_bits < 1 || frac_bits > 52) throw ValidationError("frac_bits must lie in [1, 52]");
    if (decay_bits < 2 || decay_bits > 31) throw ValidationError("decay_bits must lie in [2, 31]");
  }

  double unit() const { return std::ldexp(1.0, -frac_bits); }
  std::int64_t decay_denominator() const { return std::int64_t{1} << decay_bits; }

  // Nearest representable numerator, kept inside (0, 2^B).
  std::int64_t gamma_numerator(double gamma) const {
    const auto den = decay_denominator();
    auto n = static_cast<std::int64_t>(std::llround(gamma * static_cast<double>(den)));
    return std::clamp<std::int64_t>(n, 1, den - 1);
  }
  double effective_gamma(double gamma) const {
    return static_cast<double>(gamma_numerator(gamma)) / static_cast<double>(decay_denominator());
  }

  double to_real(std::int64_t q) const { return std::ldexp(static_cast<double>(q), -frac_bits); }
};

enum class ReversalMode { exact, checkpoint };

struct TrainState {
  std::size_t t = 0;  // completed steps
  std::vector<std::int64_t> w;
  std::vector<std::int64_t> v;

  std::vector<double> weights(const FixedPointFormat& f) const { return real(w, f); }
  std::vector<double> velocity(const FixedPointFormat& f) const { return real(v, f); }

  bool operator==(const TrainState&) const = default;

 private:
  static std::vector<double> real(const std::vector<std::int64_t>& q, const FixedPointFormat& f) {
    std::vector<double> out(q.size());
    for (std::size_t k = 0; k < q.size(); ++k) out[k] = f.to_real(q[k]);
    return out;
  }
};

// Storage for the reverse pass: the remainder stack (exact mode) or periodic
// state snapshots (checkpoint mode).
class ReversalBuffer {
 public:
  explicit ReversalBuffer(ReversalMode mode = ReversalMode::exact, FixedPointFormat format = {},
                          std::size_t checkpoint_every = 10)
      : mode_(mode), format_(format), checkpoint_every_(checkpoint_every) {
    format_.validate();
    if (checkpoint_every_ == 0) throw ValidationError("checkpoint interval must be >= 1");
  }

  ReversalMode mode() const { return mode_; }
  const FixedPointFormat& format() const { return format_; }
  std::size_t checkpoint_every() const { return checkpoint_every_; }

  bool empty() const { return bits_.empty() && snapshots_.empty(); }
  std::size_t depth() const { return bits_.size(); }
  std::size_t pushes() const { return pushes_; }
  std::size_t pops() const { return pops_; }
  std::size_t snapshot_count() const { return snapshots_.size(); }

  void push(std::uint32_t remainder) {
    bits_.push_back(remainder);
    ++pushes_;
  }

  std::uint32_t pop() {
    if (bits_.empty()) throw ContractViolation("reversal buffer underflow");
    const std::uint32_t r = bits_.back();
    bits_.pop_back();
    ++pops_;
    return r;
  }

  void save(const TrainState& s) { snapshots_.push_back(s); }

  // Latest snapshot at or before step t.
  const TrainState& snapshot_before(std::size_t t) const {
    for (auto it = snapshots_.rbegin(); it != snapshots_.rend(); ++it) {
      if (it->t <= t) return *it;
    }
    throw ContractViolation("no checkpoint at or before step " + std::to_string(t));
  }

  void drop_snapshots_from(std::size_t t) {
    while (!snapshots_.empty() && snapshots_.back().t >= t) snapshots_.pop_back();
  }

 private:
  ReversalMode mode_;
  FixedPointFormat format_;
  std::size_t checkpoint_every_;
  std::vector<std::uint32_t> bits_;
  std::vector<TrainState> snapshots_;
  std::size_t pushes_ = 0;
  std::size_t pops_ = 0;
};

// Which rows feed the gradient at each step. Minibatches are a pure function
// of (seed, step), so the reverse pass sees the same batches.
class BatchPlan {
 public:
  static BatchPlan full() { return BatchPlan(); }

  static BatchPlan minibatch(std::size_t rows, std::size_t batch_size, std::uint64_t seed) {
    if (batch_size == 0 || batch_size > rows) throw ValidationError("batch size must lie in [1, rows]");
    BatchPlan p;
    p.rows_ = rows;
    p.batch_ = batch_size;
    p.seed_ = seed;
    return p;
  }

  bool full_batch() const { return batch_ == 0; }
  std::size_t batch_size() const { return batch_; }

  // Sorted row indices for 0-based step t; empty for a full batch.
  std::vector<std::size_t> indices(std::size_t t) const {
    if (full_batch()) return {};
    std::vector<std::size_t> pool(rows_);
    for (std::size_t i = 0; i < rows_; ++i) pool[i] = i;
    std::uint64_t state = seed_ ^ (0x9E3779B97F4A7C15ULL * (t + 1));
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(splitmix64(state) % (rows_ - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(batch_);
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  bool operator==(const BatchPlan&) const = default;

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::size_t rows_ = 0;
  std::size_t batch_ = 0;
  std::uint64_t seed_ = 0;
};

template <class F>
concept GradientOracle = requires(const F& f, std::span<const double> w, std::size_t t) {
  { f.gradient(w, t) } -> std::convertible_to<std::vector<double>>;
};

// Called after every forward step with the 1-based step number, the training
// loss at the pre-step weights (NaN when the oracle does not report values),
// and the new state.
using Observer = std::function<void(std::size_t step, double loss, const TrainState& state)>;

namespace detail {

using i128 = __int128;

inline constexpr std::int64_t kLimit = std::int64_t{1} << 62;

inline std::int64_t checked(i128 x, const char* what, std::size_t step) {
  if (x >= kLimit || x <= -kLimit) throw StepError(std::string("fixed-point overflow in ") + what, step);
  return static_cast<std::int64_t>(x);
}

// Gradient on the fixed-point grid.
inline std::vector<std::int64_t> quantize(const std::vector<double>& g, const FixedPointFormat& f,
                                          std::size_t step) {
  std::vector<std::int64_t> q(g.size());
  const double scale = std::ldexp(1.0, f.frac_bits);
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!std::isfinite(g[k])) throw StepError("non-finite gradient", step);
    const double s = g[k] * scale;
    if (std::abs(s) >= std::ldexp(1.0, 62)) throw StepError("fixed-point overflow in gradient", step);
    q[k] = std::llround(s);
  }
  return q;
}

template <GradientOracle F>
std::pair<std::vector<double>, double> evaluate(const F& f, std::span<const double> w, std::size_t t) {
  if constexpr (requires { f.value_and_gradient(w, t); }) {
    auto vg = f.value_and_gradient(w, t);
    return {std::move(vg.grad), vg.value};
  } else {
    return {f.gradient(w, t), std::nan("")};
  }
}

inline std::int64_t position_step(double eta, std::int64_t v) {
  return std::llround(eta * static_cast<double>(v));
}

// One forward step from s (s.t == t) given the quantized gradient.
inline void forward_step(TrainState& s, const std::vector<std::int64_t>& g, const Schedule& sched,
                         const FixedPointFormat& f, ReversalBuffer* stack) {
  const std::size_t t = s.t;
  const std::size_t step = t + 1;
  const std::int64_t n = f.gamma_numerator(sched.gamma[t]);
  const std::int64_t comp = f.decay_denominator() - n;
  const int b = f.decay_bits;
  const i128 mask = (i128{1} << b) - 1;
  for (std::size_t k = 0; k < s.v.size(); ++k) {
    const i128 prod = i128{n} * s.v[k];
    const i128 decayed = prod >> b;  // floor
    if (stack) stack->push(static_cast<std::uint32_t>(prod & mask));
    const i128 pulled = (i128{comp} * g[k]) >> b;
    s.v[k] = checked(decayed - pulled, "velocity", step);
    s.w[k] = checked(i128{s.w[k]} + position_step(sched.eta[t], s.v[k]), "weights", step);
  }
  s.t = step;
}

}  // namespace detail

inline TrainState initial_state(std::span<const double> w_init, const FixedPointFormat& f) {
  TrainState s;
  s.w.resize(w_init.size());
  s.v.assign(w_init.size(), 0);
  const double scale = std::ldexp(1.0, f.frac_bits);
  for (std::size_t k = 0; k < w_init.size(); ++k) {
    if (!std::isfinite(w_init[k])) throw ValidationError("initial weights must be finite");
    const double q = w_init[k] * scale;
    if (std::abs(q) >= std::ldexp(1.0, 62)) throw StepError("fixed-point overflow in initial weights", 0);
    s.w[k] = std::llround(q);
  }
  return s;
}

// Runs the full schedule from w_init (v starts at zero). The buffer must be
// empty; it comes back filled for step_reverse.
template <GradientOracle F>
TrainState train(std::span<const double> w_init, const Schedule& sched, const F& objective, ReversalBuffer& buf,
                 const Observer& observer = {}) {
  sched.validate();
  if (sched.size() == 0) throw ValidationError("schedule must have at least one step");
  if (!buf.empty()) throw ContractViolation("reversal buffer must be empty before training");
  const FixedPointFormat& f = buf.format();
  TrainState s = initial_state(w_init, f);
  const bool exact = buf.mode() == ReversalMode::exact;
  for (std::size_t t = 0; t < sched.size(); ++t) {
    if (!exact && t % buf.checkpoint_every() == 0) buf.save(s);
    const auto [grad, loss] = detail::evaluate(objective, s.weights(f), t);
    if (grad.size() != s.w.size()) throw ShapeMismatch("gradient length differs from weight count");
    detail::forward_step(s, detail::quantize(grad, f, t + 1), sched, f, exact ? &buf : nullptr);
    if (observer) observer(t + 1, loss, s);
  }
  return s;
}

// Undoes the step that produced `state`, returning the state one step earlier.
// When `gradient` is non-null it receives the quantized gradient (as reals)
// used by that step, i.e. grad L at the returned weights.
template <GradientOracle F>
TrainState step_reverse(const TrainState& state, const Schedule& sched, const F& objective, ReversalBuffer& buf,
                        std::vector<double>* gradient = nullptr) {
  if (state.t == 0) throw ContractViolation("cannot reverse past the initial state");
  if (state.t > sched.size()) throw ContractViolation("state is beyond the end of the schedule");
  const FixedPointFormat& f = buf.format();
  const std::size_t t = state.t - 1;  // 0-based index of the step being undone
  TrainState prev;
  std::vector<std::int64_t> g;

  if (buf.mode() == ReversalMode::exact) {
    if (buf.depth() < state.w.size()) throw ContractViolation("reversal buffer underflow");
    prev = state;
    for (std::size_t k = 0; k < prev.w.size(); ++k) {
      prev.w[k] -= detail::position_step(sched.eta[t], prev.v[k]);
    }
    g = detail::quantize(objective.gradient(prev.weights(f), t), f, t + 1);
    const std::int64_t n = f.gamma_numerator(sched.gamma[t]);
    const std::int64_t comp = f.decay_denominator() - n;
    const int b = f.decay_bits;
    for (std::size_t k = prev.v.size(); k-- > 0;) {
      const detail::i128 pulled = (detail::i128{comp} * g[k]) >> b;
      const detail::i128 decayed = detail::i128{prev.v[k]} + pulled;
      const detail::i128 prod = (decayed << b) + buf.pop();
      if (prod % n != 0) throw ContractViolation("reversal buffer does not match the trajectory");
      prev.v[k] = static_cast<std::int64_t>(prod / n);
    }
    prev.t = t;
  } else {
    prev = buf.snapshot_before(t);
    while (prev.t < t) {
      auto gq = detail::quantize(objective.gradient(prev.weights(f), prev.t), f, prev.t + 1);
      detail::forward_step(prev, gq, sched, f, nullptr);
    }
    g = detail::quantize(objective.gradient(prev.weights(f), t), f, t + 1);
    buf.drop_snapshots_from(t);
  }

  if (gradient) {
    gradient->resize(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) (*gradient)[k] = f.to_real(g[k]);
  }
  return prev;
}

// ---------------------------------------------------------------------------
// Binary trajectory dump: per record, the step index then w then v, each as a
// 64-bit little-endian word.

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t x) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((x >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

inline bool get_u64(std::istream& is, std::uint64_t& x) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) return false;
  x = 0;
  for (int i = 0; i < 8; ++i) x |= std::uint64_t{bytes[i]} << (8 * i);
  return true;
}

}  // namespace detail

inline void write_trajectory_record(std::ostream& os, const TrainState& s) {
  detail::put_u64(os, s.t);
  for (std::int64_t x : s.w) detail::put_u64(os, static_cast<std::uint64_t>(x));
  for (std::int64_t x : s.v) detail::put_u64(os, static_cast<std::uint64_t>(x));
}

inline std::vector<TrainState> read_trajectory(std::istream& is, std::size_t weight_count) {
  std::vector<TrainState> out;
  std::uint64_t word = 0;
  while (detail::get_u64(is, word)) {
    TrainState s;
    s.t = static_cast<std::size_t>(word);
    s.w.resize(weight_count);
    s.v.resize(weight_count);
    for (auto* block : {&s.w, &s.v}) {
      for (auto& x : *block) {
        if (!detail::get_u64(is, word)) throw ValidationError("truncated trajectory record");
        x = static_cast<std::int64_t>(word);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace aashnet::trainer
