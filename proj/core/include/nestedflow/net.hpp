#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nestedflow/errors.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

// Shape of the length-conditioned residual field. The stack of `blocks`
// conditioned feed-forward units is split into groups of `group_size`; each
// group is one Euler step of the inner depth ODE, so an active length l
// executes l / group_size steps with step size group_size / l. Admissible
// lengths are the multiples of group_size in [min_blocks, blocks].
struct NetConfig {
  int data_dim = 2;
  int hidden_dim = 64;
  int blocks = 6;
  int group_size = 1;
  int min_blocks = 1;
  int embed_dim = 64;
  int num_classes = 0;
  bool use_d_embedding = false;

  // Dyadic step-size conditioning levels for the optional time-shortcut
  // mode: d = 2^-k for k in [0, kDyadicLevels).
  static constexpr int kDyadicLevels = 8;

  void validate() const {
    if (data_dim < 1) throw ConfigError("data_dim must be positive");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be positive");
    if (embed_dim < 2 || embed_dim % 2 != 0) {
      throw ConfigError("embed_dim must be even and at least 2");
    }
    if (blocks < 1) throw ConfigError("blocks must be positive");
    if (group_size < 1) throw ConfigError("group_size must be positive");
    if (blocks % group_size != 0) throw ConfigError("blocks must be a multiple of group_size");
    if (min_blocks < 1 || min_blocks > blocks) {
      throw ConfigError("min_blocks must lie in [1, blocks]");
    }
    if (min_blocks % group_size != 0) {
      throw ConfigError("min_blocks must be a multiple of group_size");
    }
    if (num_classes < 0) throw ConfigError("num_classes must be non-negative");
  }

  bool length_admissible(int length) const {
    return length >= min_blocks && length <= blocks && length % group_size == 0;
  }

  std::vector<int> admissible_lengths() const {
    std::vector<int> out;
    for (int l = min_blocks; l <= blocks; l += group_size) out.push_back(l);
    return out;
  }

  int num_length_options() const { return (blocks - min_blocks) / group_size + 1; }

  // Row of the length-embedding table consumed at a given active length.
  int length_index(int length) const { return (length - min_blocks) / group_size; }

  int num_steps(int length) const { return length / group_size; }
};

// Conditioning inputs for one field evaluation. d_index < 0 means no
// step-size row is added; label < 0 selects the null-class row when the
// model is class-conditional and is ignored otherwise.
struct ConditionSet {
  double t = 0.0;
  int length = 0;
  int d_index = -1;
  int label = -1;
};

struct TensorInfo {
  std::string name;
  std::vector<int64_t> dims;
  int64_t offset = 0;
  int64_t size = 0;
};

// Flat-buffer layout of every learnable tensor. Order is fixed; the
// checkpoint directory, the optimizer state and finite-difference probes all
// address parameters through it.
class ParamLayout {
 public:
  struct BlockOffsets {
    int64_t in_w, in_b, mod_w, mod_b, out_w, out_b;
  };

  ParamLayout() = default;

  explicit ParamLayout(const NetConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
    int64_t at = 0;
    auto push = [&](const std::string& name, std::vector<int64_t> dims) {
      int64_t size = 1;
      for (int64_t dim : dims) size *= dim;
      tensors_.push_back({name, std::move(dims), at, size});
      at += size;
      return at - size;
    };
    block_stride_ = 0;
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      BlockOffsets bo;
      bo.in_w = push(p + "in_w", {h, d});
      bo.in_b = push(p + "in_b", {h});
      bo.mod_w = push(p + "mod_w", {3 * h, e});
      bo.mod_b = push(p + "mod_b", {3 * h});
      bo.out_w = push(p + "out_w", {d, h});
      bo.out_b = push(p + "out_b", {d});
      if (b == 0) {
        block0_ = bo;
        block_stride_ = at;
      }
    }
    time_w_ = push("time.w", {e, e});
    time_b_ = push("time.b", {e});
    len_table_ = push("length_embed", {cfg.num_length_options(), e});
    if (cfg.use_d_embedding) {
      d_table_ = push("stepsize_embed", {NetConfig::kDyadicLevels, e});
    }
    if (cfg.num_classes > 0) {
      class_table_ = push("class_embed", {cfg.num_classes + 1, e});
    }
    total_ = at;
  }

  BlockOffsets block(int b) const {
    BlockOffsets bo = block0_;
    const int64_t shift = static_cast<int64_t>(b) * block_stride_;
    bo.in_w += shift;
    bo.in_b += shift;
    bo.mod_w += shift;
    bo.mod_b += shift;
    bo.out_w += shift;
    bo.out_b += shift;
    return bo;
  }

  int64_t time_w() const { return time_w_; }
  int64_t time_b() const { return time_b_; }
  int64_t len_table() const { return len_table_; }
  int64_t d_table() const { return d_table_; }
  int64_t class_table() const { return class_table_; }
  int64_t total_size() const { return total_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }

 private:
  std::vector<TensorInfo> tensors_;
  BlockOffsets block0_{};
  int64_t block_stride_ = 0;
  int64_t time_w_ = -1, time_b_ = -1, len_table_ = -1, d_table_ = -1, class_table_ = -1;
  int64_t total_ = 0;
};

template <typename T>
struct FieldParams {
  NetConfig config;
  ParamLayout layout;
  std::vector<T> values;

  std::span<T> tensor(int64_t offset, int64_t size) {
    return std::span<T>(values.data() + offset, static_cast<size_t>(size));
  }
  std::span<const T> tensor(int64_t offset, int64_t size) const {
    return std::span<const T>(values.data() + offset, static_cast<size_t>(size));
  }
};

// Per-thread evaluation counters; tests use them to assert that inactive
// blocks are never executed.
struct EvalCounters {
  uint64_t block_evals = 0;
  uint64_t forward_calls = 0;
};

inline EvalCounters& eval_counters() {
  thread_local EvalCounters counters;
  return counters;
}

inline void reset_eval_counters() { eval_counters() = EvalCounters{}; }

// Activations recorded by forward() so backward() can replay the chain.
template <typename T>
struct ForwardTape {
  ConditionSet cond;
  int steps = 0;
  std::vector<T> sin_feats;  // E sinusoidal time features
  std::vector<T> cond_embed; // E
  std::vector<T> block_in;   // L x D   input to each executed block body
  std::vector<T> pre_act;    // L x H   first-layer pre-activation
  std::vector<T> act;        // L x H   silu output
  std::vector<T> mods;       // L x 3H  (scale, shift, gate) per block
  std::vector<T> gate_sig;   // L x H   sigmoid(gate)
  std::vector<T> gated;      // L x H   modulated, gated hidden vector
  std::vector<T> r_states;   // (S+1) x D residual states
  std::vector<T> group_out;  // S x D   per-step group velocities

  void resize(const NetConfig& cfg) {
    const size_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
    const size_t l = cfg.blocks, s = cfg.blocks / cfg.group_size;
    sin_feats.resize(e);
    cond_embed.resize(e);
    block_in.resize(l * d);
    pre_act.resize(l * h);
    act.resize(l * h);
    mods.resize(l * 3 * h);
    gate_sig.resize(l * h);
    gated.resize(l * h);
    r_states.resize((s + 1) * d);
    group_out.resize(s * d);
  }
};

namespace detail {

template <typename T>
inline void matvec(std::span<const T> w, std::span<const T> x, std::span<T> out) {
  const size_t rows = out.size(), cols = x.size();
  for (size_t r = 0; r < rows; ++r) {
    const T* wr = w.data() + r * cols;
    T acc = T(0);
    for (size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc;
  }
}

// out[c] += w^T y for a row-major (rows x cols) matrix.
template <typename T>
inline void matvec_transposed_accum(std::span<const T> w, std::span<const T> y,
                                    std::span<T> out) {
  const size_t rows = y.size(), cols = out.size();
  for (size_t r = 0; r < rows; ++r) {
    const T* wr = w.data() + r * cols;
    const T yr = y[r];
    for (size_t c = 0; c < cols; ++c) out[c] += yr * wr[c];
  }
}

// w[r, c] += y[r] * x[c]
template <typename T>
inline void outer_accum(std::span<T> w, std::span<const T> y, std::span<const T> x) {
  const size_t rows = y.size(), cols = x.size();
  for (size_t r = 0; r < rows; ++r) {
    T* wr = w.data() + r * cols;
    const T yr = y[r];
    for (size_t c = 0; c < cols; ++c) wr[c] += yr * x[c];
  }
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

inline void sinusoidal_features(double t, int embed_dim, double* out) {
  const int half = embed_dim / 2;
  const double scaled = 1000.0 * t;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    const double arg = scaled * freq;
    out[i] = std::sin(arg);
    out[half + i] = std::cos(arg);
  }
}

}  // namespace detail

template <typename T>
FieldParams<T> init_params(const NetConfig& cfg, Rng& rng) {
  cfg.validate();
  FieldParams<T> p;
  p.config = cfg;
  p.layout = ParamLayout(cfg);
  p.values.assign(p.layout.total_size(), T(0));

  const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.data_dim));
  const double mod_std = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  const double table_std = 0.02;

  auto fill_normal = [&](std::span<T> w, double std) {
    for (T& v : w) v = static_cast<T>(std * rng.normal());
  };

  const int64_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
  for (int b = 0; b < cfg.blocks; ++b) {
    const auto bo = p.layout.block(b);
    fill_normal(p.tensor(bo.in_w, h * d), in_std);
    fill_normal(p.tensor(bo.mod_w, 3 * h * e), mod_std);
    // out_w/out_b stay exactly zero so the fresh field is identically zero.
  }
  fill_normal(p.tensor(p.layout.time_w(), e * e), mod_std);
  // length table stays zero so length conditioning starts neutral
  if (cfg.use_d_embedding) {
    fill_normal(p.tensor(p.layout.d_table(), NetConfig::kDyadicLevels * e), table_std);
  }
  if (cfg.num_classes > 0) {
    fill_normal(p.tensor(p.layout.class_table(), (cfg.num_classes + 1) * e), table_std);
  }
  return p;
}

template <typename T>
void validate_condition(const NetConfig& cfg, const ConditionSet& cond) {
  if (!cfg.length_admissible(cond.length)) {
    std::string msg = "length " + std::to_string(cond.length) +
                      " not admissible; admissible lengths:";
    for (int l : cfg.admissible_lengths()) msg += " " + std::to_string(l);
    throw ConfigError(msg);
  }
  if (cond.d_index >= NetConfig::kDyadicLevels) {
    throw ConfigError("d_index out of range");
  }
  if (cond.d_index >= 0 && !cfg.use_d_embedding) {
    throw ConfigError("d conditioning requested but the model has no step-size table");
  }
  if (cond.label >= cfg.num_classes) {
    throw ConfigError("label " + std::to_string(cond.label) + " out of range for " +
                      std::to_string(cfg.num_classes) + " classes");
  }
}

// Sinusoidal time features projected to embed_dim, plus the learned length
// row and the optional step-size / class rows, summed.
template <typename T>
void embed_condition(const FieldParams<T>& p, const ConditionSet& cond,
                     std::span<T> out, std::span<T> sin_feats_out = {},
                     bool include_length = true) {
  const NetConfig& cfg = p.config;
  validate_condition<T>(cfg, cond);
  const int64_t e = cfg.embed_dim;

  double feats[1024];
  if (e > 1024) throw ConfigError("embed_dim larger than supported maximum (1024)");
  detail::sinusoidal_features(cond.t, cfg.embed_dim, feats);

  thread_local std::vector<T> feats_t;
  feats_t.resize(e);
  for (int64_t i = 0; i < e; ++i) feats_t[i] = static_cast<T>(feats[i]);
  if (!sin_feats_out.empty()) {
    for (int64_t i = 0; i < e; ++i) sin_feats_out[i] = feats_t[i];
  }

  detail::matvec<T>(p.tensor(p.layout.time_w(), e * e), feats_t, out);
  {
    auto tb = p.tensor(p.layout.time_b(), e);
    for (int64_t i = 0; i < e; ++i) out[i] += tb[i];
  }
  if (include_length) {
    auto row = p.tensor(p.layout.len_table() + cfg.length_index(cond.length) * e, e);
    for (int64_t i = 0; i < e; ++i) out[i] += row[i];
  }
  if (cond.d_index >= 0) {
    auto row = p.tensor(p.layout.d_table() + cond.d_index * e, e);
    for (int64_t i = 0; i < e; ++i) out[i] += row[i];
  }
  if (cfg.num_classes > 0) {
    const int row_idx = cond.label < 0 ? cfg.num_classes : cond.label;
    auto row = p.tensor(p.layout.class_table() + static_cast<int64_t>(row_idx) * e, e);
    for (int64_t i = 0; i < e; ++i) out[i] += row[i];
  }
}

// One conditioned feed-forward unit body:
//   pre   = in_w * u + in_b
//   h     = silu(pre)
//   (scale, shift, gate) = mod_w * c + mod_b
//   g     = (h * (1 + scale) + shift) * sigmoid(gate)
//   y     = out_w * g + out_b
// Tape slices, when given, receive the intermediates for backward().
template <typename T>
void block_body(const FieldParams<T>& p, int block, std::span<const T> cond_embed,
                std::span<const T> u, std::span<T> y, std::span<T> tape_pre = {},
                std::span<T> tape_act = {}, std::span<T> tape_mods = {},
                std::span<T> tape_gate_sig = {}, std::span<T> tape_gated = {}) {
  const NetConfig& cfg = p.config;
  const int64_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
  const auto bo = p.layout.block(block);
  ++eval_counters().block_evals;

  thread_local std::vector<T> scratch;
  scratch.resize(5 * h);
  std::span<T> pre = tape_pre.empty() ? std::span<T>(scratch.data(), h) : tape_pre;
  std::span<T> act = tape_act.empty() ? std::span<T>(scratch.data() + h, h) : tape_act;
  std::span<T> mods = tape_mods.empty() ? std::span<T>(scratch.data() + 2 * h, 3 * h) : tape_mods;

  detail::matvec<T>(p.tensor(bo.in_w, h * d), u, pre);
  {
    auto b1 = p.tensor(bo.in_b, h);
    for (int64_t i = 0; i < h; ++i) pre[i] += b1[i];
  }
  for (int64_t i = 0; i < h; ++i) act[i] = pre[i] * detail::sigmoid(pre[i]);

  detail::matvec<T>(p.tensor(bo.mod_w, 3 * h * e), cond_embed, mods);
  {
    auto bc = p.tensor(bo.mod_b, 3 * h);
    for (int64_t i = 0; i < 3 * h; ++i) mods[i] += bc[i];
  }

  thread_local std::vector<T> gated_scratch;
  gated_scratch.resize(2 * h);
  std::span<T> gate_sig =
      tape_gate_sig.empty() ? std::span<T>(gated_scratch.data(), h) : tape_gate_sig;
  std::span<T> gated =
      tape_gated.empty() ? std::span<T>(gated_scratch.data() + h, h) : tape_gated;
  const T* scale = mods.data();
  const T* shift = mods.data() + h;
  const T* gate = mods.data() + 2 * h;
  for (int64_t i = 0; i < h; ++i) {
    gate_sig[i] = detail::sigmoid(gate[i]);
    gated[i] = (act[i] * (T(1) + scale[i]) + shift[i]) * gate_sig[i];
  }

  detail::matvec<T>(p.tensor(bo.out_w, d * h), gated, y);
  {
    auto b2 = p.tensor(bo.out_b, d);
    for (int64_t i = 0; i < d; ++i) y[i] += b2[i];
  }
}

// Field evaluation v(l, d, t, x): the inner depth ODE. With S = l / G steps
// and step size 1/S, each step runs its group of G blocks as sequential
// residual units and advances the state by the scaled group displacement:
//   r_0 = x;  r_i = r_{i-1} + (1/S) * g_i(r_{i-1});  v = sum_i g_i.
// Only the first l blocks are ever executed. Throws NumericError (with the
// step index) when the state stops being finite.
template <typename T>
void forward(const FieldParams<T>& p, const ConditionSet& cond, std::span<const T> x,
             std::span<T> v_out, ForwardTape<T>* tape = nullptr,
             std::span<T> r_final_out = {}) {
  const NetConfig& cfg = p.config;
  const int64_t d = cfg.data_dim;
  ++eval_counters().forward_calls;

  thread_local ForwardTape<T> scratch_tape;
  ForwardTape<T>* tp = tape ? tape : &scratch_tape;
  tp->resize(cfg);
  tp->cond = cond;

  embed_condition(p, cond, std::span<T>(tp->cond_embed),
                  std::span<T>(tp->sin_feats));

  const int steps = cfg.num_steps(cond.length);
  tp->steps = steps;
  const T delta = T(1) / static_cast<T>(steps);
  const int64_t h = cfg.hidden_dim;

  T* r = tp->r_states.data();
  for (int64_t i = 0; i < d; ++i) r[i] = x[i];
  for (int64_t i = 0; i < d; ++i) v_out[i] = T(0);

  thread_local std::vector<T> u, y;
  u.resize(d);
  y.resize(d);

  for (int step = 0; step < steps; ++step) {
    const T* r_prev = tp->r_states.data() + step * d;
    T* g = tp->group_out.data() + step * d;
    for (int64_t i = 0; i < d; ++i) {
      u[i] = r_prev[i];
      g[i] = T(0);
    }
    for (int j = 0; j < cfg.group_size; ++j) {
      const int block = step * cfg.group_size + j;
      T* u_rec = tp->block_in.data() + static_cast<int64_t>(block) * d;
      for (int64_t i = 0; i < d; ++i) u_rec[i] = u[i];
      block_body<T>(p, block, tp->cond_embed, std::span<const T>(u.data(), d),
                    std::span<T>(y.data(), d),
                    std::span<T>(tp->pre_act.data() + static_cast<int64_t>(block) * h, h),
                    std::span<T>(tp->act.data() + static_cast<int64_t>(block) * h, h),
                    std::span<T>(tp->mods.data() + static_cast<int64_t>(block) * 3 * h, 3 * h),
                    std::span<T>(tp->gate_sig.data() + static_cast<int64_t>(block) * h, h),
                    std::span<T>(tp->gated.data() + static_cast<int64_t>(block) * h, h));
      for (int64_t i = 0; i < d; ++i) {
        u[i] += y[i];
        g[i] += y[i];
      }
    }
    T* r_next = tp->r_states.data() + (step + 1) * d;
    bool finite = true;
    for (int64_t i = 0; i < d; ++i) {
      r_next[i] = r_prev[i] + delta * g[i];
      v_out[i] += g[i];
      finite = finite && std::isfinite(static_cast<double>(r_next[i]));
    }
    if (!finite) {
      throw NumericError("non-finite field state at inner step " + std::to_string(step + 1) +
                         " of " + std::to_string(steps));
    }
  }

  if (!r_final_out.empty()) {
    const T* rf = tp->r_states.data() + static_cast<int64_t>(steps) * d;
    for (int64_t i = 0; i < d; ++i) r_final_out[i] = rf[i];
  }
}

// The conventional monolithic stack: every block applied once as a plain
// residual unit, no length row, no step scaling. Baseline for overhead and
// equivalence comparisons.
template <typename T>
void forward_monolithic(const FieldParams<T>& p, const ConditionSet& cond,
                        std::span<const T> x, std::span<T> v_out) {
  const NetConfig& cfg = p.config;
  const int64_t d = cfg.data_dim;

  thread_local std::vector<T> cond_embed, u, y;
  cond_embed.resize(cfg.embed_dim);
  u.resize(d);
  y.resize(d);

  ConditionSet c = cond;
  c.length = cfg.blocks;
  embed_condition(p, c, std::span<T>(cond_embed), {}, /*include_length=*/false);

  for (int64_t i = 0; i < d; ++i) u[i] = x[i];
  for (int b = 0; b < cfg.blocks; ++b) {
    block_body<T>(p, b, cond_embed, std::span<const T>(u.data(), d),
                  std::span<T>(y.data(), d));
    for (int64_t i = 0; i < d; ++i) u[i] += y[i];
  }
  for (int64_t i = 0; i < d; ++i) v_out[i] = u[i] - x[i];
}

// Reverse pass. `dv` is dL/dv; gradients accumulate into `grads`
// (layout-congruent with the parameters). The tape must come from a
// forward() call on the same parameters.
template <typename T>
void backward(const FieldParams<T>& p, const ForwardTape<T>& tape, std::span<const T> dv,
              std::span<T> grads) {
  const NetConfig& cfg = p.config;
  const int64_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
  const int steps = tape.steps;
  const T delta = T(1) / static_cast<T>(steps);

  thread_local std::vector<T> a_r, a_g, du, dy, dgated, dmods, dpre, dcond;
  a_r.assign(d, T(0));
  a_g.resize(d);
  du.resize(d);
  dy.resize(d);
  dgated.resize(h);
  dmods.resize(3 * h);
  dpre.resize(h);
  dcond.assign(e, T(0));

  for (int step = steps - 1; step >= 0; --step) {
    for (int64_t i = 0; i < d; ++i) {
      a_g[i] = dv[i] + delta * a_r[i];
      du[i] = a_g[i];
    }
    for (int j = cfg.group_size - 1; j >= 0; --j) {
      const int block = step * cfg.group_size + j;
      const auto bo = p.layout.block(block);
      const T* u_in = tape.block_in.data() + static_cast<int64_t>(block) * d;
      const T* pre = tape.pre_act.data() + static_cast<int64_t>(block) * h;
      const T* act = tape.act.data() + static_cast<int64_t>(block) * h;
      const T* mods = tape.mods.data() + static_cast<int64_t>(block) * 3 * h;
      const T* gate_sig = tape.gate_sig.data() + static_cast<int64_t>(block) * h;
      const T* gated = tape.gated.data() + static_cast<int64_t>(block) * h;
      const T* scale = mods;
      const T* shift = mods + h;
      (void)shift;

      for (int64_t i = 0; i < d; ++i) dy[i] = du[i];

      // y = out_w * gated + out_b
      detail::outer_accum<T>(grads.subspan(bo.out_w, d * h), std::span<const T>(dy.data(), d),
                             std::span<const T>(gated, h));
      {
        auto gb = grads.subspan(bo.out_b, d);
        for (int64_t i = 0; i < d; ++i) gb[i] += dy[i];
      }
      for (int64_t i = 0; i < h; ++i) dgated[i] = T(0);
      detail::matvec_transposed_accum<T>(p.tensor(bo.out_w, d * h),
                                         std::span<const T>(dy.data(), d),
                                         std::span<T>(dgated.data(), h));

      // gated = (act*(1+scale) + shift) * gate_sig
      for (int64_t i = 0; i < h; ++i) {
        const T modded = act[i] * (T(1) + scale[i]) + mods[h + i];
        const T dmodded = dgated[i] * gate_sig[i];
        const T dgate = dgated[i] * modded * gate_sig[i] * (T(1) - gate_sig[i]);
        dmods[i] = dmodded * act[i];          // dscale
        dmods[h + i] = dmodded;               // dshift
        dmods[2 * h + i] = dgate;             // dgate (pre-sigmoid)
        // dact via silu': s + p*s*(1-s)
        const T s = detail::sigmoid(pre[i]);
        const T dact = dmodded * (T(1) + scale[i]);
        dpre[i] = dact * (s + pre[i] * s * (T(1) - s));
      }

      // mods = mod_w * cond + mod_b
      detail::outer_accum<T>(grads.subspan(bo.mod_w, 3 * h * e),
                             std::span<const T>(dmods.data(), 3 * h),
                             std::span<const T>(tape.cond_embed.data(), e));
      {
        auto gb = grads.subspan(bo.mod_b, 3 * h);
        for (int64_t i = 0; i < 3 * h; ++i) gb[i] += dmods[i];
      }
      detail::matvec_transposed_accum<T>(p.tensor(bo.mod_w, 3 * h * e),
                                         std::span<const T>(dmods.data(), 3 * h),
                                         std::span<T>(dcond.data(), e));

      // pre = in_w * u + in_b
      detail::outer_accum<T>(grads.subspan(bo.in_w, h * d), std::span<const T>(dpre.data(), h),
                             std::span<const T>(u_in, d));
      {
        auto gb = grads.subspan(bo.in_b, h);
        for (int64_t i = 0; i < h; ++i) gb[i] += dpre[i];
      }
      detail::matvec_transposed_accum<T>(p.tensor(bo.in_w, h * d),
                                         std::span<const T>(dpre.data(), h),
                                         std::span<T>(du.data(), d));
    }
    // g_i = chain(u_0) - u_0 and r_i = r_{i-1} + delta * g_i
    for (int64_t i = 0; i < d; ++i) a_r[i] += du[i] - a_g[i];
  }

  // cond = time_w * sin_feats + time_b + rows
  detail::outer_accum<T>(grads.subspan(p.layout.time_w(), e * e),
                         std::span<const T>(dcond.data(), e),
                         std::span<const T>(tape.sin_feats.data(), e));
  {
    auto gb = grads.subspan(p.layout.time_b(), e);
    for (int64_t i = 0; i < e; ++i) gb[i] += dcond[i];
  }
  {
    const int64_t row = p.layout.len_table() + cfg.length_index(tape.cond.length) * e;
    auto gb = grads.subspan(row, e);
    for (int64_t i = 0; i < e; ++i) gb[i] += dcond[i];
  }
  if (tape.cond.d_index >= 0) {
    auto gb = grads.subspan(p.layout.d_table() + tape.cond.d_index * e, e);
    for (int64_t i = 0; i < e; ++i) gb[i] += dcond[i];
  }
  if (cfg.num_classes > 0) {
    const int row_idx = tape.cond.label < 0 ? cfg.num_classes : tape.cond.label;
    auto gb = grads.subspan(p.layout.class_table() + static_cast<int64_t>(row_idx) * e, e);
    for (int64_t i = 0; i < e; ++i) gb[i] += dcond[i];
  }
}

// Parameter and multiply-add counts touched by one forward at a given
// length; block cost is affine in the number of active blocks, the
// conditioning cost is constant.
struct CostBreakdown {
  int64_t block_params = 0;
  int64_t embed_params = 0;
  int64_t block_mult_adds = 0;
  int64_t embed_mult_adds = 0;

  int64_t total_params() const { return block_params + embed_params; }
  int64_t total_mult_adds() const { return block_mult_adds + embed_mult_adds; }
};

inline CostBreakdown count_active_cost(const NetConfig& cfg, int length) {
  cfg.validate();
  if (!cfg.length_admissible(length)) {
    throw ConfigError("length " + std::to_string(length) + " not admissible");
  }
  const int64_t d = cfg.data_dim, h = cfg.hidden_dim, e = cfg.embed_dim;
  CostBreakdown c;
  const int64_t per_block_params = h * d + h + 3 * h * e + 3 * h + d * h + d;
  const int64_t per_block_madds = h * d + 3 * h * e + d * h + 3 * h;
  c.block_params = static_cast<int64_t>(length) * per_block_params;
  c.block_mult_adds = static_cast<int64_t>(length) * per_block_madds;

  int64_t rows_touched = 1;  // length row
  if (cfg.use_d_embedding) rows_touched += 1;
  if (cfg.num_classes > 0) rows_touched += 1;
  c.embed_params = e * e + e + rows_touched * e;
  c.embed_mult_adds = e * e + rows_touched * e;
  return c;
}

}  // namespace nestedflow
