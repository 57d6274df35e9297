#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bissm/model.hpp"
#include "bissm/ssm.hpp"

namespace bissm {

// FLOP convention used throughout: 1 multiply-accumulate = 2 FLOPs; only
// matmul, convolution and scan terms are counted, matching the in-op MAC
// instrumentation. Elementwise and normalization work is excluded.
inline constexpr int kFlopsPerMac = 2;

struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;  // one forward pass at (batch, C, T)
  std::int64_t peak_activation_bytes = 0;
  std::map<std::string, std::int64_t> param_breakdown;
  std::map<std::string, std::int64_t> flop_breakdown;
};

namespace costs {

inline std::int64_t ssm_param_count(const SsmDims& s) {
  const std::int64_t di = s.d_inner, n = s.n, r = s.d_rank, d = s.d;
  return di * n          // a_log
         + di * r + r * di + di  // delta projection + bias
         + di * n + di * n       // w_b, w_c
         + di                    // d_skip
         + d * 2 * di            // w_in
         + di * s.conv_k         // conv
         + di * d;               // w_out
}

inline std::int64_t head_param_count(const ModelConfig& cfg, TaskScheme scheme) {
  const std::int64_t d = cfg.embed_dim, h = cfg.head_hidden, k = scheme_num_outputs(scheme);
  std::int64_t total = d * h + h + h * k + k;
  if (cfg.head == HeadKind::mamba_enhanced) total += ssm_param_count(cfg.ssm_dims());
  return total;
}

// MACs of one gated scan unit over L tokens.
inline std::int64_t mamba_macs(const SsmDims& s, std::int64_t len) {
  const std::int64_t di = s.d_inner, n = s.n, r = s.d_rank, d = s.d;
  return len * d * 2 * di      // input projection
         + len * di * s.conv_k // depthwise conv
         + len * di * r + len * r * di  // delta projection
         + len * di * n + len * di * n  // B and C projections
         + scan_macs(len, di, n)
         + len * di * d;       // output projection
}

// Live-value upper bound (elements) of one gated scan unit forward.
inline std::int64_t mamba_activation_elems(const SsmDims& s, std::int64_t len) {
  const std::int64_t di = s.d_inner, n = s.n, r = s.d_rank, d = s.d;
  return len * 2 * di        // joint projection
         + 2 * len * di      // split halves
         + 2 * len * di      // conv + silu
         + len * r + 2 * len * di  // delta stages
         + len * di          // softplus
         + 2 * len * n       // B, C
         + len * di          // scan output
         + 2 * len * di      // gate silu + product
         + len * d;          // out projection
}

}  // namespace costs

/// Closed-form learnable-tensor count; equals enumeration of an
/// instantiated model exactly.
inline CostReport count_params(const ModelConfig& cfg,
                               std::optional<TaskScheme> scheme = std::nullopt) {
  cfg.validate();
  CostReport rep;
  const std::int64_t d = cfg.embed_dim, pq = cfg.patch_len(), n_tok = cfg.num_tokens();
  const SsmDims dims = cfg.ssm_dims();

  rep.param_breakdown["tokenizer"] = d * pq + d + n_tok * d;
  rep.param_breakdown["encoder"] =
      cfg.num_blocks * (d + 2 * costs::ssm_param_count(dims)) + d;  // blocks + final norm
  rep.param_breakdown["decoder"] = 2 * (d * d * 3 + d) + d * pq + pq;
  if (scheme) rep.param_breakdown["head"] = costs::head_param_count(cfg, *scheme);
  for (const auto& [k, v] : rep.param_breakdown) rep.params += v;
  return rep;
}

/// Analytic forward FLOPs at (batch, C, T) for the reconstruction path
/// (tokenizer + encoder + decoder) or, with a scheme, the classification
/// path (tokenizer + encoder + head).
inline CostReport count_flops(const ModelConfig& cfg, Dim batch, Dim channels, Dim samples,
                              std::optional<TaskScheme> scheme = std::nullopt) {
  cfg.validate();
  CostReport rep = count_params(cfg, scheme);
  const std::int64_t d = cfg.embed_dim, pq = cfg.patch_len();
  const std::int64_t n_tok = cfg.num_tokens(channels, samples);
  const SsmDims dims = cfg.ssm_dims();

  const std::int64_t tokenizer = n_tok * d * pq;
  const std::int64_t encoder = cfg.num_blocks * 2 * costs::mamba_macs(dims, n_tok);
  rep.flop_breakdown["tokenizer"] = batch * tokenizer * kFlopsPerMac;
  rep.flop_breakdown["encoder"] = batch * encoder * kFlopsPerMac;
  if (scheme) {
    const std::int64_t rows = scheme_per_channel_row(*scheme) ? cfg.grid_c(channels) : 1;
    std::int64_t head = rows * d * cfg.head_hidden + rows * cfg.head_hidden * scheme_num_outputs(*scheme);
    if (cfg.head == HeadKind::mamba_enhanced) head += costs::mamba_macs(dims, n_tok);
    rep.flop_breakdown["head"] = batch * head * kFlopsPerMac;
  } else {
    const std::int64_t decoder = 2 * n_tok * d * d * 3 + n_tok * d * pq;
    rep.flop_breakdown["decoder"] = batch * decoder * kFlopsPerMac;
  }
  rep.flops = 0;
  for (const auto& [k, v] : rep.flop_breakdown) rep.flops += v;
  return rep;
}

/// Analytic peak-memory upper bound in bytes for an inference forward of
/// the reconstruction path: parameters plus every intermediate value tensor
/// of `batch` windows assumed live at once (f32). Always at or above the
/// measured allocator high-water mark of the same forward.
inline std::int64_t peak_memory(const ModelConfig& cfg, Dim batch, Dim channels, Dim samples) {
  cfg.validate();
  const std::int64_t d = cfg.embed_dim, pq = cfg.patch_len();
  const std::int64_t n_tok = cfg.num_tokens(channels, samples);
  const SsmDims dims = cfg.ssm_dims();

  std::int64_t act = 0;
  act += channels * samples;     // normalized input
  act += 2 * n_tok * d;          // patch projection + positional add
  act += n_tok * d;              // mask application
  const std::int64_t per_block = n_tok * d              // pre-norm
                                 + 2 * costs::mamba_activation_elems(dims, n_tok)
                                 + 2 * n_tok * d        // reversals (backward branch)
                                 + 2 * n_tok * d;       // residual adds
  act += cfg.num_blocks * per_block;
  act += n_tok * d;              // final norm
  act += 3 * n_tok * d + 2 * n_tok * pq;  // decoder convs, gelu, linear + bias

  const std::int64_t params = count_params(cfg).params;
  return static_cast<std::int64_t>(sizeof(float)) * (params + batch * act);
}

// ---------------------------------------------------------------------------
// Reference attention block
// ---------------------------------------------------------------------------

/// Single-layer multi-head self-attention + GELU MLP, parameter-matched to
/// one encoder block so length-scaling comparisons isolate the sequence
/// term. Inference only; feeds the same MAC counter as the tensor ops.
template <typename T>
class AttentionReference {
public:
  AttentionReference(Dim d, Dim heads, std::int64_t target_params, std::uint64_t seed)
      : d_(d), heads_(heads) {
    if (d % heads != 0) throw ValueError("attention reference: heads must divide d");
    // params = 4 d^2 + 4 d (qkv + out, biases) + mlp 2 d h + h + d.
    const std::int64_t fixed = 4 * d * d + 4 * d + d;
    mlp_hidden_ = std::max<std::int64_t>(1, (target_params - fixed) / (2 * d + 1));
    std::mt19937_64 rng(splitmix64(seed));
    auto init = [&](Dim rows, Dim cols) {
      const T bound = static_cast<T>(1.0 / std::sqrt(double(rows)));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<T> v(static_cast<std::size_t>(rows * cols));
      for (auto& x : v) x = static_cast<T>(u(rng));
      return v;
    };
    wq_ = init(d, d); wk_ = init(d, d); wv_ = init(d, d); wo_ = init(d, d);
    bq_.assign(static_cast<std::size_t>(d), T(0));
    bk_ = bq_; bv_ = bq_; bo_ = bq_;
    w1_ = init(d, mlp_hidden_);
    b1_.assign(static_cast<std::size_t>(mlp_hidden_), T(0));
    w2_ = init(mlp_hidden_, d);
    b2_.assign(static_cast<std::size_t>(d), T(0));
  }

  std::int64_t param_count() const {
    return 4 * d_ * d_ + 4 * d_ + d_ * mlp_hidden_ + mlp_hidden_ + mlp_hidden_ * d_ + d_;
  }

  static std::int64_t macs(Dim d, std::int64_t mlp_hidden, std::int64_t len) {
    return 4 * len * d * d            // qkv + out projections
           + 2 * len * len * d        // scores and weighted sum
           + 2 * len * d * mlp_hidden;  // MLP
  }
  std::int64_t macs(std::int64_t len) const { return macs(d_, mlp_hidden_, len); }
  Dim mlp_hidden() const { return static_cast<Dim>(mlp_hidden_); }

  /// y = x + MLP(x + MHSA(x)); scores are streamed in query blocks so the
  /// quadratic term shows up in time, not in resident memory.
  std::vector<T> forward(const std::vector<T>& x, Dim len) const {
    const Dim d = d_, dh = d / heads_;
    const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));
    count_macs(macs(len));

    auto project = [&](const std::vector<T>& w, const std::vector<T>& b) {
      std::vector<T> out(static_cast<std::size_t>(len * d));
      for (Dim i = 0; i < len; ++i) {
        const T* xr = x.data() + i * d;
        T* yr = out.data() + i * d;
        for (Dim j = 0; j < d; ++j) yr[j] = b[static_cast<std::size_t>(j)];
        for (Dim kk = 0; kk < d; ++kk) {
          const T xv = xr[kk];
          const T* wr = w.data() + kk * d;
          for (Dim j = 0; j < d; ++j) yr[j] += xv * wr[j];
        }
      }
      return out;
    };
    const auto q = project(wq_, bq_);
    const auto k = project(wk_, bk_);
    const auto v = project(wv_, bv_);

    std::vector<T> ctx(static_cast<std::size_t>(len * d), T(0));
    const Dim qblock = 128;
    std::vector<T> scores(static_cast<std::size_t>(qblock * len));
    for (Dim h = 0; h < heads_; ++h) {
      const Dim off = h * dh;
      for (Dim q0 = 0; q0 < len; q0 += qblock) {
        const Dim qn = std::min(qblock, len - q0);
        for (Dim i = 0; i < qn; ++i) {
          const T* qr = q.data() + (q0 + i) * d + off;
          T* sr = scores.data() + i * len;
          for (Dim j = 0; j < len; ++j) {
            const T* kr = k.data() + j * d + off;
            T acc = 0;
            for (Dim e = 0; e < dh; ++e) acc += qr[e] * kr[e];
            sr[j] = acc * scale;
          }
          T m = sr[0];
          for (Dim j = 1; j < len; ++j) m = std::max(m, sr[j]);
          T denom = 0;
          for (Dim j = 0; j < len; ++j) {
            sr[j] = std::exp(sr[j] - m);
            denom += sr[j];
          }
          const T inv = T(1) / denom;
          T* cr = ctx.data() + (q0 + i) * d + off;
          for (Dim j = 0; j < len; ++j) {
            const T wj = sr[j] * inv;
            const T* vr = v.data() + j * d + off;
            for (Dim e = 0; e < dh; ++e) cr[e] += wj * vr[e];
          }
        }
      }
    }

    // Output projection + residual.
    std::vector<T> attn(static_cast<std::size_t>(len * d));
    for (Dim i = 0; i < len; ++i) {
      const T* cr = ctx.data() + i * d;
      T* ar = attn.data() + i * d;
      for (Dim j = 0; j < d; ++j) ar[j] = bo_[static_cast<std::size_t>(j)] + x[static_cast<std::size_t>(i * d + j)];
      for (Dim kk = 0; kk < d; ++kk) {
        const T cv = cr[kk];
        const T* wr = wo_.data() + kk * d;
        for (Dim j = 0; j < d; ++j) ar[j] += cv * wr[j];
      }
    }

    // MLP with GELU, residual.
    std::vector<T> out(attn);
    std::vector<T> hbuf(static_cast<std::size_t>(mlp_hidden_));
    for (Dim i = 0; i < len; ++i) {
      const T* ar = attn.data() + i * d;
      for (Dim j = 0; j < mlp_hidden_; ++j) hbuf[static_cast<std::size_t>(j)] = b1_[static_cast<std::size_t>(j)];
      for (Dim kk = 0; kk < d; ++kk) {
        const T av = ar[kk];
        const T* wr = w1_.data() + kk * mlp_hidden_;
        for (Dim j = 0; j < mlp_hidden_; ++j) hbuf[static_cast<std::size_t>(j)] += av * wr[j];
      }
      for (Dim j = 0; j < mlp_hidden_; ++j) {
        const T z = hbuf[static_cast<std::size_t>(j)];
        hbuf[static_cast<std::size_t>(j)] =
            static_cast<T>(0.5 * double(z) * (1.0 + std::erf(double(z) * 0.7071067811865475)));
      }
      T* orow = out.data() + i * d;
      for (Dim j = 0; j < d; ++j) orow[j] += b2_[static_cast<std::size_t>(j)];
      for (Dim kk = 0; kk < mlp_hidden_; ++kk) {
        const T hv = hbuf[static_cast<std::size_t>(kk)];
        const T* wr = w2_.data() + kk * d;
        for (Dim j = 0; j < d; ++j) orow[j] += hv * wr[j];
      }
    }
    return out;
  }

  /// Peak-memory model for the naive (materialized) score matrix.
  static std::int64_t peak_bytes(Dim d, Dim heads, std::int64_t mlp_hidden, std::int64_t len) {
    const std::int64_t act = 4 * len * d      // q, k, v, ctx
                             + len * len      // one head's score matrix
                             + 2 * len * d    // attn out + residual
                             + len * mlp_hidden + len * d;
    (void)heads;
    return static_cast<std::int64_t>(sizeof(float)) * act;
  }

private:
  Dim d_, heads_;
  std::int64_t mlp_hidden_;
  std::vector<T> wq_, wk_, wv_, wo_, bq_, bk_, bv_, bo_, w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string variant;
  std::int64_t length = 0;
  Dim batch = 1;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t bytes = 0;
  double wallclock_ms = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> encoder_rows;
  std::vector<BenchRow> attention_rows;
  double encoder_slope = 0.0;
  double attention_slope = 0.0;
};

/// Least-squares slope of ln(wallclock) against ln(L).
inline double fit_loglog_slope(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw ValueError("fit_loglog_slope: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.length));
    const double y = std::log(r.wallclock_ms);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace detail {

template <typename Fn>
double median_wallclock_ms(Fn&& fn, int reps) {
  // Median of reps; reruns with doubled repetitions while the spread
  // exceeds 20% of the median.
  for (int attempt = 0; attempt < 4; ++attempt) {
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(reps));
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    const double spread = times.back() - times.front();
    if (median > 0 && spread / median <= 0.20) return median;
    reps *= 2;
  }
  // Accept the last measurement set if it never settled.
  std::vector<double> times;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace detail

/// Real timed forwards of the encoder stack and the attention reference over
/// ascending token lengths, with analytic FLOPs/bytes per point.
inline BenchResult bench_scaling(const std::vector<std::int64_t>& lengths, const ModelConfig& cfg,
                                 int reps = 3, std::uint64_t seed = 7) {
  if (lengths.empty()) throw ValueError("bench_scaling: no lengths");
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw ValueError("bench_scaling: lengths must ascend");

  const SsmDims dims = cfg.ssm_dims();
  std::mt19937_64 rng(splitmix64(seed));
  std::vector<BiMambaBlock<float>> blocks;
  for (Dim i = 0; i < cfg.num_blocks; ++i) blocks.push_back(BiMambaBlock<float>::init(dims, rng));

  const std::int64_t block_params = cfg.embed_dim + 2 * costs::ssm_param_count(dims);
  Dim heads = 1;
  for (Dim h : {8, 7, 5, 4, 2})
    if (cfg.embed_dim % h == 0) {
      heads = h;
      break;
    }
  AttentionReference<float> attn(cfg.embed_dim, heads, block_params, seed + 1);

  const std::int64_t encoder_params = cfg.num_blocks * block_params;
  BenchResult out;
  NoGradGuard ng;

  for (const std::int64_t len : lengths) {
    auto x = Tensor<float>::randn({len, cfg.embed_dim}, rng, 1.0f);
    BenchRow row;
    row.variant = to_string(cfg.variant) + "-encoder";
    row.length = len;
    row.params = encoder_params;
    row.flops = cfg.num_blocks * 2 * costs::mamba_macs(dims, len) * kFlopsPerMac;
    row.bytes = static_cast<std::int64_t>(sizeof(float)) *
                (encoder_params + cfg.num_blocks * (2 * costs::mamba_activation_elems(dims, len) +
                                                    5 * len * cfg.embed_dim));
    row.wallclock_ms = detail::median_wallclock_ms(
        [&] {
          Tensor<float> h = x;
          for (const auto& b : blocks) h = bimamba_block(h, b);
        },
        reps);
    out.encoder_rows.push_back(row);

    std::vector<float> xa(x.values().begin(), x.values().end());
    BenchRow arow;
    arow.variant = "attention-reference";
    arow.length = len;
    arow.params = attn.param_count();
    arow.flops = attn.macs(len) * kFlopsPerMac;
    arow.bytes = AttentionReference<float>::peak_bytes(cfg.embed_dim, heads, attn.mlp_hidden(), len);
    arow.wallclock_ms = detail::median_wallclock_ms([&] { attn.forward(xa, len); }, reps);
    out.attention_rows.push_back(arow);
  }

  out.encoder_slope = fit_loglog_slope(out.encoder_rows);
  out.attention_slope = fit_loglog_slope(out.attention_rows);
  return out;
}

/// Measured allocator high-water mark of a batch-`batch` inference forward
/// through the reconstruction path.
inline std::int64_t measured_forward_peak_bytes(const ModelConfig& cfg, Dim batch,
                                                std::uint64_t seed = 3) {
  Model<float> model = Model<float>::init(cfg, seed);
  std::mt19937_64 rng(splitmix64(seed + 1));
  std::vector<Tensor<float>> inputs;
  for (Dim b = 0; b < batch; ++b)
    inputs.push_back(Tensor<float>::randn({cfg.input_channels, cfg.input_samples}, rng, 1.0f));

  NoGradGuard ng;
  reset_memory_peak();
  const std::int64_t base = memory_live_bytes();
  std::vector<Tensor<float>> outputs;  // keep per-window results live
  for (auto& x : inputs) {
    auto grid = model.tokenize(x);
    outputs.push_back(model.decode(model.encode(grid.tokens)));
  }
  const std::int64_t peak = memory_peak_bytes();
  // Inputs predate the reset; charge them in, subtract unrelated baseline.
  return peak - base + static_cast<std::int64_t>(sizeof(float)) * batch * cfg.input_channels *
                           cfg.input_samples +
         model.parameter_count() * static_cast<std::int64_t>(sizeof(float));
}

}  // namespace bissm
