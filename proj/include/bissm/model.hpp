#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bissm/ssm.hpp"
#include "bissm/util.hpp"

namespace bissm {

enum class Variant { tiny, base, large, huge, custom };
enum class HeadKind { linear, mamba_enhanced };

/// Downstream labeling schemes. bc/mcc/abnormal/slowing4 are single-label
/// per window; mc/mmc produce one output row per channel row.
enum class TaskScheme { bc, mc, mmc, mcc, abnormal, slowing4 };

inline constexpr int kArtifactTypes = 13;
inline constexpr int kMccTypes = 5;

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::tiny: return "tiny";
    case Variant::base: return "base";
    case Variant::large: return "large";
    case Variant::huge: return "huge";
    case Variant::custom: return "custom";
  }
  return "?";
}

inline std::string to_string(TaskScheme s) {
  switch (s) {
    case TaskScheme::bc: return "bc";
    case TaskScheme::mc: return "mc";
    case TaskScheme::mmc: return "mmc";
    case TaskScheme::mcc: return "mcc";
    case TaskScheme::abnormal: return "abnormal";
    case TaskScheme::slowing4: return "slowing4";
  }
  return "?";
}

inline std::string to_string(HeadKind h) {
  return h == HeadKind::linear ? "linear" : "mamba_enhanced";
}

inline TaskScheme scheme_from_string(const std::string& s) {
  if (s == "bc") return TaskScheme::bc;
  if (s == "mc") return TaskScheme::mc;
  if (s == "mmc") return TaskScheme::mmc;
  if (s == "mcc") return TaskScheme::mcc;
  if (s == "abnormal") return TaskScheme::abnormal;
  if (s == "slowing4") return TaskScheme::slowing4;
  throw ValueError("unknown task scheme: " + s);
}

/// True when the head emits one score row per channel row.
inline bool scheme_per_channel_row(TaskScheme s) {
  return s == TaskScheme::mc || s == TaskScheme::mmc;
}

/// Score columns per output row. mmc trains 13 sigmoid outputs per row; the
/// "none" class is the all-zero target.
inline int scheme_num_outputs(TaskScheme s) {
  switch (s) {
    case TaskScheme::bc:
    case TaskScheme::abnormal: return 2;
    case TaskScheme::mc:
    case TaskScheme::mmc: return kArtifactTypes;
    case TaskScheme::mcc: return kMccTypes;
    case TaskScheme::slowing4: return 4;
  }
  throw ValueError("scheme_num_outputs: unknown scheme");
}

inline bool scheme_single_label(TaskScheme s) { return !scheme_per_channel_row(s); }

struct ModelConfig {
  Variant variant = Variant::tiny;
  Dim num_blocks = 2;
  Dim embed_dim = 35;
  Dim state_size = 80;
  Dim patch_c = 4;
  Dim patch_t = 32;
  double mask_ratio = 0.6;
  Dim expansion = 2;
  HeadKind head = HeadKind::linear;
  Dim head_hidden = 256;
  Dim input_channels = 20;
  Dim input_samples = 1600;

  static ModelConfig preset(Variant v) {
    ModelConfig c;
    c.variant = v;
    switch (v) {
      case Variant::tiny: c.num_blocks = 2; c.embed_dim = 35; break;
      case Variant::base: c.num_blocks = 12; c.embed_dim = 35; break;
      case Variant::large: c.num_blocks = 4; c.embed_dim = 79; break;
      case Variant::huge: c.num_blocks = 20; c.embed_dim = 79; break;
      case Variant::custom: break;
    }
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "tiny") return preset(Variant::tiny);
    if (name == "base") return preset(Variant::base);
    if (name == "large") return preset(Variant::large);
    if (name == "huge") return preset(Variant::huge);
    if (name == "custom") return preset(Variant::custom);
    throw ValueError("unknown variant: " + name);
  }

  void validate() const {
    if (num_blocks < 1) throw ValueError("config: num_blocks must be >= 1");
    if (embed_dim < 1 || state_size < 1) throw ValueError("config: embed_dim/state_size must be >= 1");
    if (patch_c < 1 || patch_t < 1) throw ValueError("config: patch dims must be >= 1");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ValueError("config: mask_ratio must be in [0, 1)");
    if (expansion < 1) throw ValueError("config: expansion must be >= 1");
    if (input_channels < 1 || input_samples < 1) throw ValueError("config: input geometry must be positive");
  }

  SsmDims ssm_dims() const { return SsmDims::make(embed_dim, state_size, expansion); }
  Dim grid_c(Dim channels) const { return (channels + patch_c - 1) / patch_c; }
  Dim grid_t(Dim samples) const { return (samples + patch_t - 1) / patch_t; }
  Dim num_tokens(Dim channels, Dim samples) const { return grid_c(channels) * grid_t(samples); }
  Dim num_tokens() const { return num_tokens(input_channels, input_samples); }
  Dim patch_len() const { return patch_c * patch_t; }
};

/// Embedded (N x d) tokens in time-major order: token = t' * C' + c'.
template <typename T>
struct TokenGrid {
  Tensor<T> tokens;
  Dim rows_c = 0;
  Dim cols_t = 0;
};

struct MaskSet {
  std::vector<Dim> indices;  // sorted, unique
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

/// floor(N * ratio) unique positions, uniform without replacement,
/// deterministic per seed.
inline MaskSet sample_mask(Dim n, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0) throw ValueError("sample_mask: ratio must be in [0, 1)");
  if (n < 0) throw ValueError("sample_mask: negative token count");
  MaskSet m;
  m.ratio = ratio;
  m.seed = seed;
  const Dim k = static_cast<Dim>(std::floor(static_cast<double>(n) * ratio));
  if (k == 0) return m;
  std::vector<Dim> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Dim(0));
  std::mt19937_64 rng(seed);
  for (Dim i = 0; i < k; ++i) {
    std::uniform_int_distribution<Dim> pick(i, n - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  m.indices.assign(perm.begin(), perm.begin() + k);
  std::sort(m.indices.begin(), m.indices.end());
  return m;
}

// ---------------------------------------------------------------------------
// Patch layout helpers (pure index math, no gradients)
// ---------------------------------------------------------------------------

/// (C x T) -> (N x p*q) rows in time-major token order, zero-padding partial
/// edge patches.
template <typename T>
std::vector<T> signal_to_patches(std::span<const T> x, Dim c, Dim t, Dim p, Dim q) {
  const Dim gc = (c + p - 1) / p, gt = (t + q - 1) / q;
  std::vector<T> out(static_cast<std::size_t>(gc * gt * p * q), T(0));
  for (Dim tp = 0; tp < gt; ++tp)
    for (Dim cp = 0; cp < gc; ++cp) {
      T* dst = out.data() + (tp * gc + cp) * p * q;
      for (Dim i = 0; i < p; ++i)
        for (Dim j = 0; j < q; ++j) {
          const Dim row = cp * p + i, col = tp * q + j;
          if (row < c && col < t) dst[i * q + j] = x[static_cast<std::size_t>(row * t + col)];
        }
    }
  return out;
}

/// Inverse of signal_to_patches; padded cells are dropped.
template <typename T>
std::vector<T> patches_to_signal(std::span<const T> patches, Dim c, Dim t, Dim p, Dim q) {
  const Dim gc = (c + p - 1) / p, gt = (t + q - 1) / q;
  std::vector<T> out(static_cast<std::size_t>(c * t), T(0));
  for (Dim tp = 0; tp < gt; ++tp)
    for (Dim cp = 0; cp < gc; ++cp) {
      const T* src = patches.data() + (tp * gc + cp) * p * q;
      for (Dim i = 0; i < p; ++i)
        for (Dim j = 0; j < q; ++j) {
          const Dim row = cp * p + i, col = tp * q + j;
          if (row < c && col < t) out[static_cast<std::size_t>(row * t + col)] = src[i * q + j];
        }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct ClassifierHead {
  HeadKind kind = HeadKind::linear;
  int num_outputs = 0;
  bool per_channel_row = false;
  Tensor<T> fc1_w, fc1_b;  // (d x hidden), (hidden)
  Tensor<T> fc2_w, fc2_b;  // (hidden x K), (K)
  std::optional<SsmParams<T>> mamba;  // extra forward-only unit

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    if (mamba) mamba->for_each_param(prefix + ".mamba", fn);
    fn(prefix + ".fc1_w", fc1_w);
    fn(prefix + ".fc1_b", fc1_b);
    fn(prefix + ".fc2_w", fc2_w);
    fn(prefix + ".fc2_b", fc2_b);
  }
};

/// Masked-reconstruction sequence model over patched multichannel windows:
/// patch tokenizer with learned positions, a stack of bidirectional
/// selective-scan blocks, a small convolutional reconstruction decoder and
/// an optional classification head.
template <typename T>
class Model {
public:
  ModelConfig cfg;
  Tensor<T> patch_w;   // (d x p*q)
  Tensor<T> patch_b;   // (d)
  Tensor<T> pos_embed; // (N x d)
  std::vector<BiMambaBlock<T>> blocks;
  Tensor<T> final_norm_w;  // (d)
  Tensor<T> dec_c1_w, dec_c1_b;  // (d x d x 3), (d)
  Tensor<T> dec_c2_w, dec_c2_b;
  Tensor<T> dec_lin_w, dec_lin_b;  // (d x p*q), (p*q)
  std::optional<ClassifierHead<T>> head;

  static Model init(const ModelConfig& cfg, std::uint64_t seed,
                    std::optional<TaskScheme> scheme = std::nullopt) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    std::mt19937_64 rng(splitmix64(seed));
    const Dim d = cfg.embed_dim, pq = cfg.patch_len(), n_tok = cfg.num_tokens();

    auto fan_in_uniform = [&rng](Shape shape, Dim fan_in) {
      const T bound = static_cast<T>(1.0 / std::sqrt(double(fan_in)));
      return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
    };

    m.patch_w = fan_in_uniform({d, pq}, pq);
    m.patch_b = Tensor<T>::zeros({d});
    m.pos_embed = Tensor<T>::randn({n_tok, d}, rng, T(0.02));

    const SsmDims dims = cfg.ssm_dims();
    m.blocks.reserve(static_cast<std::size_t>(cfg.num_blocks));
    for (Dim i = 0; i < cfg.num_blocks; ++i) m.blocks.push_back(BiMambaBlock<T>::init(dims, rng));
    m.final_norm_w = Tensor<T>::full({d}, T(1));

    m.dec_c1_w = fan_in_uniform({d, d, 3}, d * 3);
    m.dec_c1_b = Tensor<T>::zeros({d});
    m.dec_c2_w = fan_in_uniform({d, d, 3}, d * 3);
    m.dec_c2_b = Tensor<T>::zeros({d});
    m.dec_lin_w = fan_in_uniform({d, pq}, d);
    m.dec_lin_b = Tensor<T>::zeros({pq});

    for (Tensor<T>* t : {&m.patch_w, &m.patch_b, &m.pos_embed, &m.final_norm_w, &m.dec_c1_w,
                         &m.dec_c1_b, &m.dec_c2_w, &m.dec_c2_b, &m.dec_lin_w, &m.dec_lin_b})
      t->set_requires_grad(true);

    if (scheme) m.attach_head(*scheme, rng);
    return m;
  }

  void attach_head(TaskScheme scheme, std::mt19937_64& rng) {
    ClassifierHead<T> h;
    h.kind = cfg.head;
    h.num_outputs = scheme_num_outputs(scheme);
    h.per_channel_row = scheme_per_channel_row(scheme);
    const Dim d = cfg.embed_dim, hid = cfg.head_hidden, k = h.num_outputs;
    auto fan_in_uniform = [&rng](Shape shape, Dim fan_in) {
      const T bound = static_cast<T>(1.0 / std::sqrt(double(fan_in)));
      return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
    };
    if (cfg.head == HeadKind::mamba_enhanced) h.mamba = SsmParams<T>::init(cfg.ssm_dims(), rng);
    h.fc1_w = fan_in_uniform({d, hid}, d);
    h.fc1_b = Tensor<T>::zeros({hid});
    h.fc2_w = fan_in_uniform({hid, k}, hid);
    h.fc2_b = Tensor<T>::zeros({k});
    for (Tensor<T>* t : {&h.fc1_w, &h.fc1_b, &h.fc2_w, &h.fc2_b}) t->set_requires_grad(true);
    head = std::move(h);
  }

  /// Patch-project a normalized (C x T) window and add learned positions.
  TokenGrid<T> tokenize(const Tensor<T>& x_norm) const {
    if (x_norm.rank() != 2) throw ShapeError("tokenize: rank-2 (C x T) input required");
    const Dim c = x_norm.dim(0), t = x_norm.dim(1);
    if (c < 1 || t < 1) throw ShapeError("tokenize: empty window");
    TokenGrid<T> grid;
    grid.rows_c = cfg.grid_c(c);
    grid.cols_t = cfg.grid_t(t);
    auto tokens = conv2d_patchify(x_norm, patch_w, patch_b, cfg.patch_c, cfg.patch_t);
    if (tokens.dim(0) != pos_embed.dim(0))
      throw ShapeError("tokenize: window yields " + std::to_string(tokens.dim(0)) +
                       " tokens but positional table holds " + std::to_string(pos_embed.dim(0)) +
                       "; window geometry must match the model config");
    grid.tokens = add(tokens, pos_embed);
    return grid;
  }

  /// Zero the selected embedded tokens (positions included in the zeroing).
  Tensor<T> apply_mask(const TokenGrid<T>& grid, const MaskSet& mask) const {
    for (Dim idx : mask.indices)
      if (idx < 0 || idx >= grid.tokens.dim(0)) throw ValueError("apply_mask: mask index out of range");
    return zero_rows(grid.tokens, mask.indices);
  }

  Tensor<T> encode(const Tensor<T>& tokens) const {
    Tensor<T> h = tokens;
    for (const auto& b : blocks) h = bimamba_block(h, b);
    return rms_norm(h, final_norm_w);
  }

  /// Token-axis conv decoder: conv3 -> GELU -> conv3 -> linear(d -> p*q).
  Tensor<T> decode(const Tensor<T>& encoded) const {
    auto h = conv1d_same(encoded, dec_c1_w, dec_c1_b, Dim(3));
    h = gelu(h);
    h = conv1d_same(h, dec_c2_w, dec_c2_b, Dim(3));
    return add(matmul(h, dec_lin_w), dec_lin_b);
  }

  /// Class scores: global mean pooling for single-label schemes, per
  /// channel-row pooling for mc/mmc; two FC layers with GELU between.
  Tensor<T> classify(const Tensor<T>& encoded, Dim rows_c) const {
    if (!head) throw ValueError("classify: model has no classification head");
    Tensor<T> tokens = encoded;
    if (head->mamba) tokens = mamba_block(tokens, *head->mamba);
    Tensor<T> pooled =
        head->per_channel_row ? channel_row_mean(tokens, rows_c) : mean_rows(tokens);
    auto h1 = gelu(add(matmul(pooled, head->fc1_w), head->fc1_b));
    return add(matmul(h1, head->fc2_w), head->fc2_b);
  }

  /// Stable name -> tensor walk over every learnable tensor.
  void for_each_param(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("tokenizer.patch_w", patch_w);
    fn("tokenizer.patch_b", patch_b);
    fn("tokenizer.pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each_param("blocks." + std::to_string(i), fn);
    fn("final_norm", final_norm_w);
    fn("decoder.c1_w", dec_c1_w);
    fn("decoder.c1_b", dec_c1_b);
    fn("decoder.c2_w", dec_c2_w);
    fn("decoder.c2_b", dec_c2_b);
    fn("decoder.lin_w", dec_lin_w);
    fn("decoder.lin_b", dec_lin_b);
    if (head) head->for_each_param("head", fn);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each_param([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }
};

}  // namespace bissm
