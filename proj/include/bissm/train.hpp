#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "bissm/checkpoint.hpp"
#include "bissm/data.hpp"
#include "bissm/model.hpp"
#include "bissm/optim.hpp"

namespace bissm {

struct TrainConfig {
  double base_lr = 1e-4;
  std::int64_t total_steps = 1000;
  Dim batch_size = 8;
  double smooth_l1_beta = 1.0;
  double layer_decay = 0.75;
  int early_stop_patience = 5;
  double weight_decay = 0.0;
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  std::int64_t val_every = 0;  // 0: validate 20 times over the run

  void validate() const {
    if (base_lr <= 0) throw ValueError("train config: base_lr must be positive");
    if (layer_decay <= 0 || layer_decay > 1) throw ValueError("train config: layer_decay in (0, 1]");
    if (early_stop_patience < 1) throw ValueError("train config: patience must be >= 1");
    if (batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
    if (smooth_l1_beta <= 0) throw ValueError("train config: smooth_l1_beta must be positive");
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean smooth-L1 over the masked token rows only; predictions at unmasked
/// positions cannot influence the value.
template <typename T>
Tensor<T> masked_loss(const Tensor<T>& pred_patches, const Tensor<T>& target_patches,
                      const MaskSet& mask, T beta = T(1)) {
  if (mask.indices.empty()) throw ValueError("masked_loss: empty mask, mean undefined");
  detail::require_same_shape(pred_patches, target_patches, "masked_loss");
  auto pred_m = gather_rows(pred_patches, mask.indices);
  auto target_m = gather_rows(target_patches, mask.indices);
  return mean(smooth_l1(pred_m, target_m, beta));
}

// ---------------------------------------------------------------------------
// Layer-wise learning rates
// ---------------------------------------------------------------------------

struct LayerwiseLrs {
  std::vector<double> block_lrs;  // index 0 = earliest block
  double head_lr = 0.0;           // also used by the decoder
  double tokenizer_lr = 0.0;      // deepest discount
};

/// Geometric ladder over depth: block k gets base * decay^(L - k), the head
/// and decoder run at base, the tokenizer at base * decay^(L + 1).
inline LayerwiseLrs layerwise_lrs(Dim num_blocks, double base_lr, double decay = 0.75) {
  if (num_blocks < 1) throw ValueError("layerwise_lrs: need at least one block");
  LayerwiseLrs out;
  out.head_lr = base_lr;
  out.block_lrs.assign(static_cast<std::size_t>(num_blocks), 0.0);
  double lr = base_lr;
  // Built by repeated multiplication so consecutive entries differ by exactly
  // one factor of decay.
  for (Dim k = num_blocks - 1; k >= 0; --k) {
    lr *= decay;
    out.block_lrs[static_cast<std::size_t>(k)] = lr;
  }
  out.tokenizer_lr = out.block_lrs[0] * decay;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricReport {
  double loss = 0.0;
  std::optional<double> auroc;
  std::optional<double> aupr;
  double balanced_accuracy = 0.0;
  std::vector<double> per_class_recall;
};

/// P(score_pos > score_neg) with ties worth 0.5, via average ranks.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: size mismatch");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Area under precision-recall via step interpolation at distinct scores.
inline std::optional<double> aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("aupr: size mismatch");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  if (pos == 0 || pos == n) return std::nullopt;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double area = 0.0, recall_prev = 0.0;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) ++tp;
      else ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return area;
}

/// Mean per-class recall at the argmax decision, over classes with support.
inline double balanced_accuracy(const std::vector<int>& predicted, const std::vector<int>& labels,
                                int num_classes) {
  if (predicted.size() != labels.size()) throw ShapeError("balanced_accuracy: size mismatch");
  std::vector<std::int64_t> hit(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> total(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int lab = labels[i];
    if (lab < 0 || lab >= num_classes) throw ValueError("balanced_accuracy: label out of range");
    total[static_cast<std::size_t>(lab)] += 1;
    if (predicted[i] == lab) hit[static_cast<std::size_t>(lab)] += 1;
  }
  double acc = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0) continue;
    acc += static_cast<double>(hit[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
    ++present;
  }
  return present == 0 ? 0.0 : acc / present;
}

inline std::vector<double> per_class_recall(const std::vector<int>& predicted,
                                            const std::vector<int>& labels, int num_classes) {
  std::vector<std::int64_t> hit(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> total(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total[static_cast<std::size_t>(labels[i])] += 1;
    if (predicted[i] == labels[i]) hit[static_cast<std::size_t>(labels[i])] += 1;
  }
  std::vector<double> out(static_cast<std::size_t>(num_classes), 0.0);
  for (int c = 0; c < num_classes; ++c)
    if (total[static_cast<std::size_t>(c)] > 0)
      out[static_cast<std::size_t>(c)] = static_cast<double>(hit[static_cast<std::size_t>(c)]) /
                                         static_cast<double>(total[static_cast<std::size_t>(c)]);
  return out;
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Stops once the validation loss has failed to improve for `patience`
/// consecutive observations.
class EarlyStopper {
public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ValueError("EarlyStopper: patience must be >= 1");
  }

  /// Returns true when training should stop after this observation.
  bool observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      bad_ = 0;
      return false;
    }
    bad_ += 1;
    return bad_ >= patience_;
  }

  double best() const { return best_; }

private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct LogEntry {
  std::int64_t step = 0;
  std::string split;
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string log_line(const LogEntry& e) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%lld,%s,%.9g,%.9g", static_cast<long long>(e.step),
                e.split.c_str(), e.loss, e.lr);
  return buf;
}

namespace detail {

template <typename T>
std::vector<std::vector<T>> snapshot_params(Model<T>& m) {
  std::vector<std::vector<T>> out;
  m.for_each_param([&](const std::string&, Tensor<T>& t) {
    out.emplace_back(t.values().begin(), t.values().end());
  });
  return out;
}

template <typename T>
void restore_params(Model<T>& m, const std::vector<std::vector<T>>& snap) {
  std::size_t i = 0;
  m.for_each_param([&](const std::string&, Tensor<T>& t) {
    auto dst = t.values_mut();
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    ++i;
  });
}

template <typename T>
Tensor<T> window_input(const EegWindow& w) {
  std::vector<T> vals(w.data.begin(), w.data.end());
  auto norm = quartile_normalize<T>(vals, w.channels, w.samples);
  return Tensor<T>::from_vector({w.channels, w.samples}, std::move(norm));
}

// Reconstruction loss of one window under a given mask seed.
template <typename T>
Tensor<T> window_recon_loss(Model<T>& model, const EegWindow& w, std::uint64_t mask_seed, T beta) {
  auto x_norm = window_input<T>(w);
  auto grid = model.tokenize(x_norm);
  const auto mask = sample_mask(grid.tokens.dim(0), model.cfg.mask_ratio, mask_seed);
  auto masked = model.apply_mask(grid, mask);
  auto pred = model.decode(model.encode(masked));
  auto target = Tensor<T>::from_vector(
      pred.shape(), signal_to_patches<T>(x_norm.values(), w.channels, w.samples, model.cfg.patch_c,
                                         model.cfg.patch_t));
  return masked_loss(pred, target, mask, beta);
}

}  // namespace detail

struct PretrainResult {
  std::vector<LogEntry> log;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::int64_t best_step = -1;
  double final_train_loss = 0.0;
};

/// Masked-reconstruction pre-training. Per step: normalize, tokenize, mask,
/// encode, decode, smooth-L1 over masked patches, Adam with cosine decay.
/// Fully deterministic per config seed; saves the best-validation checkpoint
/// when a path is given.
template <typename T>
PretrainResult pretrain(const std::vector<EegWindow>& train_windows,
                        const std::vector<EegWindow>& val_windows, Model<T>& model,
                        const TrainConfig& tc, const std::string& checkpoint_path = "",
                        std::ostream* log_stream = nullptr) {
  tc.validate();
  if (train_windows.empty()) throw ValueError("pretrain: empty training set");
  if (model.cfg.mask_ratio <= 0.0)
    throw ValueError("pretrain: mask_ratio 0 leaves no masked patches to reconstruct");

  Adam<T> opt({/*beta1=*/0.9, /*beta2=*/0.999, /*eps=*/1e-8, tc.weight_decay, tc.grad_clip});
  {
    std::vector<Tensor<T>> params;
    model.for_each_param([&](const std::string&, Tensor<T>& t) { params.push_back(t); });
    opt.add_group(std::move(params), 1.0);
  }

  PretrainResult res;
  const std::int64_t val_every =
      tc.val_every > 0 ? tc.val_every : std::max<std::int64_t>(1, tc.total_steps / 20);
  const T beta = static_cast<T>(tc.smooth_l1_beta);

  std::vector<Dim> order(train_windows.size());
  std::iota(order.begin(), order.end(), Dim(0));
  std::size_t cursor = 0;
  std::int64_t epoch = 0;
  std::mt19937_64 shuffle_rng(seed_combine(tc.seed, 0x0d3e));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  auto emit = [&](const LogEntry& e) {
    res.log.push_back(e);
    if (log_stream) (*log_stream) << log_line(e) << '\n';
  };

  auto validate_now = [&](std::int64_t step, double lr) {
    if (val_windows.empty()) return;
    NoGradGuard ng;
    double acc = 0.0;
    for (std::size_t i = 0; i < val_windows.size(); ++i) {
      const auto seed = seed_combine(tc.seed, 0x7a1 + i, 0);
      acc += static_cast<double>(
          detail::window_recon_loss(model, val_windows[i], seed, beta).item());
    }
    const double val = acc / static_cast<double>(val_windows.size());
    emit({step, "val", val, lr});
    if (val < res.best_val_loss) {
      res.best_val_loss = val;
      res.best_step = step;
      if (!checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
    }
  };

  for (std::int64_t step = 0; step < tc.total_steps; ++step) {
    const double lr = cosine_lr(step, tc.total_steps, tc.base_lr);
    Tensor<T> total;
    for (Dim b = 0; b < tc.batch_size; ++b) {
      if (cursor >= order.size()) {
        cursor = 0;
        ++epoch;
        std::mt19937_64 erng(seed_combine(tc.seed, 0x0d3e, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), erng);
      }
      const Dim wi = order[cursor++];
      const auto mask_seed =
          seed_combine(tc.seed, static_cast<std::uint64_t>(wi), static_cast<std::uint64_t>(step));
      auto loss = detail::window_recon_loss(model, train_windows[static_cast<std::size_t>(wi)],
                                            mask_seed, beta);
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, T(1) / static_cast<T>(tc.batch_size));
    const double train_loss = static_cast<double>(total.item());
    if (!std::isfinite(train_loss))
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));

    opt.zero_grad();
    backward(total);
    opt.step(lr);

    emit({step, "train", train_loss, lr});
    res.final_train_loss = train_loss;
    if ((step + 1) % val_every == 0 || step + 1 == tc.total_steps) validate_now(step, lr);
  }
  if (res.best_step < 0 && !checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneOptions {
  int max_epochs = 30;
  bool frozen_encoder = false;
};

struct FinetuneResult {
  MetricReport report;
  std::vector<LogEntry> log;
  int epochs_ran = 0;
  bool stopped_early = false;
  std::int64_t trainable_params = 0;
};

namespace detail {

template <typename T>
Tensor<T> window_logits(Model<T>& model, const EegWindow& w) {
  auto x_norm = window_input<T>(w);
  auto grid = model.tokenize(x_norm);
  auto enc = model.encode(grid.tokens);
  return model.classify(enc, grid.rows_c);
}

// Scheme-dependent loss for one window given its label.
template <typename T>
Tensor<T> window_class_loss(Model<T>& model, const EegWindow& w, TaskScheme scheme) {
  if (!w.label) throw ValueError("finetune: unlabeled window");
  auto logits = window_logits(model, w);
  const auto& lab = w.label->values;
  if (scheme_single_label(scheme)) return softmax_cross_entropy(logits, {lab[0]});
  // mc: flags as-is; mmc: one-hot per row, none (13) as all-zero.
  const Dim rows = logits.dim(0), k = logits.dim(1);
  std::vector<T> target(static_cast<std::size_t>(rows * k), T(0));
  if (scheme == TaskScheme::mc) {
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<T>(lab[i]);
  } else {
    for (Dim r = 0; r < rows; ++r)
      if (lab[static_cast<std::size_t>(r)] < kArtifactTypes)
        target[static_cast<std::size_t>(r * k + lab[static_cast<std::size_t>(r)])] = T(1);
  }
  return bce_with_logits(logits, Tensor<T>::from_vector({rows, k}, std::move(target)));
}

}  // namespace detail

/// Score a labeled set: mean loss plus scheme-appropriate metrics.
template <typename T>
MetricReport evaluate(Model<T>& model, const std::vector<EegWindow>& windows, TaskScheme scheme) {
  if (windows.empty()) throw ValueError("evaluate: empty set");
  NoGradGuard ng;
  MetricReport rep;
  const int k = scheme_num_outputs(scheme);

  std::vector<double> bin_scores;
  std::vector<int> bin_labels;
  std::vector<int> preds, labels;
  std::vector<std::vector<double>> prob_rows;  // single-label softmax per window
  double loss_acc = 0.0;

  for (const auto& w : windows) {
    loss_acc += static_cast<double>(detail::window_class_loss(model, w, scheme).item());
    auto logits = detail::window_logits(model, w);
    const auto lv = logits.values();
    const auto& lab = w.label->values;
    if (scheme_single_label(scheme)) {
      // Softmax probabilities of one row.
      double m = lv[0];
      for (int j = 1; j < k; ++j) m = std::max(m, static_cast<double>(lv[j]));
      double denom = 0;
      std::vector<double> p(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) {
        p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(lv[j]) - m);
        denom += p[static_cast<std::size_t>(j)];
      }
      int arg = 0;
      for (int j = 0; j < k; ++j) {
        p[static_cast<std::size_t>(j)] /= denom;
        if (p[static_cast<std::size_t>(j)] > p[static_cast<std::size_t>(arg)]) arg = j;
      }
      preds.push_back(arg);
      labels.push_back(lab[0]);
      if (k == 2) {
        bin_scores.push_back(p[1]);
        bin_labels.push_back(lab[0]);
      }
      prob_rows.push_back(std::move(p));
    } else {
      const Dim rows = logits.dim(0);
      for (Dim r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) {
          const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(lv[r * k + j])));
          int y;
          if (scheme == TaskScheme::mc) {
            y = lab[static_cast<std::size_t>(r * k + j)];
          } else {
            y = lab[static_cast<std::size_t>(r)] == j ? 1 : 0;
          }
          bin_scores.push_back(s);
          bin_labels.push_back(y);
          preds.push_back(s > 0.5 ? 1 : 0);
          labels.push_back(y);
        }
    }
  }

  rep.loss = loss_acc / static_cast<double>(windows.size());
  if (scheme_single_label(scheme) && k > 2) {
    rep.balanced_accuracy = balanced_accuracy(preds, labels, k);
    rep.per_class_recall = per_class_recall(preds, labels, k);
    // Macro one-vs-rest ranking metrics over classes with both outcomes.
    double auroc_acc = 0, aupr_acc = 0;
    int auroc_n = 0, aupr_n = 0;
    for (int c = 0; c < k; ++c) {
      std::vector<double> sc;
      std::vector<int> yl;
      for (std::size_t i = 0; i < windows.size(); ++i) {
        sc.push_back(prob_rows[i][static_cast<std::size_t>(c)]);
        yl.push_back(windows[i].label->values[0] == c ? 1 : 0);
      }
      if (auto a = auroc(sc, yl)) {
        auroc_acc += *a;
        ++auroc_n;
      }
      if (auto a = aupr(sc, yl)) {
        aupr_acc += *a;
        ++aupr_n;
      }
    }
    if (auroc_n > 0) rep.auroc = auroc_acc / auroc_n;
    if (aupr_n > 0) rep.aupr = aupr_acc / aupr_n;
  } else {
    const int classes = scheme_single_label(scheme) ? k : 2;
    rep.balanced_accuracy = balanced_accuracy(preds, labels, classes);
    rep.per_class_recall = per_class_recall(preds, labels, classes);
    rep.auroc = auroc(bin_scores, bin_labels);
    rep.aupr = aupr(bin_scores, bin_labels);
  }
  return rep;
}

/// End-to-end classifier training with the layer-wise lr ladder, cosine
/// decay and early stopping on validation loss. Restores the best
/// validation weights before evaluating.
template <typename T>
FinetuneResult finetune(const std::vector<EegWindow>& train, const std::vector<EegWindow>& val,
                        const std::vector<EegWindow>& test, Model<T>& model, TaskScheme scheme,
                        const TrainConfig& tc, const FinetuneOptions& opts = {},
                        std::ostream* log_stream = nullptr) {
  tc.validate();
  if (train.empty()) throw ValueError("finetune: empty training set");
  if (!model.head) throw ValueError("finetune: model has no classification head");
  if (model.head->num_outputs != scheme_num_outputs(scheme) ||
      model.head->per_channel_row != scheme_per_channel_row(scheme))
    throw ValueError("finetune: head arity does not match scheme " + to_string(scheme));

  const auto ladder = layerwise_lrs(model.cfg.num_blocks, 1.0, tc.layer_decay);
  Adam<T> opt({0.9, 0.999, 1e-8, tc.weight_decay, tc.grad_clip});
  {
    std::vector<Tensor<T>> head_params;
    model.head->for_each_param("head", [&](const std::string&, Tensor<T>& t) {
      head_params.push_back(t);
    });
    opt.add_group(std::move(head_params), ladder.head_lr);
    if (!opts.frozen_encoder) {
      std::vector<Tensor<T>> tok{model.patch_w, model.patch_b, model.pos_embed};
      opt.add_group(std::move(tok), ladder.tokenizer_lr);
      for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        std::vector<Tensor<T>> bp;
        model.blocks[i].for_each_param("b", [&](const std::string&, Tensor<T>& t) {
          bp.push_back(t);
        });
        opt.add_group(std::move(bp), ladder.block_lrs[i]);
      }
      std::vector<Tensor<T>> tail{model.final_norm_w};
      opt.add_group(std::move(tail), ladder.head_lr);
    }
  }

  FinetuneResult res;
  {
    std::int64_t n = 0;
    model.head->for_each_param("head", [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    if (!opts.frozen_encoder) {
      n += model.patch_w.numel() + model.patch_b.numel() + model.pos_embed.numel() +
           model.final_norm_w.numel();
      for (auto& b : model.blocks)
        b.for_each_param("b", [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    }
    res.trainable_params = n;
  }

  const Dim steps_per_epoch = (static_cast<Dim>(train.size()) + tc.batch_size - 1) / tc.batch_size;
  const std::int64_t total_steps =
      tc.total_steps > 0 ? tc.total_steps : static_cast<std::int64_t>(opts.max_epochs) * steps_per_epoch;

  EarlyStopper stopper(tc.early_stop_patience);
  std::vector<std::vector<T>> best_snapshot;
  std::vector<Dim> order(train.size());
  std::iota(order.begin(), order.end(), Dim(0));
  std::int64_t step = 0;

  auto emit = [&](const LogEntry& e) {
    res.log.push_back(e);
    if (log_stream) (*log_stream) << log_line(e) << '\n';
  };

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    std::mt19937_64 erng(seed_combine(tc.seed, 0xf17e, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), erng);
    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (Dim b0 = 0; b0 < static_cast<Dim>(order.size()); b0 += tc.batch_size) {
      const Dim b1 = std::min<Dim>(b0 + tc.batch_size, static_cast<Dim>(order.size()));
      const double lr = cosine_lr(std::min(step, total_steps), total_steps, tc.base_lr);
      Tensor<T> total;
      for (Dim i = b0; i < b1; ++i) {
        auto loss = detail::window_class_loss(model, train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], scheme);
        total = total.defined() ? add(total, loss) : loss;
      }
      total = scale(total, T(1) / static_cast<T>(b1 - b0));
      const double loss_v = static_cast<double>(total.item());
      if (!std::isfinite(loss_v)) throw NumericError("finetune: non-finite loss");
      opt.zero_grad();
      backward(total);
      opt.step(lr);
      epoch_loss += loss_v;
      ++batches;
      ++step;
    }
    emit({step, "train", epoch_loss / static_cast<double>(batches),
          cosine_lr(std::min(step, total_steps), total_steps, tc.base_lr)});
    res.epochs_ran = epoch + 1;

    double val_loss = epoch_loss / static_cast<double>(batches);
    if (!val.empty()) {
      NoGradGuard ng;
      double acc = 0.0;
      for (const auto& w : val)
        acc += static_cast<double>(detail::window_class_loss(model, w, scheme).item());
      val_loss = acc / static_cast<double>(val.size());
      emit({step, "val", val_loss, 0.0});
    }
    if (val_loss <= stopper.best()) best_snapshot = detail::snapshot_params(model);
    if (stopper.observe(val_loss)) {
      res.stopped_early = true;
      break;
    }
  }

  if (!best_snapshot.empty()) detail::restore_params(model, best_snapshot);
  const auto& eval_set = !test.empty() ? test : (!val.empty() ? val : train);
  res.report = evaluate(model, eval_set, scheme);
  return res;
}

}  // namespace bissm
