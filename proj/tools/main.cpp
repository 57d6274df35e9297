// bissm: bidirectional selective state-space sequence modeling for
// multichannel time-series. Subcommands: gen-synth, pretrain, finetune,
// eval, reconstruct, profile, bench-scaling.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bissm/bissm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bissm;

namespace {

struct RunSettings {
  ModelConfig model;
  TrainConfig train;
  Dim window_samples = 1600;
  Dim window_stride = 1600;
  std::uint64_t seed = 0;
  std::string config_file;
  std::string out_dir;
};

std::string read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

void expect_fields(const json& j, const std::string& prefix,
                   const std::vector<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError(prefix + "." + it.key(), "unknown field");
  }
}

template <typename T>
void load_field(const json& j, const std::string& prefix, const std::string& key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(prefix + "." + key, "wrong type");
  }
}

void apply_config_file(RunSettings& s, const std::string& path) {
  json root;
  try {
    root = json::parse(read_file_bytes(path));
  } catch (const json::exception& e) {
    throw ConfigError("config", std::string("not valid JSON: ") + e.what());
  }
  expect_fields(root, "config", {"model", "train", "data"});

  if (root.contains("model")) {
    const auto& m = root["model"];
    expect_fields(m, "model",
                  {"variant", "num_blocks", "embed_dim", "state_size", "patch_c", "patch_t",
                   "mask_ratio", "expansion", "head", "head_hidden", "input_channels",
                   "input_samples"});
    if (m.contains("variant")) {
      std::string v;
      load_field(m, "model", "variant", v);
      s.model = ModelConfig::preset(v);
    }
    load_field(m, "model", "num_blocks", s.model.num_blocks);
    load_field(m, "model", "embed_dim", s.model.embed_dim);
    load_field(m, "model", "state_size", s.model.state_size);
    load_field(m, "model", "patch_c", s.model.patch_c);
    load_field(m, "model", "patch_t", s.model.patch_t);
    load_field(m, "model", "mask_ratio", s.model.mask_ratio);
    load_field(m, "model", "expansion", s.model.expansion);
    load_field(m, "model", "head_hidden", s.model.head_hidden);
    load_field(m, "model", "input_channels", s.model.input_channels);
    load_field(m, "model", "input_samples", s.model.input_samples);
    if (m.contains("head")) {
      std::string h;
      load_field(m, "model", "head", h);
      if (h == "linear") s.model.head = HeadKind::linear;
      else if (h == "mamba_enhanced") s.model.head = HeadKind::mamba_enhanced;
      else throw ConfigError("model.head", "expected linear | mamba_enhanced");
    }
  }
  if (root.contains("train")) {
    const auto& t = root["train"];
    expect_fields(t, "train",
                  {"base_lr", "total_steps", "batch_size", "smooth_l1_beta", "layer_decay",
                   "early_stop_patience", "weight_decay", "grad_clip", "val_every"});
    load_field(t, "train", "base_lr", s.train.base_lr);
    load_field(t, "train", "total_steps", s.train.total_steps);
    load_field(t, "train", "batch_size", s.train.batch_size);
    load_field(t, "train", "smooth_l1_beta", s.train.smooth_l1_beta);
    load_field(t, "train", "layer_decay", s.train.layer_decay);
    load_field(t, "train", "early_stop_patience", s.train.early_stop_patience);
    load_field(t, "train", "weight_decay", s.train.weight_decay);
    load_field(t, "train", "grad_clip", s.train.grad_clip);
    load_field(t, "train", "val_every", s.train.val_every);
  }
  if (root.contains("data")) {
    const auto& d = root["data"];
    expect_fields(d, "data", {"window_samples", "stride"});
    load_field(d, "data", "window_samples", s.window_samples);
    load_field(d, "data", "stride", s.window_stride);
  }
}

json settings_to_json(const RunSettings& s) {
  json j;
  j["model"] = {{"variant", to_string(s.model.variant)},
                {"num_blocks", s.model.num_blocks},
                {"embed_dim", s.model.embed_dim},
                {"state_size", s.model.state_size},
                {"patch_c", s.model.patch_c},
                {"patch_t", s.model.patch_t},
                {"mask_ratio", s.model.mask_ratio},
                {"expansion", s.model.expansion},
                {"head", to_string(s.model.head)},
                {"head_hidden", s.model.head_hidden},
                {"input_channels", s.model.input_channels},
                {"input_samples", s.model.input_samples}};
  j["train"] = {{"base_lr", s.train.base_lr},
                {"total_steps", s.train.total_steps},
                {"batch_size", s.train.batch_size},
                {"smooth_l1_beta", s.train.smooth_l1_beta},
                {"layer_decay", s.train.layer_decay},
                {"early_stop_patience", s.train.early_stop_patience},
                {"weight_decay", s.train.weight_decay},
                {"grad_clip", s.train.grad_clip},
                {"val_every", s.train.val_every}};
  j["data"] = {{"window_samples", s.window_samples}, {"stride", s.window_stride}};
  return j;
}

// Every run writes its manifest before any artifact.
void write_manifest(const RunSettings& s, const std::string& command,
                    const std::vector<std::string>& argv,
                    const std::vector<std::string>& input_files) {
  fs::create_directories(s.out_dir);
  json j;
  j["command"] = command;
  j["argv"] = argv;
  j["config_file"] = s.config_file;
  j["config"] = settings_to_json(s);
  j["seed"] = s.seed;
  j["output_dir"] = s.out_dir;
  json inputs = json::object();
  for (const auto& f : input_files) {
    const auto bytes = read_file_bytes(f);
    inputs[f] = hex64(fnv1a64(bytes.data(), bytes.size()));
  }
  j["inputs"] = inputs;
  std::ofstream os(fs::path(s.out_dir) / "manifest.json");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("cannot write manifest to " + s.out_dir);
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

std::vector<EegWindow> labeled_windows(const EegRecording& rec,
                                       const std::vector<Annotation>& anns, TaskScheme scheme,
                                       Dim win_samples, Dim stride, Dim patch_c) {
  auto windows = window(rec, win_samples, stride);
  std::vector<EegWindow> out;
  for (auto& w : windows) {
    auto lab = relabel(anns, w.start, w.samples, scheme, rec.channels, patch_c);
    if (!lab) continue;  // dropped by the scheme (mcc mixtures etc.)
    w.label = std::move(lab);
    out.push_back(std::move(w));
  }
  return out;
}

struct SplitWindows {
  std::vector<EegWindow> train, val, test;
};

SplitWindows split_windows(std::vector<EegWindow> windows, std::uint64_t seed) {
  auto split = split_dataset(static_cast<Dim>(windows.size()), seed);
  SplitWindows out;
  for (Dim i : split.train) out.train.push_back(windows[static_cast<std::size_t>(i)]);
  for (Dim i : split.val) out.val.push_back(windows[static_cast<std::size_t>(i)]);
  for (Dim i : split.test) out.test.push_back(windows[static_cast<std::size_t>(i)]);
  return out;
}

void write_metrics(const MetricReport& rep, const std::string& out_dir) {
  {
    std::ofstream os(fs::path(out_dir) / "metrics.txt");
    os << "loss               " << rep.loss << '\n';
    os << "balanced_accuracy  " << rep.balanced_accuracy << '\n';
    os << "auroc              " << (rep.auroc ? std::to_string(*rep.auroc) : "undefined") << '\n';
    os << "aupr               " << (rep.aupr ? std::to_string(*rep.aupr) : "undefined") << '\n';
    for (std::size_t c = 0; c < rep.per_class_recall.size(); ++c)
      os << "recall_class_" << c << "     " << rep.per_class_recall[c] << '\n';
  }
  {
    std::ofstream os(fs::path(out_dir) / "metrics.kv");
    os << "loss=" << rep.loss << '\n';
    os << "balanced_accuracy=" << rep.balanced_accuracy << '\n';
    if (rep.auroc) os << "auroc=" << *rep.auroc << '\n';
    if (rep.aupr) os << "aupr=" << *rep.aupr << '\n';
    for (std::size_t c = 0; c < rep.per_class_recall.size(); ++c)
      os << "recall_class_" << c << "=" << rep.per_class_recall[c] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int run_gen_synth(const RunSettings& s, const SynthSpec& spec,
                  const std::vector<std::string>& argv) {
  write_manifest(s, "gen-synth", argv, {});
  auto result = synth_generate(spec);
  const auto eegb = (fs::path(s.out_dir) / "synth.eegb").string();
  const auto ann = (fs::path(s.out_dir) / "synth.ann").string();
  write_eegb(result.recording, eegb);
  write_annotations(result.annotations, ann);
  std::cout << "wrote " << eegb << " (" << result.recording.channels << " ch x "
            << result.recording.samples_per_channel << " samples @ " << result.recording.sample_rate
            << " Hz)\nwrote " << ann << " (" << result.annotations.size() << " events)\n";
  return 0;
}

int run_pretrain(RunSettings& s, const std::string& data_path,
                 const std::vector<std::string>& argv) {
  write_manifest(s, "pretrain", argv, {data_path});
  auto rec = read_eegb(data_path);
  s.model.input_channels = rec.channels;
  s.model.input_samples = s.window_samples;
  auto windows = window(rec, s.window_samples, s.window_stride);
  if (windows.empty()) throw ValueError("pretrain: recording yields no windows");
  auto sw = split_windows(std::move(windows), s.seed);
  if (sw.train.empty()) sw.train = sw.test;

  auto model = Model<float>::init(s.model, s.seed);
  s.train.seed = s.seed;
  const auto ckpt = (fs::path(s.out_dir) / "model.ckpt").string();
  std::ofstream log(fs::path(s.out_dir) / "train_log.csv");
  auto res = pretrain(sw.train, sw.val, model, s.train, ckpt, &log);
  std::cout << "pretrain done: " << s.train.total_steps << " steps, final train loss "
            << res.final_train_loss << ", best val loss " << res.best_val_loss << " @ step "
            << res.best_step << "\ncheckpoint: " << ckpt << '\n';
  return 0;
}

int run_finetune(RunSettings& s, const std::string& data_path, const std::string& ann_path,
                 const std::string& scheme_name, const std::string& ckpt_path, int max_epochs,
                 bool frozen, const std::vector<std::string>& argv) {
  std::vector<std::string> inputs{data_path, ann_path};
  if (!ckpt_path.empty()) inputs.push_back(ckpt_path);
  write_manifest(s, "finetune", argv, inputs);

  const TaskScheme scheme = scheme_from_string(scheme_name);
  auto rec = read_eegb(data_path);
  auto anns = read_annotations(ann_path);

  Model<float> model = [&] {
    if (!ckpt_path.empty()) {
      auto loaded = load_checkpoint<float>(ckpt_path);
      loaded.model.cfg.head = s.model.head;
      std::mt19937_64 rng(splitmix64(s.seed + 1));
      loaded.model.attach_head(scheme, rng);
      return std::move(loaded.model);
    }
    s.model.input_channels = rec.channels;
    s.model.input_samples = s.window_samples;
    return Model<float>::init(s.model, s.seed, scheme);
  }();

  auto windows = labeled_windows(rec, anns, scheme, model.cfg.input_samples, s.window_stride,
                                 model.cfg.patch_c);
  if (windows.empty()) throw ValueError("finetune: no usable windows under scheme " + scheme_name);
  auto sw = split_windows(std::move(windows), s.seed);

  s.train.seed = s.seed;
  s.train.total_steps = 0;  // derived from epochs
  FinetuneOptions opts;
  opts.max_epochs = max_epochs;
  opts.frozen_encoder = frozen;
  std::ofstream log(fs::path(s.out_dir) / "train_log.csv");
  auto res = finetune(sw.train, sw.val, sw.test, model, scheme, s.train, opts, &log);

  const auto ckpt = (fs::path(s.out_dir) / "model_ft.ckpt").string();
  save_checkpoint(model, ckpt, scheme);
  write_metrics(res.report, s.out_dir);
  std::cout << "finetune done: " << res.epochs_ran << " epochs"
            << (res.stopped_early ? " (early stop)" : "") << ", balanced accuracy "
            << res.report.balanced_accuracy;
  if (res.report.auroc) std::cout << ", auroc " << *res.report.auroc;
  std::cout << "\ncheckpoint: " << ckpt << '\n';
  return 0;
}

int run_eval(RunSettings& s, const std::string& ckpt_path, const std::string& data_path,
             const std::string& ann_path, const std::string& scheme_name,
             const std::vector<std::string>& argv) {
  write_manifest(s, "eval", argv, {ckpt_path, data_path, ann_path});
  const TaskScheme scheme = scheme_from_string(scheme_name);
  auto loaded = load_checkpoint<float>(ckpt_path);
  if (!loaded.model.head) throw ValueError("eval: checkpoint has no classification head");
  auto rec = read_eegb(data_path);
  auto anns = read_annotations(ann_path);
  auto windows = labeled_windows(rec, anns, scheme, loaded.model.cfg.input_samples,
                                 s.window_stride, loaded.model.cfg.patch_c);
  if (windows.empty()) throw ValueError("eval: no usable windows");
  auto rep = evaluate(loaded.model, windows, scheme);
  write_metrics(rep, s.out_dir);
  std::cout << "eval: " << windows.size() << " windows, loss " << rep.loss
            << ", balanced accuracy " << rep.balanced_accuracy;
  if (rep.auroc) std::cout << ", auroc " << *rep.auroc;
  std::cout << '\n';
  return 0;
}

int run_reconstruct(RunSettings& s, const std::string& ckpt_path, const std::string& data_path,
                    Dim window_index, const std::vector<std::string>& argv) {
  write_manifest(s, "reconstruct", argv, {ckpt_path, data_path});
  auto loaded = load_checkpoint<float>(ckpt_path);
  auto& model = loaded.model;
  auto rec = read_eegb(data_path);
  auto windows = window(rec, model.cfg.input_samples, model.cfg.input_samples);
  if (windows.empty()) throw ValueError("reconstruct: recording shorter than one window");
  if (window_index < 0 || window_index >= static_cast<Dim>(windows.size()))
    throw ValueError("reconstruct: window index out of range (have " +
                     std::to_string(windows.size()) + ")");
  const auto& w = windows[static_cast<std::size_t>(window_index)];

  NoGradGuard ng;
  std::vector<float> vals(w.data.begin(), w.data.end());
  auto norm = quartile_normalize<float>(vals, w.channels, w.samples);
  auto x_norm = Tensor<float>::from_vector({w.channels, w.samples}, norm);
  auto grid = model.tokenize(x_norm);
  const auto mask = sample_mask(grid.tokens.dim(0), model.cfg.mask_ratio, s.seed);
  auto pred = model.decode(model.encode(model.apply_mask(grid, mask)));
  auto rec_signal = patches_to_signal<float>(pred.values(), w.channels, w.samples,
                                             model.cfg.patch_c, model.cfg.patch_t);

  // Per-sample masked flag from the token tiling.
  const Dim grid_c = model.cfg.grid_c(w.channels);
  std::vector<char> masked_token(static_cast<std::size_t>(grid.tokens.dim(0)), 0);
  for (Dim idx : mask.indices) masked_token[static_cast<std::size_t>(idx)] = 1;

  const auto csv_path = (fs::path(s.out_dir) / "reconstruction.csv").string();
  {
    std::ofstream os(csv_path);
    os << "channel,sample,original,reconstruction,masked\n";
    for (Dim c = 0; c < w.channels; ++c)
      for (Dim t = 0; t < w.samples; ++t) {
        const Dim token = (t / model.cfg.patch_t) * grid_c + (c / model.cfg.patch_c);
        os << c << ',' << t << ',' << norm[static_cast<std::size_t>(c * w.samples + t)] << ','
           << rec_signal[static_cast<std::size_t>(c * w.samples + t)] << ','
           << int(masked_token[static_cast<std::size_t>(token)]) << '\n';
      }
  }
  {
    std::ofstream os(fs::path(s.out_dir) / "mask_indices.txt");
    for (Dim idx : mask.indices) os << idx << '\n';
  }
  std::cout << "wrote " << csv_path << " (" << mask.indices.size() << " of "
            << grid.tokens.dim(0) << " tokens masked)\n";
  return 0;
}

int run_profile(RunSettings& s, Dim batch, const std::vector<std::string>& argv) {
  write_manifest(s, "profile", argv, {});
  const Dim c = s.model.input_channels, t = s.model.input_samples;
  auto rep = count_flops(s.model, batch, c, t);
  rep.peak_activation_bytes = peak_memory(s.model, batch, c, t);

  std::cout << "variant " << to_string(s.model.variant) << "  (" << s.model.num_blocks
            << " blocks, d = " << s.model.embed_dim << ", state = " << s.model.state_size
            << ")\ninput " << c << " x " << t << ", batch " << batch
            << "\nconvention: 1 MAC = 2 FLOPs; matmul/conv/scan terms only\n\n";
  std::cout << "parameters.total " << rep.params << '\n';
  for (const auto& [k, v] : rep.param_breakdown) std::cout << "parameters." << k << " " << v << '\n';
  std::cout << "flops.total " << rep.flops << '\n';
  for (const auto& [k, v] : rep.flop_breakdown) std::cout << "flops." << k << " " << v << '\n';
  std::cout << "peak_activation_bytes " << rep.peak_activation_bytes << '\n';

  const auto csv_path = (fs::path(s.out_dir) / "profile.csv").string();
  std::ofstream os(csv_path);
  os << "variant,L,batch,params,flops,bytes,wallclock_ms\n";
  os << to_string(s.model.variant) << ',' << s.model.num_tokens(c, t) << ',' << batch << ','
     << rep.params << ',' << rep.flops << ',' << rep.peak_activation_bytes << ",\n";
  std::cout << "\nwrote " << csv_path << '\n';
  return 0;
}

int run_bench(RunSettings& s, const std::string& lengths_csv, int reps,
              const std::vector<std::string>& argv) {
  write_manifest(s, "bench-scaling", argv, {});
  std::vector<std::int64_t> lengths;
  std::stringstream ss(lengths_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) lengths.push_back(std::stoll(tok));

  auto res = bench_scaling(lengths, s.model, reps, s.seed);

  const auto csv_path = (fs::path(s.out_dir) / "bench.csv").string();
  std::ofstream os(csv_path);
  os << "variant,L,batch,params,flops,bytes,wallclock_ms\n";
  auto emit = [&](const BenchRow& r) {
    os << r.variant << ',' << r.length << ',' << r.batch << ',' << r.params << ',' << r.flops
       << ',' << r.bytes << ',' << r.wallclock_ms << '\n';
    std::cout << r.variant << "  L=" << r.length << "  " << r.wallclock_ms << " ms  " << r.flops
              << " flops\n";
  };
  for (const auto& r : res.encoder_rows) emit(r);
  for (const auto& r : res.attention_rows) emit(r);
  std::cout << "encoder log-log slope:   " << res.encoder_slope
            << "\nattention log-log slope: " << res.attention_slope << '\n';

  // Published full-scale reference points, for context alongside the
  // desk-scale measurements.
  struct Ref { const char* name; const char* flops; const char* mem; };
  const Ref refs[] = {{"tiny", "1.31e9", "53.36"},
                      {"base", "7.52e9", "240.50"},
                      {"large", "12.48e9", "548.71"},
                      {"huge", "58.74e9", "1886.17"}};
  std::cout << "\nreference (reported full-scale costs):\n";
  for (const auto& r : refs) {
    std::cout << "  " << r.name << ": " << r.flops << " FLOPs, " << r.mem << " MB peak\n";
    os << "# reference-" << r.name << ",,," << "," << r.flops << ',' << r.mem << "e6,\n";
  }
  std::cout << "wrote " << csv_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> raw_args(argv, argv + argc);
  CLI::App app{"bidirectional selective state-space sequence modeling"};
  app.require_subcommand(1);

  RunSettings s;
  std::string variant_flag, head_flag, config_flag, out_flag = "out";
  std::uint64_t seed_flag = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_flag, "JSON config file");
    cmd->add_option("--seed", seed_flag, "root RNG seed");
    cmd->add_option("--out", out_flag, "output directory");
    cmd->add_option("--variant", variant_flag, "tiny | base | large | huge | custom");
    cmd->add_option("--blocks", s.model.num_blocks, "encoder block count");
    cmd->add_option("--embed-dim", s.model.embed_dim, "embedding width");
    cmd->add_option("--state-size", s.model.state_size, "SSM state size");
    cmd->add_option("--patch-c", s.model.patch_c, "patch channels");
    cmd->add_option("--patch-t", s.model.patch_t, "patch samples");
    cmd->add_option("--mask-ratio", s.model.mask_ratio, "masked token fraction");
    cmd->add_option("--expansion", s.model.expansion, "inner expansion factor");
    cmd->add_option("--head-hidden", s.model.head_hidden, "classifier hidden width");
    cmd->add_option("--channels", s.model.input_channels, "input channels");
    cmd->add_option("--samples", s.model.input_samples, "window samples");
    cmd->add_option("--head", head_flag, "linear | mamba_enhanced");
    cmd->add_option("--lr", s.train.base_lr, "base learning rate");
    cmd->add_option("--steps", s.train.total_steps, "total optimizer steps");
    cmd->add_option("--layer-decay", s.train.layer_decay, "layer-wise lr decay factor");
    cmd->add_option("--patience", s.train.early_stop_patience, "early stopping patience");
    cmd->add_option("--window-samples", s.window_samples, "window length in samples");
    cmd->add_option("--stride", s.window_stride, "window stride in samples");
  };

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "generate a labeled synthetic recording");
  SynthSpec synth;
  double minutes = 10.0;
  add_common(gen);
  gen->add_option("--rate", synth.sample_rate, "sample rate Hz");
  gen->add_option("--minutes", minutes, "duration in minutes");
  gen->add_option("--artifact-rate", synth.artifact_rate_per_min, "artifact events per minute");
  gen->add_option("--slowing-rate", synth.slowing_rate_per_min, "slowing events per minute");
  gen->add_option("--seizure-rate", synth.seizure_rate_per_min, "seizure events per minute");
  gen->add_option("--burst-amp", synth.burst_amp, "burst amplitude in channel sigmas");
  gen->add_option("--subject", synth.subject_id, "subject id string");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "masked-reconstruction pre-training");
  std::string data_path;
  add_common(pre);
  pre->add_option("--data", data_path, "EEGB recording")->required();
  pre->add_option("--batch", s.train.batch_size, "batch size");

  // finetune
  auto* fin = app.add_subcommand("finetune", "train a classifier head");
  std::string ann_path, scheme_name = "bc", ckpt_path;
  int epochs = 30;
  bool frozen = false;
  add_common(fin);
  fin->add_option("--data", data_path, "EEGB recording")->required();
  fin->add_option("--ann", ann_path, "annotation sidecar")->required();
  fin->add_option("--scheme", scheme_name, "bc | mc | mmc | mcc | abnormal | slowing4");
  fin->add_option("--checkpoint", ckpt_path, "pre-trained checkpoint to start from");
  fin->add_option("--epochs", epochs, "maximum epochs");
  fin->add_option("--batch", s.train.batch_size, "batch size");
  fin->add_flag("--frozen-encoder", frozen, "train the head only");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  ev->add_option("--data", data_path, "EEGB recording")->required();
  ev->add_option("--ann", ann_path, "annotation sidecar")->required();
  ev->add_option("--scheme", scheme_name, "labeling scheme");

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "masked reconstruction dump for plotting");
  Dim window_index = 0;
  add_common(rc);
  rc->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  rc->add_option("--input", data_path, "EEGB recording")->required();
  rc->add_option("--window-index", window_index, "window to reconstruct");

  // profile
  auto* pr = app.add_subcommand("profile", "analytic cost report");
  Dim batch = 8;
  add_common(pr);
  pr->add_option("--batch", batch, "batch size for the cost model");

  // bench-scaling
  auto* be = app.add_subcommand("bench-scaling", "timed length-scaling comparison");
  std::string lengths_csv = "256,512,1024,2048,4096,8192";
  int reps = 3;
  add_common(be);
  be->add_option("--lengths", lengths_csv, "comma-separated token lengths");
  be->add_option("--reps", reps, "repetitions per point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    // Config file first, then explicit flags override it.
    if (!config_flag.empty()) {
      RunSettings file_settings;
      apply_config_file(file_settings, config_flag);
      // Re-apply: start from file values, overlay any flag the user passed.
      RunSettings merged = file_settings;
      CLI::App* sub = app.get_subcommands().front();
      auto overridden = [&](const std::string& name) {
        const CLI::Option* o = sub->get_option_no_throw(name);
        return o != nullptr && o->count() > 0;
      };
      if (overridden("--blocks")) merged.model.num_blocks = s.model.num_blocks;
      if (overridden("--embed-dim")) merged.model.embed_dim = s.model.embed_dim;
      if (overridden("--state-size")) merged.model.state_size = s.model.state_size;
      if (overridden("--patch-c")) merged.model.patch_c = s.model.patch_c;
      if (overridden("--patch-t")) merged.model.patch_t = s.model.patch_t;
      if (overridden("--mask-ratio")) merged.model.mask_ratio = s.model.mask_ratio;
      if (overridden("--expansion")) merged.model.expansion = s.model.expansion;
      if (overridden("--head-hidden")) merged.model.head_hidden = s.model.head_hidden;
      if (overridden("--channels")) merged.model.input_channels = s.model.input_channels;
      if (overridden("--samples")) merged.model.input_samples = s.model.input_samples;
      if (overridden("--lr")) merged.train.base_lr = s.train.base_lr;
      if (overridden("--steps")) merged.train.total_steps = s.train.total_steps;
      if (overridden("--batch")) merged.train.batch_size = s.train.batch_size;
      if (overridden("--layer-decay")) merged.train.layer_decay = s.train.layer_decay;
      if (overridden("--patience")) merged.train.early_stop_patience = s.train.early_stop_patience;
      if (overridden("--window-samples")) merged.window_samples = s.window_samples;
      if (overridden("--stride")) merged.window_stride = s.window_stride;
      s = merged;
    }
    if (!variant_flag.empty()) {
      const auto keep = s.model;
      s.model = ModelConfig::preset(variant_flag);
      s.model.patch_c = keep.patch_c;
      s.model.patch_t = keep.patch_t;
      s.model.mask_ratio = keep.mask_ratio;
      s.model.head = keep.head;
      s.model.head_hidden = keep.head_hidden;
      s.model.input_channels = keep.input_channels;
      s.model.input_samples = keep.input_samples;
    }
    if (!head_flag.empty()) {
      if (head_flag == "linear") s.model.head = HeadKind::linear;
      else if (head_flag == "mamba_enhanced") s.model.head = HeadKind::mamba_enhanced;
      else throw ConfigError("--head", "expected linear | mamba_enhanced");
    }
    s.seed = seed_flag;
    s.out_dir = out_flag;
    s.config_file = config_flag;
    s.model.validate();
    s.train.seed = s.seed;

    if (gen->parsed()) {
      synth.channels = s.model.input_channels;
      synth.duration_s = minutes * 60.0;
      synth.seed = s.seed;
      return run_gen_synth(s, synth, raw_args);
    }
    if (pre->parsed()) return run_pretrain(s, data_path, raw_args);
    if (fin->parsed())
      return run_finetune(s, data_path, ann_path, scheme_name, ckpt_path, epochs, frozen, raw_args);
    if (ev->parsed()) return run_eval(s, ckpt_path, data_path, ann_path, scheme_name, raw_args);
    if (rc->parsed()) return run_reconstruct(s, ckpt_path, data_path, window_index, raw_args);
    if (pr->parsed()) return run_profile(s, batch, raw_args);
    if (be->parsed()) return run_bench(s, lengths_csv, reps, raw_args);
    std::cerr << "error: no subcommand\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config at " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
