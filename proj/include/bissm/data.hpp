#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bissm/errors.hpp"
#include "bissm/model.hpp"
#include "bissm/util.hpp"

namespace bissm {

// Event type ids in annotation files: 0..12 artifact vocabulary (the mcc
// protocol restricts to 0..4), 13 slowing, 14 seizure.
inline constexpr int kSlowingType = 13;
inline constexpr int kSeizureType = 14;

struct EegRecording {
  Dim channels = 0;
  float sample_rate = 0.0f;
  Dim samples_per_channel = 0;
  std::vector<float> data;  // channel-major (channels x samples)
  std::string subject_id;

  float at(Dim ch, Dim s) const { return data[static_cast<std::size_t>(ch * samples_per_channel + s)]; }
  float& at(Dim ch, Dim s) { return data[static_cast<std::size_t>(ch * samples_per_channel + s)]; }
};

struct Annotation {
  Dim channel = 0;
  Dim start = 0;  // inclusive sample
  Dim end = 0;    // exclusive sample
  int type = 0;
};

/// Scheme-dependent window label.
/// bc/abnormal/mcc/slowing4: one value. mc: rows_c x 13 binary flags,
/// row-major. mmc: rows_c values in 0..13 (13 = none).
struct Label {
  TaskScheme scheme = TaskScheme::bc;
  std::vector<int> values;
};

struct EegWindow {
  Dim channels = 0;
  Dim samples = 0;
  Dim start = 0;  // offset into the source recording
  std::vector<float> data;  // (channels x samples)
  std::optional<Label> label;
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Linear-interpolation percentile on a sorted copy (position p * (n - 1)).
template <typename T>
T percentile_sorted(const std::vector<T>& sorted, double p) {
  const auto n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = p * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= n) return sorted[n - 1];
  return static_cast<T>(static_cast<double>(sorted[lo]) +
                        frac * (static_cast<double>(sorted[lo + 1]) - static_cast<double>(sorted[lo])));
}

}  // namespace detail

/// Per-channel interquartile scaling: (x - q25) / ((q75 - q25) + 1e-8).
/// A constant channel divides by the 1e-8 guard alone (finite, warned).
template <typename T>
std::vector<T> quartile_normalize(std::span<const T> x, Dim channels, Dim samples) {
  if (channels < 1 || samples < 4) throw ValueError("quartile_normalize: need >= 4 samples per channel");
  if (static_cast<Dim>(x.size()) != channels * samples)
    throw ShapeError("quartile_normalize: data size does not match (C x T)");
  std::vector<T> out(x.size());
  std::vector<T> sorted(static_cast<std::size_t>(samples));
  for (Dim c = 0; c < channels; ++c) {
    const T* row = x.data() + c * samples;
    sorted.assign(row, row + samples);
    std::sort(sorted.begin(), sorted.end());
    const T q_lower = detail::percentile_sorted(sorted, 0.25);
    const T q_upper = detail::percentile_sorted(sorted, 0.75);
    const T denom = (q_upper - q_lower) + T(1e-8);
    if (q_upper == q_lower)
      std::fprintf(stderr, "quartile_normalize: constant channel %lld, IQR guard in effect\n",
                   static_cast<long long>(c));
    T* dst = out.data() + c * samples;
    for (Dim s = 0; s < samples; ++s) dst[s] = (row[s] - q_lower) / denom;
  }
  return out;
}

template <typename T>
Tensor<T> quartile_normalize(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("quartile_normalize: rank-2 (C x T) input required");
  auto v = quartile_normalize<T>(x.values(), x.dim(0), x.dim(1));
  return Tensor<T>::from_vector(x.shape(), std::move(v));
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Left-aligned windows every `stride` samples; a trailing partial window is
/// dropped. win_T > total_T yields an empty list with a warning.
inline std::vector<EegWindow> window(const EegRecording& rec, Dim win_samples, Dim stride) {
  if (win_samples < 1 || stride < 1) throw ValueError("window: win/stride must be positive");
  std::vector<EegWindow> out;
  if (win_samples > rec.samples_per_channel) {
    std::fprintf(stderr, "window: window length %lld exceeds recording length %lld\n",
                 static_cast<long long>(win_samples), static_cast<long long>(rec.samples_per_channel));
    return out;
  }
  for (Dim start = 0; start + win_samples <= rec.samples_per_channel; start += stride) {
    EegWindow w;
    w.channels = rec.channels;
    w.samples = win_samples;
    w.start = start;
    w.data.resize(static_cast<std::size_t>(rec.channels * win_samples));
    for (Dim c = 0; c < rec.channels; ++c)
      std::copy(rec.data.begin() + (c * rec.samples_per_channel + start),
                rec.data.begin() + (c * rec.samples_per_channel + start + win_samples),
                w.data.begin() + c * win_samples);
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

/// Map annotations overlapping [start, start+len) onto a scheme label.
/// Overlap counts from one sample. Channel rows group patch_c channels.
/// Returns nullopt when the window is dropped (mcc with zero or more than
/// one distinct artifact type).
inline std::optional<Label> relabel(const std::vector<Annotation>& annotations, Dim start, Dim len,
                                    TaskScheme scheme, Dim channels, Dim patch_c) {
  const Dim rows_c = (channels + patch_c - 1) / patch_c;
  const Dim end = start + len;
  auto overlaps = [&](const Annotation& a) { return a.start < end && a.end > start && a.end > a.start; };
  auto overlap_len = [&](const Annotation& a) {
    return std::min(a.end, end) - std::max(a.start, start);
  };

  Label lab;
  lab.scheme = scheme;
  switch (scheme) {
    case TaskScheme::bc: {
      int any = 0;
      for (const auto& a : annotations)
        if (overlaps(a) && a.type >= 0 && a.type < kArtifactTypes) any = 1;
      lab.values = {any};
      return lab;
    }
    case TaskScheme::abnormal: {
      // Synthetic stand-in: a window is abnormal when any event of any kind
      // touches it.
      int any = 0;
      for (const auto& a : annotations)
        if (overlaps(a)) any = 1;
      lab.values = {any};
      return lab;
    }
    case TaskScheme::mc: {
      lab.values.assign(static_cast<std::size_t>(rows_c * kArtifactTypes), 0);
      for (const auto& a : annotations) {
        if (!overlaps(a) || a.type < 0 || a.type >= kArtifactTypes) continue;
        if (a.channel < 0 || a.channel >= channels) throw ValueError("relabel: annotation channel out of range");
        const Dim row = a.channel / patch_c;
        lab.values[static_cast<std::size_t>(row * kArtifactTypes + a.type)] = 1;
      }
      return lab;
    }
    case TaskScheme::mmc: {
      // Per row the most-overlapping type wins; 13 encodes "none".
      lab.values.assign(static_cast<std::size_t>(rows_c), kArtifactTypes);
      std::vector<Dim> best(static_cast<std::size_t>(rows_c), 0);
      std::vector<Dim> acc(static_cast<std::size_t>(rows_c * kArtifactTypes), 0);
      for (const auto& a : annotations) {
        if (!overlaps(a) || a.type < 0 || a.type >= kArtifactTypes) continue;
        if (a.channel < 0 || a.channel >= channels) throw ValueError("relabel: annotation channel out of range");
        const Dim row = a.channel / patch_c;
        acc[static_cast<std::size_t>(row * kArtifactTypes + a.type)] += overlap_len(a);
      }
      for (Dim r = 0; r < rows_c; ++r)
        for (int ty = 0; ty < kArtifactTypes; ++ty) {
          const Dim v = acc[static_cast<std::size_t>(r * kArtifactTypes + ty)];
          if (v > best[static_cast<std::size_t>(r)]) {
            best[static_cast<std::size_t>(r)] = v;
            lab.values[static_cast<std::size_t>(r)] = ty;
          }
        }
      return lab;
    }
    case TaskScheme::mcc: {
      // Single-label over types 0..4; windows with zero or multiple distinct
      // types are dropped.
      int seen = -1;
      for (const auto& a : annotations) {
        if (!overlaps(a) || a.type < 0 || a.type >= kMccTypes) continue;
        if (seen == -1) seen = a.type;
        else if (seen != a.type) return std::nullopt;
      }
      if (seen == -1) return std::nullopt;
      lab.values = {seen};
      return lab;
    }
    case TaskScheme::slowing4: {
      // 0 normal, 1 slowing, 2 seizure, 3 complex (both kinds present).
      bool slow = false, seiz = false;
      for (const auto& a : annotations) {
        if (!overlaps(a)) continue;
        if (a.type == kSlowingType) slow = true;
        if (a.type == kSeizureType) seiz = true;
      }
      lab.values = {slow && seiz ? 3 : seiz ? 2 : slow ? 1 : 0};
      return lab;
    }
  }
  throw ValueError("relabel: unknown scheme");
}

inline void validate_annotation_types(const std::vector<Annotation>& annotations) {
  for (const auto& a : annotations)
    if (a.type < 0 || a.type > kSeizureType)
      throw ValueError("annotation type id " + std::to_string(a.type) + " out of range");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<Dim> train, val, test;
  std::uint64_t seed = 0;
};

/// Disjoint 80/10/10 shuffle split, deterministic per seed.
inline DatasetSplit split_dataset(Dim n, std::uint64_t seed) {
  if (n < 0) throw ValueError("split_dataset: negative count");
  DatasetSplit s;
  s.seed = seed;
  std::vector<Dim> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Dim(0));
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eed0517ULL));
  std::shuffle(perm.begin(), perm.end(), rng);
  const Dim n_val = n / 10;
  const Dim n_test = n / 10;
  const Dim n_train = n - n_val - n_test;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  s.test.assign(perm.begin() + n_train + n_val, perm.end());
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct SynthSpec {
  Dim channels = 20;
  float sample_rate = 200.0f;
  double duration_s = 60.0;
  std::uint64_t seed = 0;
  double artifact_rate_per_min = 4.0;  // injected burst events
  double slowing_rate_per_min = 0.0;
  double seizure_rate_per_min = 0.0;
  double burst_amp = 10.0;  // burst amplitude as a multiple of channel sigma
  std::string subject_id = "synth";
};

struct SynthResult {
  EegRecording recording;
  std::vector<Annotation> annotations;
};

namespace detail {

// Voss-McCartney pink-ish noise; one value per call.
class PinkNoise {
public:
  explicit PinkNoise(std::mt19937_64& rng) : rng_(rng) {
    for (auto& r : rows_) r = dist_(rng_);
  }
  double next() {
    counter_ += 1;
    const unsigned idx = counter_ == 0 ? kRows - 1 : static_cast<unsigned>(std::countr_zero(counter_));
    if (idx < kRows) rows_[idx] = dist_(rng_);
    double s = 0;
    for (double r : rows_) s += r;
    return s / kRows;
  }

private:
  static constexpr unsigned kRows = 8;
  std::mt19937_64& rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
  double rows_[kRows]{};
  std::uint64_t counter_ = 0;
};

}  // namespace detail

/// Seeded synthetic multichannel recording: per channel a sum of 3-6
/// sinusoids (1-30 Hz) plus pink noise, with labeled events injected as
/// high-amplitude 0.5-2 s bursts (artifacts), 1-3 Hz amplitude increases
/// (slowing) and longer sustained bursts (seizure-like).
inline SynthResult synth_generate(const SynthSpec& spec) {
  if (spec.channels < 1 || spec.duration_s <= 0 || spec.sample_rate <= 0)
    throw ValueError("synth_generate: invalid spec");
  const Dim total = static_cast<Dim>(spec.duration_s * spec.sample_rate);
  SynthResult out;
  out.recording.channels = spec.channels;
  out.recording.sample_rate = spec.sample_rate;
  out.recording.samples_per_channel = total;
  out.recording.subject_id = spec.subject_id;
  out.recording.data.resize(static_cast<std::size_t>(spec.channels * total));

  std::vector<double> sigma(static_cast<std::size_t>(spec.channels), 0.0);

  // Background per channel; independent streams keep the output identical
  // under any FEMBA_THREADS setting.
  parallel_for(spec.channels, [&](Dim c) {
    std::mt19937_64 rng(seed_combine(spec.seed, 0xba5e, static_cast<std::uint64_t>(c)));
    std::uniform_int_distribution<int> n_waves(3, 6);
    std::uniform_real_distribution<double> freq(1.0, 30.0);
    std::uniform_real_distribution<double> amp(0.3, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 6.283185307179586);
    const int waves = n_waves(rng);
    std::vector<double> f(waves), a(waves), ph(waves);
    for (int w = 0; w < waves; ++w) {
      f[w] = freq(rng);
      a[w] = amp(rng);
      ph[w] = phase(rng);
    }
    detail::PinkNoise pink(rng);
    float* row = out.recording.data.data() + c * total;
    double ss = 0;
    for (Dim s = 0; s < total; ++s) {
      const double t = static_cast<double>(s) / spec.sample_rate;
      double v = 0.4 * pink.next();
      for (int w = 0; w < waves; ++w) v += a[w] * std::sin(6.283185307179586 * f[w] * t + ph[w]);
      row[s] = static_cast<float>(v);
      ss += v * v;
    }
    sigma[static_cast<std::size_t>(c)] = std::sqrt(ss / static_cast<double>(total));
  });

  // Event injection is sequential and seeded separately from the background.
  std::mt19937_64 ev_rng(seed_combine(spec.seed, 0xeeee));
  auto inject = [&](double rate_per_min, int kind) {
    const double expected = rate_per_min * spec.duration_s / 60.0;
    const Dim count = static_cast<Dim>(std::floor(expected));
    std::uniform_int_distribution<Dim> chan(0, spec.channels - 1);
    std::uniform_int_distribution<int> arti(0, kArtifactTypes - 1);
    for (Dim e = 0; e < count; ++e) {
      const Dim c = chan(ev_rng);
      double dur_s;
      double freq_hz;
      int type;
      double amp_mult = spec.burst_amp;
      if (kind == 0) {  // artifact burst
        dur_s = std::uniform_real_distribution<double>(0.5, 2.0)(ev_rng);
        freq_hz = std::uniform_real_distribution<double>(20.0, 28.0)(ev_rng);
        type = arti(ev_rng);
      } else if (kind == 1) {  // slowing: low-frequency amplitude increase
        dur_s = std::uniform_real_distribution<double>(2.0, 5.0)(ev_rng);
        freq_hz = std::uniform_real_distribution<double>(1.0, 3.0)(ev_rng);
        type = kSlowingType;
        amp_mult = 3.0;
      } else {  // seizure-like sustained burst
        dur_s = std::uniform_real_distribution<double>(3.0, 6.0)(ev_rng);
        freq_hz = std::uniform_real_distribution<double>(4.0, 8.0)(ev_rng);
        type = kSeizureType;
        amp_mult = 5.0;
      }
      const Dim dur = std::min<Dim>(static_cast<Dim>(dur_s * spec.sample_rate), total);
      if (dur < 2) continue;
      const Dim start = std::uniform_int_distribution<Dim>(0, total - dur)(ev_rng);
      const double phase0 = std::uniform_real_distribution<double>(0.0, 6.283185307179586)(ev_rng);
      const double a_burst = amp_mult * sigma[static_cast<std::size_t>(c)];
      float* row = out.recording.data.data() + c * total;
      for (Dim s = start; s < start + dur; ++s) {
        const double t = static_cast<double>(s) / spec.sample_rate;
        row[s] += static_cast<float>(a_burst * std::sin(6.283185307179586 * freq_hz * t + phase0));
      }
      out.annotations.push_back({c, start, start + dur, type});
    }
  };
  inject(spec.artifact_rate_per_min, 0);
  inject(spec.slowing_rate_per_min, 1);
  inject(spec.seizure_rate_per_min, 2);
  std::sort(out.annotations.begin(), out.annotations.end(), [](const auto& a, const auto& b) {
    return a.start < b.start || (a.start == b.start && a.channel < b.channel);
  });
  return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// EEGB container, little-endian: magic "EEGB", u8 version = 1, u16 channel
// count, u64 sample count, f32 sample rate, u16 subject-id length + UTF-8
// bytes, then channel-major f32 samples.
inline void write_eegb(const EegRecording& rec, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("eegb: cannot open " + path + " for writing");
  os.write("EEGB", 4);
  const std::uint8_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 1);
  const auto ch = static_cast<std::uint16_t>(rec.channels);
  os.write(reinterpret_cast<const char*>(&ch), 2);
  const auto ns = static_cast<std::uint64_t>(rec.samples_per_channel);
  os.write(reinterpret_cast<const char*>(&ns), 8);
  os.write(reinterpret_cast<const char*>(&rec.sample_rate), 4);
  const auto id_len = static_cast<std::uint16_t>(rec.subject_id.size());
  os.write(reinterpret_cast<const char*>(&id_len), 2);
  os.write(rec.subject_id.data(), id_len);
  os.write(reinterpret_cast<const char*>(rec.data.data()),
           static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
  if (!os) throw IoError("eegb: write failed for " + path);
}

inline EegRecording read_eegb(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("eegb: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "EEGB", 4) != 0)
    throw IoError("eegb: bad magic in " + path);
  std::uint8_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 1);
  if (version != 1) throw IoError("eegb: unsupported version " + std::to_string(version));
  EegRecording rec;
  std::uint16_t ch = 0;
  std::uint64_t ns = 0;
  std::uint16_t id_len = 0;
  is.read(reinterpret_cast<char*>(&ch), 2);
  is.read(reinterpret_cast<char*>(&ns), 8);
  is.read(reinterpret_cast<char*>(&rec.sample_rate), 4);
  is.read(reinterpret_cast<char*>(&id_len), 2);
  rec.subject_id.resize(id_len);
  is.read(rec.subject_id.data(), id_len);
  rec.channels = ch;
  rec.samples_per_channel = static_cast<Dim>(ns);
  rec.data.resize(static_cast<std::size_t>(rec.channels) * static_cast<std::size_t>(ns));
  is.read(reinterpret_cast<char*>(rec.data.data()),
          static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
  if (!is) throw IoError("eegb: truncated file " + path);
  return rec;
}

// Annotation sidecar: UTF-8 lines "channel,start_sample,end_sample,type_id".
inline void write_annotations(const std::vector<Annotation>& anns, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("annotations: cannot open " + path + " for writing");
  for (const auto& a : anns)
    os << a.channel << ',' << a.start << ',' << a.end << ',' << a.type << '\n';
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("annotations: cannot open " + path);
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    Annotation a;
    char comma;
    std::istringstream ss(line);
    if (!(ss >> a.channel >> comma >> a.start >> comma >> a.end >> comma >> a.type))
      throw IoError("annotations: malformed line " + std::to_string(line_no) + " in " + path);
    out.push_back(a);
  }
  validate_annotation_types(out);
  return out;
}

/// CSV import: one row per sample, one column per channel.
inline EegRecording read_csv_recording(const std::string& path, float sample_rate,
                                       const std::string& subject_id = "csv") {
  std::ifstream is(path);
  if (!is) throw IoError("csv: cannot open " + path);
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<float> row;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stof(cell));
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError("csv: ragged row in " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("csv: empty file " + path);
  EegRecording rec;
  rec.channels = static_cast<Dim>(rows.front().size());
  rec.samples_per_channel = static_cast<Dim>(rows.size());
  rec.sample_rate = sample_rate;
  rec.subject_id = subject_id;
  rec.data.resize(static_cast<std::size_t>(rec.channels * rec.samples_per_channel));
  for (Dim s = 0; s < rec.samples_per_channel; ++s)
    for (Dim c = 0; c < rec.channels; ++c) rec.at(c, s) = rows[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)];
  return rec;
}

}  // namespace bissm
