#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <set>

#include "bissm/data.hpp"
#include "oracles.hpp"

using namespace bissm;
using Catch::Approx;

TEST_CASE("quartile normalization") {
  SECTION("textbook channel") {
    std::vector<double> x{1, 2, 3, 4, 5};
    auto y = quartile_normalize<double>(x, 1, 5);
    // q25 = 2, q75 = 4; value 3 maps to ~0.5.
    CHECK(y[2] == Approx(0.5).epsilon(1e-7));
    CHECK(y[0] == Approx(-0.5).epsilon(1e-7));
    CHECK(y[4] == Approx(1.5).epsilon(1e-7));
  }
  SECTION("affine invariance") {
    std::vector<double> x{0.3, -1.2, 2.5, 0.9, -0.4, 1.8, 0.0, -2.2};
    auto base = quartile_normalize<double>(x, 1, 8);
    std::vector<double> ax(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) ax[i] = 3.7 * x[i] + 11.0;
    auto scaled = quartile_normalize<double>(ax, 1, 8);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(scaled[i] == Approx(base[i]).margin(1e-6));
  }
  SECTION("constant channel stays finite and zero") {
    std::vector<double> x{7, 7, 7, 7};
    auto y = quartile_normalize<double>(x, 1, 4);
    for (double v : y) CHECK(v == 0.0);
  }
  SECTION("idempotence up to the guard term") {
    std::vector<double> x{0.5, -0.3, 1.9, 2.4, -1.1, 0.0, 3.3, -0.7, 1.2, 0.4};
    auto once = quartile_normalize<double>(x, 1, 10);
    auto twice = quartile_normalize<double>(once, 1, 10);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(twice[i] - once[i]) <= 1e-6);
  }
  SECTION("too-short channel rejected") {
    std::vector<double> x{1, 2, 3};
    CHECK_THROWS_AS(quartile_normalize<double>(x, 1, 3), ValueError);
  }
}

namespace {

EegRecording flat_recording(Dim channels, Dim total) {
  EegRecording rec;
  rec.channels = channels;
  rec.samples_per_channel = total;
  rec.sample_rate = 200.0f;
  rec.subject_id = "t";
  rec.data.assign(static_cast<std::size_t>(channels * total), 0.0f);
  for (Dim c = 0; c < channels; ++c)
    for (Dim s = 0; s < total; ++s) rec.at(c, s) = static_cast<float>(s);
  return rec;
}

}  // namespace

TEST_CASE("windowing") {
  auto rec = flat_recording(2, 100);
  CHECK(window(rec, 50, 50).size() == 2);
  CHECK(window(rec, 50, 25).size() == 3);  // starts 0, 25, 50
  CHECK(window(rec, 50, 200).size() == 1);  // stride past the end: one window at 0
  CHECK(window(rec, 120, 50).empty());      // longer than the recording
  auto ws = window(rec, 50, 25);
  CHECK(ws[1].start == 25);
  CHECK(ws[1].data[0] == 25.0f);
}

TEST_CASE("dataset split") {
  for (Dim n : {10, 100, 987}) {
    auto s = split_dataset(n, 42);
    CHECK(static_cast<Dim>(s.train.size() + s.val.size() + s.test.size()) == n);
    CHECK(std::abs(static_cast<double>(s.val.size()) - 0.1 * double(n)) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.test.size()) - 0.1 * double(n)) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.train.size()) - 0.8 * double(n)) <= 2.0);
    std::set<Dim> all;
    for (auto v : {&s.train, &s.val, &s.test}) all.insert(v->begin(), v->end());
    CHECK(static_cast<Dim>(all.size()) == n);  // disjoint and complete
  }
  auto a = split_dataset(100, 7);
  auto b = split_dataset(100, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
}

TEST_CASE("synthetic generation") {
  SECTION("determinism") {
    SynthSpec spec;
    spec.channels = 4;
    spec.duration_s = 10.0;
    spec.seed = 99;
    auto r1 = synth_generate(spec);
    auto r2 = synth_generate(spec);
    CHECK(r1.recording.data == r2.recording.data);
    CHECK(r1.annotations.size() == r2.annotations.size());
  }
  SECTION("event rate zero means no annotations and all-normal labels") {
    SynthSpec spec;
    spec.channels = 4;
    spec.duration_s = 10.0;
    spec.artifact_rate_per_min = 0.0;
    auto r = synth_generate(spec);
    CHECK(r.annotations.empty());
    auto lab = relabel(r.annotations, 0, 400, TaskScheme::bc, 4, 4);
    REQUIRE(lab.has_value());
    CHECK(lab->values[0] == 0);
  }
  SECTION("threshold detector recovers injected event spans") {
    SynthSpec spec;
    spec.channels = 3;
    spec.duration_s = 120.0;
    spec.seed = 1234;
    spec.artifact_rate_per_min = 2.0;
    spec.burst_amp = 10.0;
    auto r = synth_generate(spec);
    REQUIRE(!r.annotations.empty());

    // Per channel: robust sigma from the median absolute value, threshold at
    // 3 sigma, gaps up to one burst period bridged. Aggregate sample IoU
    // against the annotated spans must reach 0.99.
    const Dim total = r.recording.samples_per_channel;
    std::int64_t inter = 0, uni = 0;
    for (Dim c = 0; c < spec.channels; ++c) {
      std::vector<float> mag(static_cast<std::size_t>(total));
      for (Dim s = 0; s < total; ++s) mag[static_cast<std::size_t>(s)] = std::abs(r.recording.at(c, s));
      auto sorted = mag;
      std::sort(sorted.begin(), sorted.end());
      const double sigma = sorted[sorted.size() / 2] / 0.6745;
      const double thresh = 3.0 * sigma;

      std::vector<char> det(static_cast<std::size_t>(total), 0);
      Dim last_hit = -100000;
      for (Dim s = 0; s < total; ++s) {
        if (mag[static_cast<std::size_t>(s)] > thresh) {
          if (s - last_hit <= 10)
            for (Dim k = last_hit + 1; k < s; ++k) det[static_cast<std::size_t>(k)] = 1;
          det[static_cast<std::size_t>(s)] = 1;
          last_hit = s;
        }
      }
      std::vector<char> ann(static_cast<std::size_t>(total), 0);
      for (const auto& a : r.annotations) {
        if (a.channel != c) continue;
        for (Dim s = a.start; s < a.end; ++s) ann[static_cast<std::size_t>(s)] = 1;
      }
      for (Dim s = 0; s < total; ++s) {
        // Coverage of the annotated spans by the detector; isolated
        // background crossings outside events are not part of the score.
        if (ann[static_cast<std::size_t>(s)] && det[static_cast<std::size_t>(s)]) ++inter;
        if (ann[static_cast<std::size_t>(s)]) ++uni;
      }
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    CHECK(iou >= 0.99);
  }
}

TEST_CASE("relabel") {
  // Annotations on channels grouped in rows of 4: channel 2 -> row 0,
  // channel 5 -> row 1.
  const Dim channels = 8, patch_c = 4;
  std::vector<Annotation> anns{
      {2, 100, 200, 3},   // artifact type 3 on row 0
      {5, 150, 260, 7},   // artifact type 7 on row 1
  };

  SECTION("no annotations: bc negative, mc all-zero, mmc all-none") {
    auto bc = relabel({}, 0, 400, TaskScheme::bc, channels, patch_c);
    CHECK(bc->values[0] == 0);
    auto mc = relabel({}, 0, 400, TaskScheme::mc, channels, patch_c);
    for (int v : mc->values) CHECK(v == 0);
    auto mmc = relabel({}, 0, 400, TaskScheme::mmc, channels, patch_c);
    for (int v : mmc->values) CHECK(v == kArtifactTypes);
  }

  SECTION("any artifact anywhere makes bc positive") {
    auto bc = relabel({{2, 10, 11, 0}}, 0, 400, TaskScheme::bc, channels, patch_c);
    CHECK(bc->values[0] == 1);
  }

  SECTION("one-sample overlap counts") {
    auto bc = relabel({{0, 399, 500, 1}}, 0, 400, TaskScheme::bc, channels, patch_c);
    CHECK(bc->values[0] == 1);
    auto bc2 = relabel({{0, 400, 500, 1}}, 0, 400, TaskScheme::bc, channels, patch_c);
    CHECK(bc2->values[0] == 0);
  }

  SECTION("mc marks row and type") {
    auto mc = relabel(anns, 0, 400, TaskScheme::mc, channels, patch_c);
    CHECK(mc->values[0 * kArtifactTypes + 3] == 1);
    CHECK(mc->values[1 * kArtifactTypes + 7] == 1);
    int total = 0;
    for (int v : mc->values) total += v;
    CHECK(total == 2);
  }

  SECTION("mmc picks the most overlapping type per row") {
    std::vector<Annotation> overlap{
        {1, 0, 100, 2},   // 100 samples of type 2 on row 0
        {2, 0, 300, 4},   // 300 samples of type 4 on row 0: wins
    };
    auto mmc = relabel(overlap, 0, 400, TaskScheme::mmc, channels, patch_c);
    CHECK(mmc->values[0] == 4);
    CHECK(mmc->values[1] == kArtifactTypes);
  }

  SECTION("mcc drops mixtures and empty windows, keeps single types") {
    auto kept = relabel({{0, 10, 50, 2}}, 0, 400, TaskScheme::mcc, channels, patch_c);
    REQUIRE(kept.has_value());
    CHECK(kept->values[0] == 2);
    auto dropped = relabel({{0, 10, 50, 2}, {3, 60, 90, 4}}, 0, 400, TaskScheme::mcc, channels, patch_c);
    CHECK_FALSE(dropped.has_value());
    CHECK_FALSE(relabel({}, 0, 400, TaskScheme::mcc, channels, patch_c).has_value());
    // Types outside 0..4 are not part of the protocol.
    CHECK_FALSE(relabel({{0, 10, 50, 9}}, 0, 400, TaskScheme::mcc, channels, patch_c).has_value());
  }

  SECTION("bc is the OR over mc positives") {
    std::mt19937_64 rng(55);
    for (int it = 0; it < 50; ++it) {
      std::vector<Annotation> random_anns;
      std::uniform_int_distribution<int> n_ann(0, 5), ch(0, 7), ty(0, 12);
      std::uniform_int_distribution<Dim> pos(0, 600);
      const int n = n_ann(rng);
      for (int i = 0; i < n; ++i) {
        const Dim s = pos(rng);
        random_anns.push_back({ch(rng), s, s + 40, ty(rng)});
      }
      auto bc = relabel(random_anns, 100, 400, TaskScheme::bc, channels, patch_c);
      auto mc = relabel(random_anns, 100, 400, TaskScheme::mc, channels, patch_c);
      int any = 0;
      for (int v : mc->values) any |= v;
      CHECK(bc->values[0] == any);
    }
  }

  SECTION("slowing4 classes") {
    CHECK(relabel({}, 0, 100, TaskScheme::slowing4, channels, patch_c)->values[0] == 0);
    CHECK(relabel({{0, 10, 60, kSlowingType}}, 0, 100, TaskScheme::slowing4, channels, patch_c)->values[0] == 1);
    CHECK(relabel({{0, 10, 60, kSeizureType}}, 0, 100, TaskScheme::slowing4, channels, patch_c)->values[0] == 2);
    CHECK(relabel({{0, 10, 60, kSlowingType}, {1, 20, 70, kSeizureType}}, 0, 100,
                  TaskScheme::slowing4, channels, patch_c)->values[0] == 3);
  }
}

TEST_CASE("eegb round trip is bit-identical") {
  SynthSpec spec;
  spec.channels = 5;
  spec.duration_s = 3.0;
  spec.seed = 77;
  spec.subject_id = "subject-042";
  auto r = synth_generate(spec);

  const std::string path = "/tmp/bissm_test.eegb";
  write_eegb(r.recording, path);
  auto back = read_eegb(path);
  CHECK(back.channels == r.recording.channels);
  CHECK(back.sample_rate == r.recording.sample_rate);
  CHECK(back.samples_per_channel == r.recording.samples_per_channel);
  CHECK(back.subject_id == r.recording.subject_id);
  REQUIRE(back.data.size() == r.recording.data.size());
  for (std::size_t i = 0; i < back.data.size(); ++i) REQUIRE(back.data[i] == r.recording.data[i]);

  // Raw bytes survive a second write unchanged.
  const std::string path2 = "/tmp/bissm_test2.eegb";
  write_eegb(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("annotation sidecar round trip") {
  std::vector<Annotation> anns{{0, 10, 20, 3}, {4, 100, 250, 12}, {2, 30, 90, kSlowingType}};
  const std::string path = "/tmp/bissm_test.ann";
  write_annotations(anns, path);
  auto back = read_annotations(path);
  REQUIRE(back.size() == anns.size());
  for (std::size_t i = 0; i < anns.size(); ++i) {
    CHECK(back[i].channel == anns[i].channel);
    CHECK(back[i].start == anns[i].start);
    CHECK(back[i].end == anns[i].end);
    CHECK(back[i].type == anns[i].type);
  }
  std::remove(path.c_str());
}

TEST_CASE("csv import") {
  const std::string path = "/tmp/bissm_test.csv";
  {
    std::ofstream os(path);
    os << "1.0,2.0\n3.0,4.0\n5.0,6.0\n";
  }
  auto rec = read_csv_recording(path, 100.0f);
  CHECK(rec.channels == 2);
  CHECK(rec.samples_per_channel == 3);
  CHECK(rec.at(0, 1) == 3.0f);
  CHECK(rec.at(1, 2) == 6.0f);
  std::remove(path.c_str());
}
