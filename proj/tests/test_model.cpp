#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "bissm/checkpoint.hpp"
#include "bissm/model.hpp"
#include "bissm/train.hpp"
#include "oracles.hpp"

using namespace bissm;
using Catch::Approx;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg = ModelConfig::preset(Variant::custom);
  cfg.num_blocks = 1;
  cfg.embed_dim = 8;
  cfg.state_size = 4;
  cfg.patch_c = 2;
  cfg.patch_t = 4;
  cfg.input_channels = 4;
  cfg.input_samples = 8;  // 2 x 2 = 4 tokens
  cfg.head_hidden = 16;
  return cfg;
}

}  // namespace

TEST_CASE("token counts") {
  SECTION("4 channels x 64 samples with 4x32 patches gives 2 tokens") {
    ModelConfig cfg = ModelConfig::preset(Variant::tiny);
    CHECK(cfg.num_tokens(4, 64) == 2);
  }
  SECTION("defaults give 5 x 50 = 250") {
    ModelConfig cfg = ModelConfig::preset(Variant::tiny);
    CHECK(cfg.num_tokens() == 250);
  }
  SECTION("padding rounds up") {
    ModelConfig cfg = ModelConfig::preset(Variant::tiny);
    CHECK(cfg.num_tokens(21, 1601) == 6 * 51);
  }
}

TEST_CASE("tokenize") {
  auto cfg = micro_config();
  auto model = Model<double>::init(cfg, 1);
  std::mt19937_64 rng(2);
  auto x = Tensor<double>::randn({cfg.input_channels, cfg.input_samples}, rng);

  SECTION("zero conv weights and positions give all-zero tokens") {
    for (auto& v : model.patch_w.values_mut()) v = 0.0;
    for (auto& v : model.patch_b.values_mut()) v = 0.0;
    for (auto& v : model.pos_embed.values_mut()) v = 0.0;
    auto grid = model.tokenize(x);
    for (double v : grid.tokens.values()) CHECK(v == 0.0);
  }

  SECTION("geometry mismatch is an error") {
    auto bad = Tensor<double>::zeros({cfg.input_channels, cfg.input_samples * 2});
    CHECK_THROWS_AS(model.tokenize(bad), ShapeError);
  }

  SECTION("token grid shape") {
    auto grid = model.tokenize(x);
    CHECK(grid.tokens.dim(0) == cfg.num_tokens());
    CHECK(grid.tokens.dim(1) == cfg.embed_dim);
    CHECK(grid.rows_c == 2);
    CHECK(grid.cols_t == 2);
  }
}

TEST_CASE("mask sampling") {
  SECTION("floor(N * ratio) positions") {
    for (Dim n : {10, 100, 250}) {
      auto m = sample_mask(n, 0.6, 7);
      CHECK(static_cast<Dim>(m.indices.size()) == static_cast<Dim>(std::floor(0.6 * double(n))));
      std::set<Dim> uniq(m.indices.begin(), m.indices.end());
      CHECK(uniq.size() == m.indices.size());
      for (Dim idx : m.indices) {
        CHECK(idx >= 0);
        CHECK(idx < n);
      }
    }
  }
  SECTION("ratio 0 is empty") { CHECK(sample_mask(100, 0.0, 3).indices.empty()); }
  SECTION("same seed, same set") {
    auto a = sample_mask(50, 0.6, 99);
    auto b = sample_mask(50, 0.6, 99);
    CHECK(a.indices == b.indices);
  }
  SECTION("ratio 1 rejected") { CHECK_THROWS_AS(sample_mask(10, 1.0, 0), ValueError); }
}

TEST_CASE("mask application") {
  auto cfg = micro_config();
  auto model = Model<double>::init(cfg, 3);
  std::mt19937_64 rng(4);
  auto x = Tensor<double>::randn({cfg.input_channels, cfg.input_samples}, rng);
  auto grid = model.tokenize(x);
  const Dim n = grid.tokens.dim(0);

  SECTION("masked rows have zero norm, unmasked rows are untouched bitwise") {
    MaskSet m;
    m.indices = {1, 3};
    auto masked = model.apply_mask(grid, m);
    for (Dim r = 0; r < n; ++r) {
      for (Dim j = 0; j < cfg.embed_dim; ++j) {
        const double v = masked.values()[r * cfg.embed_dim + j];
        if (r == 1 || r == 3) CHECK(v == 0.0);
        else CHECK(v == grid.tokens.values()[r * cfg.embed_dim + j]);
      }
    }
  }

  SECTION("all but one row masked") {
    MaskSet m;
    for (Dim i = 0; i + 1 < n; ++i) m.indices.push_back(i);
    auto masked = model.apply_mask(grid, m);
    Dim nonzero_rows = 0;
    for (Dim r = 0; r < n; ++r) {
      double norm = 0;
      for (Dim j = 0; j < cfg.embed_dim; ++j)
        norm += std::abs(masked.values()[r * cfg.embed_dim + j]);
      if (norm > 0) ++nonzero_rows;
    }
    CHECK(nonzero_rows == 1);
  }

  SECTION("empty mask is the identity") {
    auto masked = model.apply_mask(grid, MaskSet{});
    for (Dim i = 0; i < masked.numel(); ++i)
      CHECK(masked.values()[i] == grid.tokens.values()[i]);
  }

  SECTION("masked content independence") {
    // Changing the original signal under a masked patch leaves the encoder
    // input unchanged.
    MaskSet m;
    m.indices = {0};
    auto masked1 = model.apply_mask(grid, m);

    auto x2 = Tensor<double>::from_vector(
        x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
    // Patch 0 covers channels 0..1, samples 0..3.
    for (Dim c = 0; c < 2; ++c)
      for (Dim t = 0; t < 4; ++t)
        x2.values_mut()[c * cfg.input_samples + t] += 100.0;
    auto masked2 = model.apply_mask(model.tokenize(x2), m);
    for (Dim i = 0; i < masked1.numel(); ++i)
      CHECK(masked1.values()[i] == masked2.values()[i]);
  }
}

TEST_CASE("encode") {
  auto cfg = micro_config();
  cfg.num_blocks = 2;

  SECTION("zero out-projections reduce to the final norm of the input") {
    auto model = Model<double>::init(cfg, 5);
    for (auto& b : model.blocks) {
      for (auto& v : b.fwd.w_out.values_mut()) v = 0.0;
      for (auto& v : b.bwd.w_out.values_mut()) v = 0.0;
    }
    std::mt19937_64 rng(6);
    auto tokens = Tensor<double>::randn({cfg.num_tokens(), cfg.embed_dim}, rng);
    auto enc = model.encode(tokens);
    auto expect = rms_norm(tokens, model.final_norm_w);
    for (Dim i = 0; i < enc.numel(); ++i) CHECK(enc.values()[i] == expect.values()[i]);
  }

  SECTION("output shape equals input shape and tiny applies 2 blocks") {
    auto tiny = ModelConfig::preset(Variant::tiny);
    CHECK(tiny.num_blocks == 2);
    auto model = Model<double>::init(cfg, 7);
    CHECK(model.blocks.size() == 2);
    std::mt19937_64 rng(8);
    auto tokens = Tensor<double>::randn({cfg.num_tokens(), cfg.embed_dim}, rng);
    auto enc = model.encode(tokens);
    CHECK(enc.shape() == tokens.shape());
  }
}

TEST_CASE("decode") {
  auto cfg = micro_config();
  auto model = Model<double>::init(cfg, 9);

  SECTION("shape contract") {
    std::mt19937_64 rng(10);
    auto enc = Tensor<double>::randn({cfg.num_tokens(), cfg.embed_dim}, rng);
    auto rec = model.decode(enc);
    CHECK(rec.dim(0) == cfg.num_tokens());
    CHECK(rec.dim(1) == cfg.patch_len());
  }

  SECTION("zero weights give zero reconstruction") {
    for (Tensor<double>* t : {&model.dec_c1_w, &model.dec_c1_b, &model.dec_c2_w, &model.dec_c2_b,
                              &model.dec_lin_w, &model.dec_lin_b})
      for (auto& v : t->values_mut()) v = 0.0;
    std::mt19937_64 rng(11);
    auto enc = Tensor<double>::randn({cfg.num_tokens(), cfg.embed_dim}, rng);
    auto rec = model.decode(enc);
    for (double v : rec.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("patch round trip inverts the time-major order") {
  std::mt19937_64 rng(12);
  const Dim c = 6, t = 16, p = 2, q = 4;
  auto x = Tensor<double>::randn({c, t}, rng);
  auto patches = signal_to_patches<double>(x.values(), c, t, p, q);
  auto back = patches_to_signal<double>(patches, c, t, p, q);
  for (Dim i = 0; i < c * t; ++i) CHECK(back[static_cast<std::size_t>(i)] == x.values()[i]);

  SECTION("with padding") {
    const Dim c2 = 5, t2 = 15;
    auto x2 = Tensor<double>::randn({c2, t2}, rng);
    auto patches2 = signal_to_patches<double>(x2.values(), c2, t2, p, q);
    CHECK(patches2.size() == static_cast<std::size_t>(3 * 4 * p * q));
    auto back2 = patches_to_signal<double>(patches2, c2, t2, p, q);
    for (Dim i = 0; i < c2 * t2; ++i) CHECK(back2[static_cast<std::size_t>(i)] == x2.values()[i]);
  }
}

TEST_CASE("classify arities") {
  auto cfg = micro_config();
  std::mt19937_64 rng(13);

  auto check_scheme = [&](TaskScheme scheme, Dim rows, int cols) {
    auto model = Model<double>::init(cfg, 14, scheme);
    auto enc = Tensor<double>::randn({cfg.num_tokens(), cfg.embed_dim}, rng);
    auto scores = model.classify(enc, cfg.grid_c(cfg.input_channels));
    CHECK(scores.dim(0) == rows);
    CHECK(scores.dim(1) == cols);
  };

  check_scheme(TaskScheme::bc, 1, 2);          // binary: two logits
  check_scheme(TaskScheme::mcc, 1, 5);         // five artifact classes
  check_scheme(TaskScheme::slowing4, 1, 4);
  check_scheme(TaskScheme::mc, 2, 13);         // per channel row
  check_scheme(TaskScheme::mmc, 2, 13);

  SECTION("headless model refuses to classify") {
    auto model = Model<double>::init(cfg, 15);
    auto enc = Tensor<double>::zeros({cfg.num_tokens(), cfg.embed_dim});
    CHECK_THROWS_AS(model.classify(enc, 2), ValueError);
  }
}

TEST_CASE("mamba-enhanced head has more parameters than the linear head") {
  auto cfg = micro_config();
  auto linear = Model<double>::init(cfg, 16, TaskScheme::bc);
  cfg.head = HeadKind::mamba_enhanced;
  auto enhanced = Model<double>::init(cfg, 16, TaskScheme::bc);
  CHECK(enhanced.parameter_count() > linear.parameter_count());
}

TEST_CASE("end-to-end gradient check on a 2-token instance") {
  ModelConfig cfg = ModelConfig::preset(Variant::custom);
  cfg.num_blocks = 1;
  cfg.embed_dim = 6;
  cfg.state_size = 3;
  cfg.patch_c = 4;
  cfg.patch_t = 32;
  cfg.input_channels = 4;
  cfg.input_samples = 64;  // exactly 2 tokens
  auto model = Model<double>::init(cfg, 17);
  CHECK(cfg.num_tokens() == 2);

  std::mt19937_64 rng(18);
  auto x = Tensor<double>::randn({cfg.input_channels, cfg.input_samples}, rng);
  auto target = Tensor<double>::from_vector(
      {cfg.num_tokens(), cfg.patch_len()},
      signal_to_patches<double>(x.values(), cfg.input_channels, cfg.input_samples, cfg.patch_c,
                                cfg.patch_t));
  MaskSet mask;
  mask.indices = {1};

  std::vector<Tensor<double>> params;
  model.for_each_param([&](const std::string&, Tensor<double>& t) { params.push_back(t); });

  auto make_loss = [&] {
    auto grid = model.tokenize(x);
    auto masked = model.apply_mask(grid, mask);
    auto pred = model.decode(model.encode(masked));
    return masked_loss(pred, target, mask);
  };
  auto rep = oracle::fd_check(params, make_loss, 1e-5, /*max_coords=*/24);
  CHECK(rep.max_err < 1e-4);
  CHECK(rep.checked > 300);
}

TEST_CASE("checkpoint round trip reproduces forward outputs bitwise") {
  auto cfg = micro_config();
  auto model = Model<float>::init(cfg, 20, TaskScheme::bc);
  std::mt19937_64 rng(21);
  auto x = Tensor<float>::randn({cfg.input_channels, cfg.input_samples}, rng);

  NoGradGuard ng;
  auto grid = model.tokenize(x);
  auto rec1 = model.decode(model.encode(grid.tokens));
  auto cls1 = model.classify(model.encode(grid.tokens), grid.rows_c);

  const std::string path = "/tmp/bissm_test_ckpt.bin";
  save_checkpoint(model, path, TaskScheme::bc);
  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.scheme == TaskScheme::bc);

  auto grid2 = loaded.model.tokenize(x);
  auto rec2 = loaded.model.decode(loaded.model.encode(grid2.tokens));
  auto cls2 = loaded.model.classify(loaded.model.encode(grid2.tokens), grid2.rows_c);
  REQUIRE(rec1.numel() == rec2.numel());
  for (Dim i = 0; i < rec1.numel(); ++i) REQUIRE(rec1.values()[i] == rec2.values()[i]);
  for (Dim i = 0; i < cls1.numel(); ++i) REQUIRE(cls1.values()[i] == cls2.values()[i]);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corrupted files") {
  const std::string path = "/tmp/bissm_bad_ckpt.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE0000";
  }
  CHECK_THROWS_AS(load_checkpoint<float>(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("shape stability across geometries") {
  for (auto [c, t] : std::vector<std::pair<Dim, Dim>>{{4, 64}, {20, 1600}, {7, 100}, {1, 32}}) {
    ModelConfig cfg = ModelConfig::preset(Variant::custom);
    cfg.num_blocks = 1;
    cfg.embed_dim = 8;
    cfg.state_size = 4;
    cfg.input_channels = c;
    cfg.input_samples = t;
    auto model = Model<float>::init(cfg, 22);
    std::mt19937_64 rng(23);
    auto x = Tensor<float>::randn({c, t}, rng);
    NoGradGuard ng;
    auto grid = model.tokenize(x);
    const Dim expect = ((c + cfg.patch_c - 1) / cfg.patch_c) * ((t + cfg.patch_t - 1) / cfg.patch_t);
    CHECK(grid.tokens.dim(0) == expect);
    CHECK(model.encode(grid.tokens).dim(0) == expect);
  }
}
