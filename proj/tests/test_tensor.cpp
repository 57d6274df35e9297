#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "bissm/ops.hpp"
#include "bissm/optim.hpp"
#include "bissm/tensor.hpp"
#include "oracles.hpp"

using namespace bissm;
using Catch::Approx;

namespace {

Tensor<double> leaf(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  auto t = Tensor<double>::randn(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("elementwise op values") {
  auto x = Tensor<double>::from_vector({3}, {0.0, 1.0, -1.0});
  CHECK(softplus(x).values()[0] == Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(silu(x).values()[0] == Approx(0.0).margin(1e-15));
  CHECK(gelu(x).values()[0] == Approx(0.0).margin(1e-15));
  CHECK(gelu(x).values()[1] == Approx(0.8413447460685429).epsilon(1e-9));

  auto r = reverse_along_axis(Tensor<double>::from_vector({3}, {1, 2, 3}), 0);
  CHECK(r.values()[0] == 3);
  CHECK(r.values()[1] == 2);
  CHECK(r.values()[2] == 1);
}

TEST_CASE("shape mismatches raise ShapeError") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({3, 3});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, Tensor<double>::zeros({2, 2})), ShapeError);
  CHECK_THROWS_AS(rms_norm(a, Tensor<double>::zeros({2})), ShapeError);
  CHECK_THROWS_AS(gather_rows(a, {5}), ShapeError);
}

TEST_CASE("backward on linear map and exp") {
  auto w = Tensor<double>::from_vector({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  auto x = Tensor<double>::from_vector({2}, {3.0, 4.0});
  auto loss = sum(mul(w, x));
  backward(loss);
  CHECK(w.grad()[0] == Approx(3.0));
  CHECK(w.grad()[1] == Approx(4.0));

  auto v = Tensor<double>::from_vector({}, {1.0});
  v.set_requires_grad(true);
  auto l2 = exp(v);
  backward(l2);
  CHECK(v.grad()[0] == Approx(std::exp(1.0)).epsilon(1e-12));
}

TEST_CASE("repeated backward accumulates") {
  auto w = Tensor<double>::from_vector({1}, {2.0});
  w.set_requires_grad(true);
  auto loss = sum(mul(w, w));
  backward(loss);
  backward(loss);
  CHECK(w.grad()[0] == Approx(8.0));  // 2 * dL/dw, dL/dw = 2w = 4
}

TEST_CASE("non-scalar backward rejected") {
  auto w = Tensor<double>::zeros({2});
  w.set_requires_grad(true);
  auto y = mul(w, w);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("finite differences across the op set") {
  std::mt19937_64 rng(42);

  SECTION("matmul + bias add + gelu") {
    auto a = leaf({3, 4}, rng);
    auto b = leaf({4, 5}, rng);
    auto bias = leaf({5}, rng);
    auto rep = oracle::fd_check({a, b, bias},
                                [&] { return mean(gelu(add(matmul(a, b), bias))); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("mul broadcast + silu + softplus + exp") {
    auto a = leaf({4, 3}, rng);
    auto b = leaf({3}, rng);
    auto rep = oracle::fd_check({a, b}, [&] {
      return mean(add(silu(mul(a, b)), softplus(exp(scale(a, 0.3)))));
    });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("rms_norm") {
    auto x = leaf({5, 6}, rng);
    auto w = leaf({6}, rng);
    auto rep = oracle::fd_check({x, w}, [&] { return mean(rms_norm(x, w)); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("reverse, gather, zero_rows, slice") {
    auto x = leaf({6, 4}, rng);
    auto rep = oracle::fd_check({x}, [&] {
      auto r = reverse_along_axis(x, 0);
      auto g = gather_rows(r, {0, 2, 2, 5});
      auto z = zero_rows(g, {1});
      return mean(slice_cols(z, 1, 3));
    });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("conv2d_patchify") {
    auto x = leaf({4, 6}, rng);
    auto w = leaf({3, 4}, rng);  // kernel 2x2 -> patch length 4
    auto b = leaf({3}, rng);
    auto rep = oracle::fd_check({x, w, b}, [&] {
      return mean(conv2d_patchify(x, w, b, 2, 2));
    });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("conv1d depthwise causal") {
    auto x = leaf({7, 3}, rng);
    auto w = leaf({3, 4}, rng);
    auto rep = oracle::fd_check({x, w}, [&] { return mean(conv1d_depthwise_causal(x, w)); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("conv1d same") {
    auto x = leaf({6, 3}, rng);
    auto w = leaf({2, 3, 3}, rng);
    auto b = leaf({2}, rng);
    auto rep = oracle::fd_check({x, w, b}, [&] { return mean(conv1d_same(x, w, b, 3)); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("smooth_l1 straddling the corner") {
    auto p = leaf({8}, rng, 2.0);
    auto t = leaf({8}, rng, 2.0);
    auto rep = oracle::fd_check({p, t}, [&] { return mean(smooth_l1(p, t, 1.0)); });
    CHECK(rep.max_err < 1e-3);  // corner coords are one-sided
  }
  SECTION("softmax cross entropy") {
    auto z = leaf({4, 3}, rng);
    auto rep = oracle::fd_check({z}, [&] { return softmax_cross_entropy(z, {0, 2, 1, 2}); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("bce with logits") {
    auto z = leaf({3, 4}, rng);
    auto y = Tensor<double>::from_vector({3, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1});
    auto rep = oracle::fd_check({z}, [&] { return bce_with_logits(z, y); });
    CHECK(rep.max_err < 1e-4);
  }
  SECTION("reductions") {
    auto x = leaf({5, 3}, rng);
    auto rep = oracle::fd_check({x}, [&] {
      return add(mean(mean_rows(x)), mean(channel_row_mean(x, 1)));
    });
    CHECK(rep.max_err < 1e-4);
  }
}

TEST_CASE("conv2d patch partition preserves mass") {
  // All-ones kernel, zero bias: summed patch outputs equal the input sum.
  std::mt19937_64 rng(7);
  auto x = Tensor<double>::randn({8, 12}, rng);
  for (auto& v : x.values_mut()) v = std::abs(v);
  auto w = Tensor<double>::full({1, 8}, 1.0);  // 2x4 kernel
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d_patchify(x, w, b, 2, 4);
  CHECK(y.dim(0) == 4 * 3);
  CHECK(sum(y).item() == Approx(sum(x).item()).epsilon(1e-12));
}

TEST_CASE("no-grad mode skips graph construction") {
  auto w = Tensor<double>::from_vector({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  NoGradGuard ng;
  auto y = mul(w, w);
  CHECK_FALSE(y.tracked());
}

TEST_CASE("adam") {
  SECTION("zero gradient is a fixed point") {
    auto p = Tensor<double>::from_vector({2}, {1.5, -0.5});
    p.set_requires_grad(true);
    auto loss = scale(sum(mul(p, Tensor<double>::zeros({2}))), 1.0);
    Adam<double> opt;
    opt.add_group({p});
    opt.zero_grad();
    backward(loss);
    opt.step(1e-3);
    CHECK(p.values()[0] == 1.5);
    CHECK(p.values()[1] == -0.5);
  }
  SECTION("single step matches hand evaluation") {
    // g = 1, m = v = 0, betas (0.9, 0.999), lr 1e-3 -> update ~ -1e-3.
    auto p = Tensor<double>::from_vector({1}, {0.0});
    p.set_requires_grad(true);
    auto x = Tensor<double>::from_vector({1}, {1.0});
    auto loss = sum(mul(p, x));
    Adam<double> opt;
    opt.add_group({p});
    opt.zero_grad();
    backward(loss);
    opt.step(1e-3);
    CHECK(p.values()[0] == Approx(-1e-3).epsilon(1e-6));
  }
  SECTION("NaN gradient aborts the step") {
    auto p = Tensor<double>::from_vector({1}, {1.0});
    p.set_requires_grad(true);
    auto bad = Tensor<double>::from_vector({1}, {0.0});
    auto loss = sum(mul(exp(scale(p, 1000.0)), bad));  // inf * 0 = nan forward
    Adam<double> opt;
    opt.add_group({p});
    opt.zero_grad();
    backward(loss);
    CHECK_THROWS_AS(opt.step(1e-3), NumericError);
    CHECK(p.values()[0] == 1.0);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-4) == Approx(1e-4));
  CHECK(cosine_lr(100, 100, 1e-4) == Approx(0.0).margin(1e-20));
  CHECK(cosine_lr(50, 100, 1e-4) == Approx(0.5e-4).epsilon(1e-12));
  CHECK(cosine_lr(120, 100, 1e-4) == 0.0);  // clamped past the end
}

TEST_CASE("forward determinism within one build") {
  auto run = [] {
    std::mt19937_64 rng(123);
    auto a = Tensor<float>::randn({8, 8}, rng);
    auto b = Tensor<float>::randn({8, 8}, rng);
    return matmul(gelu(a), silu(b));
  };
  auto y1 = run();
  auto y2 = run();
  for (Dim i = 0; i < y1.numel(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}
