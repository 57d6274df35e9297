#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bissm/ops.hpp"
#include "bissm/tensor.hpp"

namespace bissm {

enum class Direction { forward, backward };

/// Exact zero-order-hold discretization of dh/dt = a h + b x under a
/// piecewise-constant input held for `delta`. Stable for a < 0; the a == 0
/// case takes the analytic limit b_d = delta * b.
template <typename T>
std::pair<T, T> zoh_discretize(T a, T delta, T b) {
  const T x = delta * a;
  const T a_d = std::exp(x);
  const T b_d = a == T(0) ? delta * b : static_cast<T>(std::expm1(x)) / a * b;
  return {a_d, b_d};
}

struct SsmDims {
  Dim d = 0;        // block embedding width
  Dim d_inner = 0;  // expanded inner width
  Dim n = 0;        // state size per inner channel
  Dim d_rank = 0;   // bottleneck of the delta projection
  Dim conv_k = 4;   // depthwise conv width

  static SsmDims make(Dim d, Dim n, Dim expansion = 2) {
    SsmDims s;
    s.d = d;
    s.d_inner = expansion * d;
    s.n = n;
    s.d_rank = (d + 15) / 16;
    return s;
  }
};

/// Parameters of one selective-scan unit. A = -exp(a_log) stays negative
/// elementwise, so every discretized a_d lies in (0, 1) for positive delta.
template <typename T>
struct SsmParams {
  SsmDims dims;
  Tensor<T> a_log;         // (d_inner x n)
  Tensor<T> w_delta_down;  // (d_inner x d_rank)
  Tensor<T> w_delta_up;    // (d_rank x d_inner)
  Tensor<T> delta_bias;    // (d_inner)
  Tensor<T> w_b;           // (d_inner x n)
  Tensor<T> w_c;           // (d_inner x n)
  Tensor<T> d_skip;        // (d_inner)
  Tensor<T> w_in;          // (d x 2 d_inner)
  Tensor<T> conv_w;        // (d_inner x conv_k)
  Tensor<T> w_out;         // (d_inner x d)

  static SsmParams init(const SsmDims& dims, std::mt19937_64& rng) {
    SsmParams p;
    p.dims = dims;
    const Dim di = dims.d_inner, n = dims.n, r = dims.d_rank, d = dims.d;

    // a_log = log(1..n) per state dim spreads a_d across slow and fast decay.
    p.a_log = Tensor<T>::zeros({di, n});
    {
      auto v = p.a_log.values_mut();
      for (Dim c = 0; c < di; ++c)
        for (Dim s = 0; s < n; ++s) v[static_cast<std::size_t>(c * n + s)] = static_cast<T>(std::log(double(s + 1)));
    }

    auto fan_in_uniform = [&rng](Shape shape, Dim fan_in) {
      const T bound = static_cast<T>(1.0 / std::sqrt(double(fan_in)));
      return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
    };
    p.w_delta_down = fan_in_uniform({di, r}, di);
    p.w_delta_up = fan_in_uniform({r, di}, r);

    // Bias chosen so softplus(bias) lands in [1e-3, 1e-1].
    p.delta_bias = Tensor<T>::zeros({di});
    {
      std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
      auto v = p.delta_bias.values_mut();
      for (Dim c = 0; c < di; ++c) {
        const double dt = std::exp(u(rng));
        v[static_cast<std::size_t>(c)] = static_cast<T>(std::log(std::expm1(dt)));
      }
    }

    p.w_b = fan_in_uniform({di, n}, di);
    p.w_c = fan_in_uniform({di, n}, di);
    p.d_skip = Tensor<T>::full({di}, T(1));
    p.w_in = fan_in_uniform({d, 2 * di}, d);
    p.conv_w = fan_in_uniform({di, dims.conv_k}, dims.conv_k);
    p.w_out = fan_in_uniform({di, d}, di);

    for (Tensor<T>* t : {&p.a_log, &p.w_delta_down, &p.w_delta_up, &p.delta_bias, &p.w_b, &p.w_c,
                         &p.d_skip, &p.w_in, &p.conv_w, &p.w_out})
      t->set_requires_grad(true);
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".a_log", a_log);
    fn(prefix + ".w_delta_down", w_delta_down);
    fn(prefix + ".w_delta_up", w_delta_up);
    fn(prefix + ".delta_bias", delta_bias);
    fn(prefix + ".w_b", w_b);
    fn(prefix + ".w_c", w_c);
    fn(prefix + ".d_skip", d_skip);
    fn(prefix + ".w_in", w_in);
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".w_out", w_out);
  }
};

// MAC convention for the recurrence, kept in sync with the analytic model:
// 5 per (t, channel, state) plus 1 skip MAC per (t, channel).
inline std::int64_t scan_macs(Dim len, Dim d_inner, Dim n) {
  return len * d_inner * n * 5 + len * d_inner;
}

/// Input-conditioned linear recurrence. For each token t and inner channel c:
///   a_d, b_d = zoh(A[c,s], delta[t,c]);  h = a_d h + b_d B[t,s] u[t,c]
///   y[t,c]   = sum_s C[t,s] h[c,s] + d_skip[c] u[t,c]
/// Work and state are O(L * d_inner * n); the sweep itself is sequential.
template <typename T>
Tensor<T> scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b_proj,
                    const Tensor<T>& c_proj, const Tensor<T>& a_log, const Tensor<T>& d_skip) {
  if (u.rank() != 2) throw ShapeError("scan_core: u must be (L x d_inner)");
  const Dim len = u.dim(0), di = u.dim(1);
  if (len < 1) throw ShapeError("scan_core: empty sequence");
  detail::require_same_shape(u, delta, "scan_core(delta)");
  if (b_proj.rank() != 2 || b_proj.dim(0) != len) throw ShapeError("scan_core: B must be (L x n)");
  const Dim n = b_proj.dim(1);
  detail::require_same_shape(b_proj, c_proj, "scan_core(C)");
  if (a_log.rank() != 2 || a_log.dim(0) != di || a_log.dim(1) != n)
    throw ShapeError("scan_core: a_log must be (d_inner x n)");
  if (d_skip.rank() != 1 || d_skip.dim(0) != di) throw ShapeError("scan_core: d_skip must be (d_inner)");
  count_macs(scan_macs(len, di, n));

  const bool need_grad = grad_enabled() && (u.tracked() || delta.tracked() || b_proj.tracked() ||
                                            c_proj.tracked() || a_log.tracked() || d_skip.tracked());

  // A = -exp(a_log), computed once per call.
  std::vector<T> a_mat(static_cast<std::size_t>(di * n));
  {
    const T* al = a_log.values().data();
    for (std::size_t i = 0; i < a_mat.size(); ++i) a_mat[i] = -std::exp(al[i]);
  }

  // Full state history is only materialized when the backward pass needs it.
  std::vector<T> h_hist;
  if (need_grad) h_hist.resize(static_cast<std::size_t>(len * di * n));

  auto out = Tensor<T>::zeros({len, di});
  {
    const T* uv = u.values().data();
    const T* dv = delta.values().data();
    const T* bv = b_proj.values().data();
    const T* cv = c_proj.values().data();
    const T* sv = d_skip.values().data();
    T* yv = out.values_mut().data();
    std::vector<T> h(static_cast<std::size_t>(di * n), T(0));
    for (Dim t = 0; t < len; ++t) {
      const T* brow = bv + t * n;
      const T* crow = cv + t * n;
      for (Dim c = 0; c < di; ++c) {
        const T dt = dv[t * di + c];
        const T x = uv[t * di + c];
        const T* arow = a_mat.data() + c * n;
        T* hrow = h.data() + c * n;
        T acc = 0;
        for (Dim s = 0; s < n; ++s) {
          const T a = arow[s];
          const T em1 = static_cast<T>(std::expm1(dt * a));
          const T hv = (T(1) + em1) * hrow[s] + em1 / a * brow[s] * x;
          hrow[s] = hv;
          acc += crow[s] * hv;
        }
        yv[t * di + c] = acc + sv[c] * x;
        if (need_grad)
          std::copy(hrow, hrow + n, h_hist.data() + (t * di + c) * n);
      }
    }
  }

  if (!need_grad) return out;

  auto result = detail::make_op_result<T>(
      {len, di},
      {u.impl(), delta.impl(), b_proj.impl(), c_proj.impl(), a_log.impl(), d_skip.impl()},
      [ui = u.impl(), di_ = delta.impl(), bi = b_proj.impl(), ci = c_proj.impl(),
       ai = a_log.impl(), si = d_skip.impl(), a_mat = std::move(a_mat), h_hist = std::move(h_hist),
       len, di, n](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* uv = ui->value.data();
        const T* dv = di_->value.data();
        const T* bv = bi->value.data();
        const T* cv = ci->value.data();
        const T* sv = si->value.data();

        const bool want_u = ui->tracked;
        const bool want_delta = di_->tracked;
        const bool want_b = bi->tracked;
        const bool want_c = ci->tracked;
        const bool want_a = ai->tracked;
        const bool want_skip = si->tracked;
        if (want_u) ui->ensure_grad();
        if (want_delta) di_->ensure_grad();
        if (want_b) bi->ensure_grad();
        if (want_c) ci->ensure_grad();
        if (want_a) ai->ensure_grad();
        if (want_skip) si->ensure_grad();
        T* gu = want_u ? ui->grad.data() : nullptr;
        T* gdelta = want_delta ? di_->grad.data() : nullptr;
        T* gb = want_b ? bi->grad.data() : nullptr;
        T* gc = want_c ? ci->grad.data() : nullptr;
        T* ga = want_a ? ai->grad.data() : nullptr;
        T* gskip = want_skip ? si->grad.data() : nullptr;

        // gh carries dLoss/dh[t] back through the recurrence.
        std::vector<T> gh(static_cast<std::size_t>(di * n), T(0));
        for (Dim t = len - 1; t >= 0; --t) {
          const T* brow = bv + t * n;
          const T* crow = cv + t * n;
          for (Dim c = 0; c < di; ++c) {
            const T dt = dv[t * di + c];
            const T x = uv[t * di + c];
            const T gy = g[t * di + c];
            const T* arow = a_mat.data() + c * n;
            const T* hrow = h_hist.data() + (t * di + c) * n;
            const T* hprev = t > 0 ? h_hist.data() + ((t - 1) * di + c) * n : nullptr;
            T* ghrow = gh.data() + c * n;

            if (want_skip) gskip[c] += gy * x;
            T acc_gu = want_u ? gy * sv[c] : T(0);
            T acc_gdt = 0;
            for (Dim s = 0; s < n; ++s) {
              const T a = arow[s];
              const T em1 = static_cast<T>(std::expm1(dt * a));
              const T e = T(1) + em1;
              const T bdcoef = em1 / a;
              const T hp = hprev ? hprev[s] : T(0);
              const T ghv = ghrow[s] + crow[s] * gy;
              if (want_c) gc[t * n + s] += gy * hrow[s];

              // h = e * hp + bdcoef * B * x
              const T ge = ghv * hp;
              const T gbdcoef = ghv * brow[s] * x;
              if (want_b) gb[t * n + s] += ghv * bdcoef * x;
              if (want_u) acc_gu += ghv * bdcoef * brow[s];
              if (want_delta || want_a) {
                // d e/d dt = a e;  d bdcoef/d dt = e
                // d e/d a  = dt e; d bdcoef/d a = (dt e a - em1) / a^2
                acc_gdt += ge * a * e + gbdcoef * e;
                if (want_a) {
                  const T da = ge * dt * e + gbdcoef * (dt * e * a - em1) / (a * a);
                  ga[c * n + s] += da * a;  // dA/da_log = -exp(a_log) = A
                }
              }
              ghrow[s] = ghv * e;
            }
            if (want_u) gu[t * di + c] += acc_gu;
            if (want_delta) gdelta[t * di + c] += acc_gdt;
          }
        }
      });
  std::copy(out.values().begin(), out.values().end(), result.values_mut().begin());
  return result;
}

/// Input-dependent scan: delta, B, C are projections of the inner sequence.
/// For Direction::backward the sequence is reversed on entry and the output
/// re-reversed on exit.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x_inner, const SsmParams<T>& p,
                         Direction dir = Direction::forward) {
  if (x_inner.rank() != 2 || x_inner.dim(1) != p.dims.d_inner)
    throw ShapeError("selective_scan: want (L x d_inner) with d_inner = " +
                     std::to_string(p.dims.d_inner));
  Tensor<T> x = dir == Direction::backward ? reverse_along_axis(x_inner, 0) : x_inner;
  auto delta = softplus(add(matmul(matmul(x, p.w_delta_down), p.w_delta_up), p.delta_bias));
  auto b_proj = matmul(x, p.w_b);
  auto c_proj = matmul(x, p.w_c);
  auto y = scan_core(x, delta, b_proj, c_proj, p.a_log, p.d_skip);
  return dir == Direction::backward ? reverse_along_axis(y, 0) : y;
}

/// Gated selective-scan unit: expand, short causal conv, scan, gate, project.
template <typename T>
Tensor<T> mamba_block(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() != 2 || x.dim(1) != p.dims.d)
    throw ShapeError("mamba_block: want (L x d) with d = " + std::to_string(p.dims.d));
  auto uz = matmul(x, p.w_in);
  auto u = slice_cols(uz, Dim(0), p.dims.d_inner);
  auto z = slice_cols(uz, p.dims.d_inner, 2 * p.dims.d_inner);
  u = silu(conv1d_depthwise_causal(u, p.conv_w));
  auto y = selective_scan(u, p);
  return matmul(mul(y, silu(z)), p.w_out);
}

/// One encoder unit: pre-norm, forward branch, backward branch on the
/// reversed sequence, branch sum inside a residual.
template <typename T>
struct BiMambaBlock {
  SsmParams<T> fwd;
  SsmParams<T> bwd;
  Tensor<T> norm_w;  // (d)

  static BiMambaBlock init(const SsmDims& dims, std::mt19937_64& rng) {
    BiMambaBlock b;
    b.fwd = SsmParams<T>::init(dims, rng);
    b.bwd = SsmParams<T>::init(dims, rng);
    b.norm_w = Tensor<T>::full({dims.d}, T(1));
    b.norm_w.set_requires_grad(true);
    return b;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".norm", norm_w);
    fwd.for_each_param(prefix + ".fwd", fn);
    bwd.for_each_param(prefix + ".bwd", fn);
  }
};

template <typename T>
Tensor<T> bimamba_block(const Tensor<T>& x, const BiMambaBlock<T>& block) {
  auto xn = rms_norm(x, block.norm_w);
  auto fwd_branch = mamba_block(xn, block.fwd);
  auto bwd_branch =
      reverse_along_axis(mamba_block(reverse_along_axis(xn, 0), block.bwd), 0);
  return add(add(x, fwd_branch), bwd_branch);
}

}  // namespace bissm
