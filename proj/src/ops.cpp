#include "bdw/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bdw::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool recording(const Tensor& a) { return grad_enabled() && a.requires_grad(); }
bool recording(const Tensor& a, const Tensor& b) { return grad_enabled() && (a.requires_grad() || b.requires_grad()); }

Tensor make_output(Shape shape, std::vector<double> values, bool record, std::string_view op) {
  check_finite(values, op);
  return Tensor::from(std::move(shape), std::move(values), record);
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t kb = b.rank() == 1 ? b.numel() : b.rows();
  const std::size_t n = b.rank() == 1 ? 1 : b.cols();
  require(k == kb, "matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  const bool record = recording(a, b);
  auto result = make_output({m, n}, std::move(out), record, "matmul");
  if (record) {
    Tape::active().record("matmul", {a.id(), b.id()}, result, [a, b, result, m, k, n]() mutable {
      ConstMap dc(result.grad().data(), m, n);
      if (a.requires_grad()) {
        MutMap(a.grad_storage().data(), m, k).noalias() += dc * ConstMap(b.values().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MutMap(b.grad_storage().data(), k, n).noalias() += ConstMap(a.values().data(), m, k).transpose() * dc;
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.values().data(), m, n).transpose();
  const bool record = recording(a);
  auto result = make_output({n, m}, std::move(out), record, "transpose");
  if (record) {
    Tape::active().record("transpose", {a.id()}, result, [a, result, m, n]() mutable {
      MutMap(a.grad_storage().data(), m, n) += ConstMap(result.grad().data(), n, m).transpose();
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  const bool record = recording(a);
  auto result = make_output(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), record,
                            "reshape");
  if (record) {
    Tape::active().record("reshape", {a.id()}, result, [a, result]() mutable {
      auto ga = a.grad_storage();
      auto gr = result.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gr[i];
    });
  }
  return result;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, std::string_view name, Fwd fwd, Bwd bwd) {
  require(a.shape() == b.shape(), std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const bool record = recording(a, b);
  auto result = make_output(a.shape(), std::move(out), record, name);
  if (record) {
    Tape::active().record(std::string(name), {a.id(), b.id()}, result, [a, b, result, bwd]() mutable {
      auto g = result.grad();
      auto av = a.values(), bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(av[i], bv[i], true);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * bwd(av[i], bv[i], false);
      }
    });
  }
  return result;
}

template <typename Fwd, typename Deriv>
Tensor unary_elementwise(const Tensor& a, std::string_view name, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const bool record = recording(a);
  auto result = make_output(a.shape(), std::move(out), record, name);
  if (record) {
    Tape::active().record(std::string(name), {a.id()}, result, [a, result, deriv]() mutable {
      auto g = result.grad();
      auto av = a.values();
      auto ov = result.values();
      auto ga = a.grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(av[i], ov[i]);
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, bool) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, bool left) { return left ? 1.0 : -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, bool left) { return left ? y : x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_elementwise(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t m = a.rows(), n = a.cols();
  require(bias.numel() == n, "add_bias: bias length " + std::to_string(bias.numel()) + " vs " + std::to_string(n));
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const bool record = recording(a, bias);
  auto result = make_output(a.shape(), std::move(out), record, "add_bias");
  if (record) {
    Tape::active().record("add_bias", {a.id(), bias.id()}, result, [a, bias, result, m, n]() mutable {
      auto g = result.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_storage();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      }
    });
  }
  return result;
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_elementwise(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kC * (x + kA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      });
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  check_finite(x.values(), "softmax input");
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  const bool record = recording(x);
  auto result = make_output(x.shape(), std::move(out), record, "softmax");
  if (record) {
    Tape::active().record("softmax", {x.id()}, result, [x, result, outer, inner, n]() mutable {
      auto g = result.grad();
      auto y = result.values();
      auto gx = x.grad_storage();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  require(gamma.numel() == n && beta.numel() == n, "layer_norm: gain/offset length mismatch");
  std::vector<double> out(m * n), xhat(m * n), rstd(m);
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * rstd[r];
      out[r * n + c] = gv[c] * xhat[r * n + c] + bv[c];
    }
  }
  const bool record = grad_enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto result = make_output(x.shape(), std::move(out), record, "layer_norm");
  if (record) {
    Tape::active().record(
        "layer_norm", {x.id(), gamma.id(), beta.id()}, result,
        [x, gamma, beta, result, xhat = std::move(xhat), rstd = std::move(rstd), m, n]() mutable {
          auto g = result.grad();
          auto gv = gamma.values();
          if (gamma.requires_grad()) {
            auto gg = gamma.grad_storage();
            for (std::size_t r = 0; r < m; ++r)
              for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
          }
          if (beta.requires_grad()) {
            auto gb = beta.grad_storage();
            for (std::size_t r = 0; r < m; ++r)
              for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
          }
          if (x.requires_grad()) {
            auto gx = x.grad_storage();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < m; ++r) {
              double sum_d = 0.0, sum_dx = 0.0;
              for (std::size_t c = 0; c < n; ++c) {
                const double d = g[r * n + c] * gv[c];
                sum_d += d;
                sum_dx += d * xhat[r * n + c];
              }
              for (std::size_t c = 0; c < n; ++c) {
                const double d = g[r * n + c] * gv[c];
                gx[r * n + c] += rstd[r] * inv_n * (static_cast<double>(n) * d - sum_d - xhat[r * n + c] * sum_dx);
              }
            }
          }
        });
  }
  return result;
}

Tensor smoothed_l2_norm(const Tensor& w, double epsilon) {
  require(epsilon >= 0.0, "smoothed_l2_norm: epsilon must be non-negative");
  double ss = 0.0;
  for (double v : w.values()) ss += v * v;
  const double norm = std::sqrt(ss + epsilon);
  const bool record = recording(w);
  auto result = make_output({1}, {norm}, record, "smoothed_l2_norm");
  if (record) {
    Tape::active().record("smoothed_l2_norm", {w.id()}, result, [w, result, norm]() mutable {
      const double g = result.grad()[0];
      if (norm == 0.0) return;
      auto gw = w.grad_storage();
      auto wv = w.values();
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g * wv[i] / norm;
    });
  }
  return result;
}

Tensor row_norms(const Tensor& x, double epsilon) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m);
  auto xv = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
    out[r] = std::sqrt(ss + epsilon);
  }
  const bool record = recording(x);
  auto result = make_output({m}, std::move(out), record, "row_norms");
  if (record) {
    Tape::active().record("row_norms", {x.id()}, result, [x, result, m, n]() mutable {
      auto g = result.grad();
      auto norms = result.values();
      auto xv = x.values();
      auto gx = x.grad_storage();
      for (std::size_t r = 0; r < m; ++r) {
        if (norms[r] == 0.0) continue;
        const double f = g[r] / norms[r];
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += f * xv[r * n + c];
      }
    });
  }
  return result;
}

Tensor normalize_rows(const Tensor& x, double epsilon) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n), norms(m);
  auto xv = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
    norms[r] = std::sqrt(ss + epsilon);
    require(norms[r] > 0.0, "normalize_rows: zero row with zero epsilon");
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] / norms[r];
  }
  const bool record = recording(x);
  auto result = make_output(x.shape(), std::move(out), record, "normalize_rows");
  if (record) {
    Tape::active().record("normalize_rows", {x.id()}, result, [x, result, norms = std::move(norms), m, n]() mutable {
      auto g = result.grad();
      auto y = result.values();
      auto gx = x.grad_storage();
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += y[r * n + c] * g[r * n + c];
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += (g[r * n + c] - y[r * n + c] * dot) / norms[r];
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  const bool record = recording(a);
  auto result = make_output({1}, {total}, record, "sum");
  if (record) {
    Tape::active().record("sum", {a.id()}, result, [a, result]() mutable {
      const double g = result.grad()[0];
      for (double& v : a.grad_storage()) v += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  require(weights.size() == a.numel(), "weighted_sum: weight count mismatch");
  double total = 0.0;
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * weights[i];
  const bool record = recording(a);
  auto result = make_output({1}, {total}, record, "weighted_sum");
  if (record) {
    std::vector<double> w(weights.begin(), weights.end());
    Tape::active().record("weighted_sum", {a.id()}, result, [a, result, w = std::move(w)]() mutable {
      const double g = result.grad()[0];
      auto ga = a.grad_storage();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * w[i];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  const std::size_t m = a.rows(), n = a.cols();
  require(!rows.empty(), "gather_rows: empty row list");
  std::vector<double> out(rows.size() * n);
  auto av = a.values();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] < m, "gather_rows: row " + std::to_string(rows[k]) + " out of range " + std::to_string(m));
    std::copy_n(av.data() + rows[k] * n, n, out.data() + k * n);
  }
  const bool record = recording(a);
  auto result = make_output({rows.size(), n}, std::move(out), record, "gather_rows");
  if (record) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    Tape::active().record("gather_rows", {a.id()}, result, [a, result, idx = std::move(idx), n]() mutable {
      auto g = result.grad();
      auto ga = a.grad_storage();
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t c = 0; c < n; ++c) ga[idx[k] * n + c] += g[k * n + c];
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  require(count > 0 && begin + count <= n, "slice_cols: range out of bounds");
  std::vector<double> out(m * count);
  auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) std::copy_n(av.data() + r * n + begin, count, out.data() + r * count);
  const bool record = recording(a);
  auto result = make_output({m, count}, std::move(out), record, "slice_cols");
  if (record) {
    Tape::active().record("slice_cols", {a.id()}, result, [a, result, m, n, begin, count]() mutable {
      auto g = result.grad();
      auto ga = a.grad_storage();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * n + begin + c] += g[r * count + c];
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t m = logits.rows(), n = logits.cols();
  require(labels.size() == m, "cross_entropy: label count does not match logit rows");
  std::vector<double> probs(m * n);
  auto lv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (labels[r] >= n) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                              std::to_string(n) + " classes");
    }
    const double* row = lv.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[labels[r]];
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(row[c] - lse);
  }
  const double loss = total / static_cast<double>(m);
  const bool record = recording(logits);
  auto result = make_output({1}, {loss}, record, "cross_entropy");
  if (record) {
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    Tape::active().record("cross_entropy", {logits.id()}, result,
                          [logits, result, probs = std::move(probs), lab = std::move(lab), m, n]() mutable {
                            const double g = result.grad()[0] / static_cast<double>(m);
                            auto gl = logits.grad_storage();
                            for (std::size_t r = 0; r < m; ++r)
                              for (std::size_t c = 0; c < n; ++c)
                                gl[r * n + c] += g * (probs[r * n + c] - (c == lab[r] ? 1.0 : 0.0));
                          });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t labels[1] = {label};
  return cross_entropy(logits, std::span<const std::size_t>(labels));
}

Tensor attention_probs(const Tensor& q, const Tensor& k, const std::optional<Tensor>& prefix_k,
                       const AttentionLayout& layout) {
  const std::size_t B = layout.batch, T = layout.seq_len, H = layout.heads;
  const std::size_t d = q.cols();
  require(q.rows() == B * T && k.rows() == B * T && k.cols() == d, "attention_probs: q/k shape mismatch");
  require(d % H == 0, "attention_probs: width not divisible by heads");
  require(layout.key_valid.size() == B * T, "attention_probs: key mask size mismatch");
  const std::size_t P = prefix_k ? prefix_k->rows() : 0;
  if (prefix_k) require(prefix_k->cols() == d, "attention_probs: prefix key width mismatch");
  const std::size_t S = P + T, dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.values(), kv = k.values();
  const double* pk = prefix_k ? prefix_k->values().data() : nullptr;
  std::vector<double> out(B * H * T * S, 0.0);
  std::vector<double> scores(S);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = qv.data() + (b * T + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          const double* kj = nullptr;
          if (j < P) {
            kj = pk + j * d + h * dh;
          } else if (layout.key_valid[b * T + (j - P)]) {
            kj = kv.data() + (b * T + (j - P)) * d + h * dh;
          }
          if (!kj) {
            scores[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv;
          mx = std::max(mx, scores[j]);
        }
        require(std::isfinite(mx), "attention_probs: query row has no valid key");
        double* row = out.data() + ((b * H + h) * T + i) * S;
        double total = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          row[j] = std::isfinite(scores[j]) ? std::exp(scores[j] - mx) : 0.0;
          total += row[j];
        }
        for (std::size_t j = 0; j < S; ++j) row[j] /= total;
      }
    }
  }
  const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() ||
                                         (prefix_k && prefix_k->requires_grad()));
  auto result = make_output({B * H * T, S}, std::move(out), record, "attention_probs");
  if (record) {
    std::vector<std::uint64_t> ids{q.id(), k.id()};
    if (prefix_k) ids.push_back(prefix_k->id());
    Tape::active().record(
        "attention_probs", std::move(ids), result,
        [q, k, prefix_k, result, B, T, H, P, S, d, dh, inv]() mutable {
          auto g = result.grad();
          auto pv = result.values();
          auto qv = q.values(), kv = k.values();
          std::optional<Tensor> pkt = prefix_k;
          const double* pk = pkt ? pkt->values().data() : nullptr;
          double* gq = q.requires_grad() ? q.grad_storage().data() : nullptr;
          double* gk = k.requires_grad() ? k.grad_storage().data() : nullptr;
          double* gpk = (pkt && pkt->requires_grad()) ? pkt->grad_storage().data() : nullptr;
          std::vector<double> ds(S);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
              for (std::size_t i = 0; i < T; ++i) {
                const std::size_t r = ((b * H + h) * T + i) * S;
                double dot = 0.0;
                for (std::size_t j = 0; j < S; ++j) dot += g[r + j] * pv[r + j];
                for (std::size_t j = 0; j < S; ++j) ds[j] = pv[r + j] * (g[r + j] - dot) * inv;
                const std::size_t qrow = (b * T + i) * d + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                  if (ds[j] == 0.0) continue;
                  const double* kj;
                  double* gkj;
                  if (j < P) {
                    kj = pk + j * d + h * dh;
                    gkj = gpk ? gpk + j * d + h * dh : nullptr;
                  } else {
                    const std::size_t krow = (b * T + (j - P)) * d + h * dh;
                    kj = kv.data() + krow;
                    gkj = gk ? gk + krow : nullptr;
                  }
                  if (gq)
                    for (std::size_t c = 0; c < dh; ++c) gq[qrow + c] += ds[j] * kj[c];
                  if (gkj)
                    for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qv[qrow + c];
                }
              }
            }
          }
        });
  }
  return result;
}

Tensor attention_context(const Tensor& probs, const Tensor& v, const std::optional<Tensor>& prefix_v,
                         const AttentionLayout& layout) {
  const std::size_t B = layout.batch, T = layout.seq_len, H = layout.heads;
  const std::size_t d = v.cols();
  const std::size_t P = prefix_v ? prefix_v->rows() : 0;
  const std::size_t S = P + T, dh = d / H;
  require(v.rows() == B * T, "attention_context: value rows mismatch");
  require(probs.rows() == B * H * T && probs.cols() == S, "attention_context: probability shape mismatch");
  if (prefix_v) require(prefix_v->cols() == d, "attention_context: prefix value width mismatch");
  auto pv = probs.values(), vv = v.values();
  const double* pval = prefix_v ? prefix_v->values().data() : nullptr;
  std::vector<double> out(B * T * d, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        const double* row = pv.data() + ((b * H + h) * T + i) * S;
        double* o = out.data() + (b * T + i) * d + h * dh;
        for (std::size_t j = 0; j < S; ++j) {
          const double p = row[j];
          if (p == 0.0) continue;
          const double* vj = j < P ? pval + j * d + h * dh : vv.data() + (b * T + (j - P)) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += p * vj[c];
        }
      }
    }
  }
  const bool record = grad_enabled() && (probs.requires_grad() || v.requires_grad() ||
                                         (prefix_v && prefix_v->requires_grad()));
  auto result = make_output({B * T, d}, std::move(out), record, "attention_context");
  if (record) {
    std::vector<std::uint64_t> ids{probs.id(), v.id()};
    if (prefix_v) ids.push_back(prefix_v->id());
    Tape::active().record(
        "attention_context", std::move(ids), result,
        [probs, v, prefix_v, result, B, T, H, P, S, d, dh]() mutable {
          auto g = result.grad();
          auto pv = probs.values(), vv = v.values();
          std::optional<Tensor> pvt = prefix_v;
          const double* pval = pvt ? pvt->values().data() : nullptr;
          double* gp = probs.requires_grad() ? probs.grad_storage().data() : nullptr;
          double* gv = v.requires_grad() ? v.grad_storage().data() : nullptr;
          double* gpv = (pvt && pvt->requires_grad()) ? pvt->grad_storage().data() : nullptr;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
              for (std::size_t i = 0; i < T; ++i) {
                const std::size_t r = ((b * H + h) * T + i) * S;
                const double* go = g.data() + (b * T + i) * d + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                  const std::size_t vrow = j < P ? j * d + h * dh : (b * T + (j - P)) * d + h * dh;
                  const double* vj = j < P ? pval + vrow : vv.data() + vrow;
                  if (gp) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                    gp[r + j] += s;
                  }
                  const double p = pv[r + j];
                  if (p == 0.0) continue;
                  double* gvj = j < P ? gpv : gv;
                  if (gvj)
                    for (std::size_t c = 0; c < dh; ++c) gvj[vrow + c] += p * go[c];
                }
              }
            }
          }
        });
  }
  return result;
}

}  // namespace bdw::ops
