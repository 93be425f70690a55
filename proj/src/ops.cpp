#include "glsm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace glsm::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

using detail::make_result;
using detail::Node;

// Gradient buffer of input i, or nullptr when it does not need one.
Buffer* grad_of(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return &in->ensure_grad();
}

const Buffer& value_of(Node& self, std::size_t i) { return self.inputs[i]->value; }

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.defined() && t.rank() == 2, std::string(op) + ": expected a rank-2 tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul: inner extents differ " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
  Buffer out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    ConstMap dy(self.grad.data(), m, n);
    if (auto* ga = grad_of(self, 0))
      MutMap(ga->data(), m, k).noalias() += dy * ConstMap(value_of(self, 1).data(), k, n).transpose();
    if (auto* gb = grad_of(self, 1))
      MutMap(gb->data(), k, n).noalias() += ConstMap(value_of(self, 0).data(), m, k).transpose() * dy;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t r = x.rows(), in = x.cols(), out_w = w.cols();
  require(w.rows() == in, "linear: input width " + std::to_string(in) + " vs weight " +
                              shape_str(w.shape()));
  require(!bias.defined() || bias.numel() == out_w, "linear: bias width mismatch");
  Buffer out(r * out_w);
  MutMap y(out.data(), r, out_w);
  y.noalias() = ConstMap(x.values().data(), r, in) * ConstMap(w.values().data(), in, out_w);
  if (bias.defined())
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), out_w);
  return make_result("linear", {r, out_w}, std::move(out), {x, w, bias}, [r, in, out_w](Node& self) {
    ConstMap dy(self.grad.data(), r, out_w);
    if (auto* gx = grad_of(self, 0))
      MutMap(gx->data(), r, in).noalias() += dy * ConstMap(value_of(self, 1).data(), in, out_w).transpose();
    if (auto* gw = grad_of(self, 1))
      MutMap(gw->data(), in, out_w).noalias() += ConstMap(value_of(self, 0).data(), r, in).transpose() * dy;
    if (auto* gb = grad_of(self, 2))
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), out_w) += dy.colwise().sum();
  });
}

Tensor grouped_linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(x, "grouped_linear");
  require(w.defined() && w.rank() == 3, "grouped_linear: weight must be {groups, in, out}");
  const std::size_t g = w.shape()[0], in = w.shape()[1], out_w = w.shape()[2];
  const std::size_t r = x.rows();
  require(x.cols() == in, "grouped_linear: input width mismatch");
  require(r % g == 0, "grouped_linear: rows not divisible by group count");
  require(!bias.defined() || bias.numel() == g * out_w, "grouped_linear: bias must be {groups, out}");
  const std::size_t per = r / g;
  Buffer out(r * out_w);
  for (std::size_t gi = 0; gi < g; ++gi) {
    ConstStridedMap xg(x.values().data() + gi * in, per, in, Eigen::OuterStride<>(g * in));
    MutStridedMap yg(out.data() + gi * out_w, per, out_w, Eigen::OuterStride<>(g * out_w));
    yg.noalias() = xg * ConstMap(w.values().data() + gi * in * out_w, in, out_w);
    if (bias.defined())
      yg.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data() + gi * out_w, out_w);
  }
  return make_result("grouped_linear", {r, out_w}, std::move(out), {x, w, bias},
                     [g, in, out_w, per](Node& self) {
    auto* gx = grad_of(self, 0);
    auto* gw = grad_of(self, 1);
    auto* gb = grad_of(self, 2);
    const auto& xv = value_of(self, 0);
    const auto& wv = value_of(self, 1);
    for (std::size_t gi = 0; gi < g; ++gi) {
      ConstStridedMap dy(self.grad.data() + gi * out_w, per, out_w, Eigen::OuterStride<>(g * out_w));
      if (gx)
        MutStridedMap(gx->data() + gi * in, per, in, Eigen::OuterStride<>(g * in)).noalias() +=
            dy * ConstMap(wv.data() + gi * in * out_w, in, out_w).transpose();
      if (gw)
        MutMap(gw->data() + gi * in * out_w, in, out_w).noalias() +=
            ConstStridedMap(xv.data() + gi * in, per, in, Eigen::OuterStride<>(g * in)).transpose() * dy;
      if (gb) Eigen::Map<Eigen::RowVectorXd>(gb->data() + gi * out_w, out_w) += dy.colwise().sum();
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t c = a.cols();
  require(row.defined() && row.numel() == c, "add_row: row width must equal column count");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + row.at(i % c);
  return make_result("add_row", a.shape(), std::move(out), {a, row}, [c](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % c] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: element count mismatch " +
                                               shape_str(x.shape()) + " -> " + shape_str(shape));
  Buffer out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t r = x.rows(), c = x.cols();
  require(!index.empty(), "gather_rows: empty index");
  Buffer out(index.size() * c);
  const auto xv = x.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < r, "gather_rows: index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_rows", {index.size(), c}, std::move(out), {x},
                     [idx = std::move(idx), c](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[idx[i] * c + j] += self.grad[i * c + j];
  });
}

Tensor gather_elements(const Tensor& x, std::span<const std::size_t> index, Shape shape) {
  require(shape_numel(shape) == index.size(), "gather_elements: index count does not match shape");
  Buffer out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < x.numel(), "gather_elements: index out of range");
    out[i] = x.at(index[i]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_elements", std::move(shape), std::move(out), {x},
                     [idx = std::move(idx)](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += self.grad[i];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows(), "concat_cols: row count mismatch");
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  Buffer out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * c + j] = a.at(i * ca + j);
    for (std::size_t j = 0; j < cb; ++j) out[i * c + ca + j] = b.at(i * cb + j);
  }
  return make_result("concat_cols", {r, c}, std::move(out), {a, b}, [r, ca, cb, c](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) (*g)[i * ca + j] += self.grad[i * c + j];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) (*g)[i * cb + j] += self.grad[i * c + ca + j];
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "concat_rows: column count mismatch");
  const std::size_t na = a.numel(), nb = b.numel();
  Buffer out(na + nb);
  std::copy_n(a.values().begin(), na, out.begin());
  std::copy_n(b.values().begin(), nb, out.begin() + static_cast<std::ptrdiff_t>(na));
  return make_result("concat_rows", {a.rows() + b.rows(), a.cols()}, std::move(out), {a, b}, [na, nb](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < na; ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < nb; ++i) (*g)[i] += self.grad[na + i];
  });
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::check_finite("softmax_rows input", x.values());
  Buffer out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    double* y = out.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result("softmax_rows", x.shape(), std::move(out), {x}, [r, c](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* dy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  require(c > 1, "layer_norm: feature dimension must exceed 1");
  require(gain.numel() == c && bias.numel() == c, "layer_norm: gain/bias width mismatch");
  Buffer out(r * c), xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = gain.at(j) * xhat[i * c + j] + bias.at(j);
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto* gx = grad_of(self, 0);
    auto* gg = grad_of(self, 1);
    auto* gb = grad_of(self, 2);
    const auto& gain_v = value_of(self, 1);
    const double n = static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      const double* dy = self.grad.data() + i * c;
      const double* xh = xhat.data() + i * c;
      if (gg)
        for (std::size_t j = 0; j < c; ++j) (*gg)[j] += dy[j] * xh[j];
      if (gb)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += dy[j];
      if (gx) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[j] * gain_v[j];
          s1 += d;
          s2 += d * xh[j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[j] * gain_v[j];
          (*gx)[i * c + j] += inv_std[i] / n * (n * d - s1 - xh[j] * s2);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  Buffer out(x.numel()), th(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    th[i] = 1.0 - 2.0 / (1.0 + std::exp(2.0 * k * (v + a * v * v * v)));  // tanh
    out[i] = 0.5 * v * (1.0 + th[i]);
  }
  return make_result("gelu", x.shape(), std::move(out), {x}, [th = std::move(th)](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv = value_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double v = xv[i];
      const double d = 0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * k * (1.0 + 3.0 * a * v * v);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

Tensor silu(const Tensor& x) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.at(i);
    out[i] = v / (1.0 + std::exp(-v));
  }
  return make_result("silu", x.shape(), std::move(out), {x}, [](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& xv = value_of(self, 0);
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      (*g)[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t seq_len,
              std::size_t stride) {
  require_matrix(x, "conv1d");
  require(kernel.defined() && kernel.rank() == 3, "conv1d: kernel must be {width, c_in, c_out}");
  require(stride >= 1 && seq_len >= 1, "conv1d: stride and sequence length must be positive");
  const std::size_t width = kernel.shape()[0], cin = kernel.shape()[1], cout = kernel.shape()[2];
  require(x.cols() == cin, "conv1d: input channels " + std::to_string(x.cols()) + " vs kernel " +
                               shape_str(kernel.shape()));
  require(x.rows() % seq_len == 0, "conv1d: rows not divisible by sequence length");
  require(!bias.defined() || bias.numel() == cout, "conv1d: bias width mismatch");
  const std::size_t batch = x.rows() / seq_len;
  const std::size_t out_len = (seq_len + stride - 1) / stride;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((width - 1) / 2);
  const std::size_t kc = width * cin;

  // im2col
  Buffer col(batch * out_len * kc, 0.0);
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < out_len; ++j)
      for (std::size_t u = 0; u < width; ++u) {
        const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j * stride + u) - pad;
        if (t < 0 || t >= static_cast<std::ptrdiff_t>(seq_len)) continue;
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * seq_len + static_cast<std::size_t>(t)) * cin), cin,
                    col.begin() + static_cast<std::ptrdiff_t>((b * out_len + j) * kc + u * cin));
      }
  const std::size_t rows_out = batch * out_len;
  Buffer out(rows_out * cout);
  MutMap y(out.data(), rows_out, cout);
  y.noalias() = ConstMap(col.data(), rows_out, kc) * ConstMap(kernel.values().data(), kc, cout);
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), cout);

  return make_result("conv1d", {rows_out, cout}, std::move(out), {x, kernel, bias},
                     [col = std::move(col), batch, seq_len, out_len, width, cin, cout, kc, stride, pad,
                      rows_out](Node& self) {
    ConstMap dy(self.grad.data(), rows_out, cout);
    if (auto* gk = grad_of(self, 1))
      MutMap(gk->data(), kc, cout).noalias() += ConstMap(col.data(), rows_out, kc).transpose() * dy;
    if (auto* gb = grad_of(self, 2))
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), cout) += dy.colwise().sum();
    if (auto* gx = grad_of(self, 0)) {
      RowMat dcol = dy * ConstMap(value_of(self, 1).data(), kc, cout).transpose();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < out_len; ++j)
          for (std::size_t u = 0; u < width; ++u) {
            const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j * stride + u) - pad;
            if (t < 0 || t >= static_cast<std::ptrdiff_t>(seq_len)) continue;
            double* dst = gx->data() + (b * seq_len + static_cast<std::size_t>(t)) * cin;
            const double* src = dcol.data() + (b * out_len + j) * kc + u * cin;
            for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
          }
    }
  });
}

Tensor upsample_rows(const Tensor& x, std::size_t seq_len, std::size_t factor) {
  require(x.rows() % seq_len == 0, "upsample_rows: rows not divisible by sequence length");
  const std::size_t c = x.cols(), rows = x.rows();
  Buffer out(rows * factor * c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t u = 0; u < factor; ++u)
      std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(i * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>((i * factor + u) * c));
  return make_result("upsample_rows", {rows * factor, c}, std::move(out), {x},
                     [rows, factor, c](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t u = 0; u < factor; ++u)
          for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[(i * factor + u) * c + j];
  });
}

Tensor upsample_linear_rows(const Tensor& x, std::size_t seq_len, std::size_t factor) {
  require(seq_len > 0 && x.rows() % seq_len == 0, "upsample_linear_rows: rows not divisible by sequence length");
  require(factor >= 1, "upsample_linear_rows: factor must be positive");
  const std::size_t c = x.cols(), rows = x.rows(), out_len = seq_len * factor;
  // Output row k of a sequence sits at k / factor in input coordinates, which
  // matches the centres of a stride-`factor` same-padded convolution.
  std::vector<std::size_t> lo(out_len), hi(out_len);
  std::vector<double> w(out_len);
  for (std::size_t k = 0; k < out_len; ++k) {
    const double pos = std::min(static_cast<double>(k) / static_cast<double>(factor), static_cast<double>(seq_len - 1));
    lo[k] = static_cast<std::size_t>(std::floor(pos));
    hi[k] = std::min(lo[k] + 1, seq_len - 1);
    w[k] = pos - static_cast<double>(lo[k]);
  }
  Buffer out(rows * factor * c);
  const auto xv = x.values();
  for (std::size_t s = 0; s < rows / seq_len; ++s)
    for (std::size_t k = 0; k < out_len; ++k) {
      const double* a = xv.data() + (s * seq_len + lo[k]) * c;
      const double* b = xv.data() + (s * seq_len + hi[k]) * c;
      double* o = out.data() + (s * out_len + k) * c;
      for (std::size_t j = 0; j < c; ++j) o[j] = (1.0 - w[k]) * a[j] + w[k] * b[j];
    }
  return make_result("upsample_linear_rows", {rows * factor, c}, std::move(out), {x},
                     [rows, seq_len, out_len, c, lo = std::move(lo), hi = std::move(hi), w = std::move(w)](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t s = 0; s < rows / seq_len; ++s)
      for (std::size_t k = 0; k < out_len; ++k) {
        const double* go = self.grad.data() + (s * out_len + k) * c;
        double* ga = g->data() + (s * seq_len + lo[k]) * c;
        double* gb = g->data() + (s * seq_len + hi[k]) * c;
        for (std::size_t j = 0; j < c; ++j) {
          ga[j] += (1.0 - w[k]) * go[j];
          gb[j] += w[k] * go[j];
        }
      }
  });
}

Tensor avg_pool_rows(const Tensor& x, std::size_t seq_len, std::size_t factor) {
  require(factor >= 1 && seq_len % factor == 0, "avg_pool_rows: factor must divide sequence length");
  require(x.rows() % seq_len == 0, "avg_pool_rows: rows not divisible by sequence length");
  const std::size_t c = x.cols(), rows_out = x.rows() / factor;
  const double inv = 1.0 / static_cast<double>(factor);
  Buffer out(rows_out * c, 0.0);
  for (std::size_t i = 0; i < rows_out; ++i)
    for (std::size_t u = 0; u < factor; ++u)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x.at((i * factor + u) * c + j) * inv;
  return make_result("avg_pool_rows", {rows_out, c}, std::move(out), {x},
                     [rows_out, factor, c, inv](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < rows_out; ++i)
        for (std::size_t u = 0; u < factor; ++u)
          for (std::size_t j = 0; j < c; ++j) (*g)[(i * factor + u) * c + j] += self.grad[i * c + j] * inv;
  });
}

namespace {

struct AttentionDims {
  std::size_t groups, lq, lk, heads, dim, head_dim;
};

AttentionDims check_attention(const Tensor& q, const Tensor& k, const Tensor* v,
                              const AttentionShape& s, const Tensor& bias) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require(s.query_len > 0 && s.key_len > 0 && s.heads > 0, "attention: zero-sized layout");
  require(q.rows() % s.query_len == 0, "attention: query rows not divisible by group length");
  const std::size_t groups = q.rows() / s.query_len;
  require(k.rows() == groups * s.key_len, "attention: key rows inconsistent with query groups");
  require(k.cols() == q.cols(), "attention: query/key width mismatch");
  if (v) require(v->rows() == k.rows() && v->cols() == q.cols(), "attention: value shape mismatch");
  require(q.cols() % s.heads == 0, "attention: width not divisible by head count");
  require(!bias.defined() || bias.numel() == s.heads * s.query_len * s.key_len,
          "attention: logit bias must be {heads, query_len, key_len}");
  return {groups, s.query_len, s.key_len, s.heads, q.cols(), q.cols() / s.heads};
}

// Softmax probabilities for every (group, head), laid out [g][h][i][j].
Buffer attention_probs(const double* q, const double* k, const double* bias,
                                    const AttentionDims& d) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
  Buffer probs(d.groups * d.heads * d.lq * d.lk);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d.dim));
  for (std::size_t g = 0; g < d.groups; ++g)
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t c0 = h * d.head_dim;
      ConstStridedMap qg(q + g * d.lq * d.dim + c0, d.lq, d.head_dim, stride);
      ConstStridedMap kg(k + g * d.lk * d.dim + c0, d.lk, d.head_dim, stride);
      MutMap p(probs.data() + (g * d.heads + h) * d.lq * d.lk, d.lq, d.lk);
      p.noalias() = qg * kg.transpose();
      p *= scale;
      if (bias) p += ConstMap(bias + h * d.lq * d.lk, d.lq, d.lk);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        auto row = p.row(i);
        row = (row.array() - row.maxCoeff()).exp().matrix();
        row /= row.sum();
      }
    }
  return probs;
}

}  // namespace

std::vector<double> attention_weights(const Tensor& q, const Tensor& k, const AttentionShape& shape,
                                      const Tensor& logit_bias) {
  const auto d = check_attention(q, k, nullptr, shape, logit_bias);
  const Buffer probs = attention_probs(q.values().data(), k.values().data(),
                                       logit_bias.defined() ? logit_bias.values().data() : nullptr, d);
  return {probs.begin(), probs.end()};
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 const Tensor& logit_bias) {
  const auto d = check_attention(q, k, &v, shape, logit_bias);
  detail::check_finite("attention input", q.values());
  detail::check_finite("attention input", k.values());
  auto probs = attention_probs(q.values().data(), k.values().data(),
                               logit_bias.defined() ? logit_bias.values().data() : nullptr, d);
  Buffer out(q.rows() * d.dim);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d.dim));
  const double* vv = v.values().data();
  for (std::size_t g = 0; g < d.groups; ++g)
    for (std::size_t h = 0; h < d.heads; ++h) {
      const std::size_t c0 = h * d.head_dim;
      ConstMap p(probs.data() + (g * d.heads + h) * d.lq * d.lk, d.lq, d.lk);
      MutStridedMap(out.data() + g * d.lq * d.dim + c0, d.lq, d.head_dim, stride).noalias() =
          p * ConstStridedMap(vv + g * d.lk * d.dim + c0, d.lk, d.head_dim, stride);
    }
  return make_result("attention", {q.rows(), d.dim}, std::move(out), {q, k, v, logit_bias},
                     [d, probs = std::move(probs)](Node& self) {
    auto* gq = grad_of(self, 0);
    auto* gk = grad_of(self, 1);
    auto* gv = grad_of(self, 2);
    auto* gbias = grad_of(self, 3);
    const double* qv = value_of(self, 0).data();
    const double* kv = value_of(self, 1).data();
    const double* vv = value_of(self, 2).data();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.head_dim));
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d.dim));
    RowMat dp(d.lq, d.lk);
    for (std::size_t g = 0; g < d.groups; ++g)
      for (std::size_t h = 0; h < d.heads; ++h) {
        const std::size_t c0 = h * d.head_dim, qoff = g * d.lq * d.dim + c0, koff = g * d.lk * d.dim + c0;
        ConstMap p(probs.data() + (g * d.heads + h) * d.lq * d.lk, d.lq, d.lk);
        ConstStridedMap dout(self.grad.data() + qoff, d.lq, d.head_dim, stride);
        if (gv) MutStridedMap(gv->data() + koff, d.lk, d.head_dim, stride).noalias() += p.transpose() * dout;
        dp.noalias() = dout * ConstStridedMap(vv + koff, d.lk, d.head_dim, stride).transpose();
        // Softmax backward, row by row.
        for (Eigen::Index i = 0; i < dp.rows(); ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
        }
        if (gbias) MutMap(gbias->data() + h * d.lq * d.lk, d.lq, d.lk) += dp;
        if (gq)
          MutStridedMap(gq->data() + qoff, d.lq, d.head_dim, stride).noalias() +=
              scale * dp * ConstStridedMap(kv + koff, d.lk, d.head_dim, stride);
        if (gk)
          MutStridedMap(gk->data() + koff, d.lk, d.head_dim, stride).noalias() +=
              scale * dp.transpose() * ConstStridedMap(qv + qoff, d.lq, d.head_dim, stride);
      }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (auto& gi : *g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_result("mean", {1}, {s * inv}, {x}, [inv](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (auto& gi : *g) gi += self.grad[0] * inv;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), "mse: element count mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.at(i) - b.at(i);
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_result("mse", {1}, {s * inv}, {a, b}, [inv](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    const double k = 2.0 * inv * self.grad[0];
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += k * (av[i] - bv[i]);
    if (auto* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= k * (av[i] - bv[i]);
  });
}

Tensor stop_gradient_replace(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), "stop_gradient_replace: element count mismatch");
  Buffer out(b.values().begin(), b.values().end());
  return make_result("stop_gradient_replace", a.shape(), std::move(out), {a}, [](Node& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

}  // namespace glsm::ops
