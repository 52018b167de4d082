#include "dcm/autograd/ops.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dcm/common/error.hpp"
#include "dcm/kernels/kernels.hpp"

namespace dcm::ag {

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shapes {} and {} differ", op, a.shape().str(),
                                 b.shape().str()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.shape().rank() != rank) {
    throw ShapeError(fmt::format("{}: expected rank {} input, got {}", op, rank, x.shape().str()));
  }
}

template <typename T>
Node<T>& parent(Node<T>& self, std::size_t i) {
  return *self.parents[i];
}

// Applies f elementwise; the backward multiplies by df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto& a = parent(self, 0);
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(a.value[i], self.value[i]);
    a.accumulate(g);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    parent(self, 0).accumulate(self.grad);
    auto& rhs = parent(self, 1);
    if (!rhs.requires_grad) return;
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
    rhs.accumulate(g);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& lhs = parent(self, 0);
    auto& rhs = parent(self, 1);
    std::vector<T> g(self.grad.size());
    if (lhs.requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * rhs.value[i];
      lhs.accumulate(g);
    }
    if (rhs.requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * lhs.value[i];
      rhs.accumulate(g);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    std::vector<T> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * factor;
    parent(self, 0).accumulate(g);
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + offset;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a},
                        [](Node<T>& self) { parent(self, 0).accumulate(self.grad); });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank("add_bias", x, 2);
  if (b.shape() != Shape{x.shape()[1]}) {
    throw ShapeError(
        fmt::format("add_bias: bias {} does not match input {}", b.shape().str(), x.shape().str()));
  }
  const std::size_t rows = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.values()[r * cols + c] + b.values()[c];
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, b}, [rows, cols](Node<T>& self) {
    parent(self, 0).accumulate(self.grad);
    auto& bias = parent(self, 1);
    if (!bias.requires_grad) return;
    std::vector<T> g(cols, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    bias.accumulate(g);
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError(
        fmt::format("matmul: shapes {} and {} are incompatible", a.shape().str(), b.shape().str()));
  }
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  std::vector<T> out(m * n);
  kernels::gemm<T>(false, false, m, n, k, a.values(), b.values(), out, false);
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& lhs = parent(self, 0);
    auto& rhs = parent(self, 1);
    if (lhs.requires_grad) {
      std::vector<T> g(m * k);
      kernels::gemm<T>(false, true, m, k, n, self.grad, rhs.value, g, false);
      lhs.accumulate(g);
    }
    if (rhs.requires_grad) {
      std::vector<T> g(k * n);
      kernels::gemm<T>(true, false, k, n, m, lhs.value, self.grad, g, false);
      rhs.accumulate(g);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().rank() != 2 || w.shape().rank() != 2 || x.shape()[1] != w.shape()[1] ||
      b.shape() != Shape{w.shape()[0]}) {
    throw ShapeError(fmt::format("linear: input {}, weight {}, bias {} are incompatible",
                                 x.shape().str(), w.shape().str(), b.shape().str()));
  }
  const std::size_t rows = x.shape()[0];
  const std::size_t in = x.shape()[1];
  const std::size_t out_f = w.shape()[0];
  std::vector<T> out(rows * out_f);
  kernels::gemm<T>(false, true, rows, out_f, in, x.values(), w.values(), out, false);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += b.values()[o];
  return make_result<T>(
      "linear", Shape{rows, out_f}, std::move(out), {x, w, b}, [rows, in, out_f](Node<T>& self) {
        auto& xn = parent(self, 0);
        auto& wn = parent(self, 1);
        auto& bn = parent(self, 2);
        if (xn.requires_grad) {
          std::vector<T> g(rows * in);
          kernels::gemm<T>(false, false, rows, in, out_f, self.grad, wn.value, g, false);
          xn.accumulate(g);
        }
        if (wn.requires_grad) {
          std::vector<T> g(out_f * in);
          kernels::gemm<T>(true, false, out_f, in, rows, self.grad, xn.value, g, false);
          wn.accumulate(g);
        }
        if (bn.requires_grad) {
          std::vector<T> g(out_f, T{0});
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_f; ++o) g[o] += self.grad[r * out_f + o];
          bn.accumulate(g);
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T in, T) { return in > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T in, T) { return T{1} / in; });
}

template <typename T>
Tensor<T> safe_log(const Tensor<T>& x, T floor) {
  return unary<T>(
      "safe_log", x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T in, T) { return in > floor ? T{1} / in : T{0}; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.values()) total += v;
  return make_result<T>("sum", Shape{1}, {total}, {x}, [](Node<T>& self) {
    auto& a = parent(self, 0);
    a.accumulate(std::vector<T>(a.value.size(), self.grad[0]));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T count = static_cast<T>(x.numel());
  T total{0};
  for (T v : x.values()) total += v;
  return make_result<T>("mean", Shape{1}, {total / count}, {x}, [count](Node<T>& self) {
    auto& a = parent(self, 0);
    a.accumulate(std::vector<T>(a.value.size(), self.grad[0] / count));
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError(
        fmt::format("reshape: cannot view {} as {}", x.shape().str(), shape.str()));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>("reshape", shape, std::move(out), {x},
                        [](Node<T>& self) { parent(self, 0).accumulate(self.grad); });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.shape().rank() < 2) {
    throw ShapeError(fmt::format("flatten: need rank >= 2, got {}", x.shape().str()));
  }
  const std::size_t rows = x.shape()[0];
  return reshape(x, Shape{rows, x.numel() / rows});
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 || xs[2] + 2 * pad < ws[2] ||
      xs[3] + 2 * pad < ws[3]) {
    throw ShapeError(fmt::format("conv2d: input {} and weight {} (stride {}, pad {}) are incompatible",
                                 xs.str(), ws.str(), stride, pad));
  }
  if (bias.defined() && bias.shape() != Shape{ws[0]}) {
    throw ShapeError(fmt::format("conv2d: bias {} does not match weight {}", bias.shape().str(),
                                 ws.str()));
  }
  kernels::ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad};
  std::vector<T> out(g.batch * g.out_channels * g.out_pixels());
  kernels::conv2d_forward<T>(x.values(), w.values(),
                             bias.defined() ? bias.values() : std::span<const T>{}, out, g);
  std::vector<Tensor<T>> operands{x, w};
  if (bias.defined()) operands.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result<T>(
      "conv2d", Shape{g.batch, g.out_channels, g.out_height(), g.out_width()}, std::move(out),
      std::move(operands),
      [g, has_bias](Node<T>& self) {
        auto& xn = parent(self, 0);
        auto& wn = parent(self, 1);
        if (xn.requires_grad) {
          std::vector<T> dx(xn.value.size());
          kernels::conv2d_backward_input<T>(self.grad, wn.value, dx, g);
          xn.accumulate(dx);
        }
        if (wn.requires_grad) {
          std::vector<T> dw(wn.value.size());
          kernels::conv2d_backward_weight<T>(xn.value, self.grad, dw, g);
          wn.accumulate(dw);
        }
        if (has_bias && parent(self, 2).requires_grad) {
          std::vector<T> db(g.out_channels, T{0});
          const std::size_t pixels = g.out_pixels();
          for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t o = 0; o < g.out_channels; ++o)
              for (std::size_t p = 0; p < pixels; ++p)
                db[o] += self.grad[(n * g.out_channels + o) * pixels + p];
          parent(self, 2).accumulate(db);
        }
      },
      stride);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::span<T> running_mean, std::span<T> running_var,
                     const BatchNormOptions& options) {
  require_rank("batch_norm", x, 4);
  const std::size_t n = x.shape()[0];
  const std::size_t c = x.shape()[1];
  const std::size_t hw = x.shape()[2] * x.shape()[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || running_mean.size() != c ||
      running_var.size() != c) {
    throw ShapeError(fmt::format("batch_norm: input {} with affine {}/{} and {} running entries",
                                 x.shape().str(), gamma.shape().str(), beta.shape().str(),
                                 running_mean.size()));
  }
  std::vector<T> mean(c);
  std::vector<T> var(c);
  if (options.training) {
    if (n * hw < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
    kernels::channel_moments<T>(x.values(), n, c, hw, mean, var);
    const double count = static_cast<double>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running_mean[ch] = static_cast<T>((1.0 - options.momentum) * running_mean[ch] +
                                        options.momentum * mean[ch]);
      running_var[ch] = static_cast<T>((1.0 - options.momentum) * running_var[ch] +
                                       options.momentum * var[ch] * count / (count - 1.0));
    }
  } else {
    mean.assign(running_mean.begin(), running_mean.end());
    var.assign(running_var.begin(), running_var.end());
  }
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[ch]) + options.eps));
  }
  const std::vector<T> ones(c, T{1});
  const std::vector<T> zeros(c, T{0});
  std::vector<T> xhat(x.numel());
  kernels::channel_affine<T>(x.values(), mean, inv_std, ones, zeros, xhat, n, c, hw);
  std::vector<T> out(x.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T gm = gamma.values()[ch];
      const T bt = beta.values()[ch];
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = gm * xhat[off + i] + bt;
    }
  }
  const bool training = options.training;
  return make_result<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [n, c, hw, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& xn = parent(self, 0);
        auto& gn = parent(self, 1);
        auto& bn = parent(self, 2);
        std::vector<T> dx(xn.value.size());
        std::vector<T> dgamma(c);
        std::vector<T> dbeta(c);
        if (training) {
          kernels::batchnorm_backward<T>(self.grad, xhat, gn.value, inv_std, dx, dgamma, dbeta, n,
                                         c, hw);
        } else {
          for (std::size_t ch = 0; ch < c; ++ch) {
            T sg{0};
            T sgx{0};
            const T k = gn.value[ch] * inv_std[ch];
            for (std::size_t s = 0; s < n; ++s) {
              const std::size_t off = (s * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                sg += self.grad[off + i];
                sgx += self.grad[off + i] * xhat[off + i];
                dx[off + i] = self.grad[off + i] * k;
              }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
          }
        }
        xn.accumulate(dx);
        gn.accumulate(dgamma);
        bn.accumulate(dbeta);
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.shape()[0];
  const std::size_t c = x.shape()[1];
  const std::size_t hw = x.shape()[2] * x.shape()[3];
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* p = x.values().data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc / static_cast<T>(hw);
  }
  return make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {x}, [n, c, hw](Node<T>& self) {
    std::vector<T> g(n * c * hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T v = self.grad[i] / static_cast<T>(hw);
      std::fill(g.begin() + static_cast<std::ptrdiff_t>(i * hw),
                g.begin() + static_cast<std::ptrdiff_t>((i + 1) * hw), v);
    }
    parent(self, 0).accumulate(g);
  });
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank("adaptive_avg_pool", x, 4);
  const std::size_t n = x.shape()[0];
  const std::size_t c = x.shape()[1];
  const std::size_t h = x.shape()[2];
  const std::size_t w = x.shape()[3];
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw ShapeError(fmt::format("adaptive_avg_pool: cannot pool {} to {}x{}", x.shape().str(),
                                 out_h, out_w));
  }
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<T> out(n * c * out_h * out_w);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.values().data() + plane * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        T acc{0};
        const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
        const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += src[yy * w + xx];
        out[(plane * out_h + oy) * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return make_result<T>(
      "adaptive_avg_pool", Shape{n, c, out_h, out_w}, std::move(out), {x},
      [=](Node<T>& self) {
        std::vector<T> g(n * c * h * w, T{0});
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          T* dst = g.data() + plane * h * w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
              const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
              const T v = self.grad[(plane * out_h + oy) * out_w + ox] /
                          static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::size_t yy = y0; yy < y1; ++yy)
                for (std::size_t xx = x0; xx < x1; ++xx) dst[yy * w + xx] += v;
            }
          }
        }
        parent(self, 0).accumulate(g);
      });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t pad) {
  require_rank("pad2d", x, 4);
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t h = x.shape()[2];
  const std::size_t w = x.shape()[3];
  const std::size_t ph = h + 2 * pad;
  const std::size_t pw = w + 2 * pad;
  std::vector<T> out(planes * ph * pw, T{0});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(x.values().data() + (p * h + y) * w, w, out.data() + (p * ph + y + pad) * pw + pad);
  return make_result<T>("pad2d", Shape{x.shape()[0], x.shape()[1], ph, pw}, std::move(out), {x},
                        [=](Node<T>& self) {
                          std::vector<T> g(planes * h * w);
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t y = 0; y < h; ++y)
                              std::copy_n(self.grad.data() + (p * ph + y + pad) * pw + pad, w,
                                          g.data() + (p * h + y) * w);
                          parent(self, 0).accumulate(g);
                        });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::int32_t> index) {
  require_rank("gather", x, 2);
  const std::size_t rows = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  if (index.size() != rows) {
    throw ShapeError(fmt::format("gather: {} indices for input {}", index.size(), x.shape().str()));
  }
  std::vector<std::size_t> idx(rows);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw ShapeError(fmt::format("gather: index {} out of range for {} columns", index[r], cols));
    }
    idx[r] = static_cast<std::size_t>(index[r]);
    out[r] = x.values()[r * cols + idx[r]];
  }
  return make_result<T>("gather", Shape{rows}, std::move(out), {x},
                        [rows, cols, idx = std::move(idx)](Node<T>& self) {
                          std::vector<T> g(rows * cols, T{0});
                          for (std::size_t r = 0; r < rows; ++r) g[r * cols + idx[r]] = self.grad[r];
                          parent(self, 0).accumulate(g);
                        });
}

namespace {

// Row-wise log-softmax of z / temperature, computed with max subtraction.
template <typename T>
std::vector<T> log_softmax_rows(std::span<const T> z, std::size_t rows, std::size_t cols,
                                T temperature) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * cols;
    T peak = zr[0] / temperature;
    for (std::size_t j = 1; j < cols; ++j) peak = std::max(peak, zr[j] / temperature);
    T total{0};
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(zr[j] / temperature - peak);
    const T log_total = std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = zr[j] / temperature - peak - log_total;
  }
  return out;
}

template <typename T>
void require_temperature(const char* op, T temperature) {
  if (!(temperature > T{0})) {
    throw ShapeError(fmt::format("{}: temperature must be positive, got {}", op, temperature));
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, T temperature) {
  require_rank("softmax", logits, 2);
  require_temperature("softmax", temperature);
  const std::size_t rows = logits.shape()[0];
  const std::size_t cols = logits.shape()[1];
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = logits.values().data() + r * cols;
    T peak = zr[0] / temperature;
    for (std::size_t j = 1; j < cols; ++j) peak = std::max(peak, zr[j] / temperature);
    T total{0};
    for (std::size_t j = 0; j < cols; ++j) {
      out[r * cols + j] = std::exp(zr[j] / temperature - peak);
      total += out[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= total;
  }
  return make_result<T>("softmax", logits.shape(), std::move(out), {logits},
                        [rows, cols, temperature](Node<T>& self) {
                          std::vector<T> g(rows * cols);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* p = self.value.data() + r * cols;
                            const T* gr = self.grad.data() + r * cols;
                            T dot{0};
                            for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * p[j];
                            for (std::size_t j = 0; j < cols; ++j)
                              g[r * cols + j] = p[j] * (gr[j] - dot) / temperature;
                          }
                          parent(self, 0).accumulate(g);
                        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, T temperature) {
  require_rank("log_softmax", logits, 2);
  require_temperature("log_softmax", temperature);
  const std::size_t rows = logits.shape()[0];
  const std::size_t cols = logits.shape()[1];
  auto out = log_softmax_rows(logits.values(), rows, cols, temperature);
  return make_result<T>("log_softmax", logits.shape(), std::move(out), {logits},
                        [rows, cols, temperature](Node<T>& self) {
                          std::vector<T> g(rows * cols);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.value.data() + r * cols;
                            const T* gr = self.grad.data() + r * cols;
                            T total{0};
                            for (std::size_t j = 0; j < cols; ++j) total += gr[j];
                            for (std::size_t j = 0; j < cols; ++j)
                              g[r * cols + j] = (gr[j] - std::exp(y[j]) * total) / temperature;
                          }
                          parent(self, 0).accumulate(g);
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.shape()[0];
  const std::size_t cols = logits.shape()[1];
  if (labels.size() != rows) {
    throw ShapeError(fmt::format("cross_entropy: {} labels for logits {}", labels.size(),
                                 logits.shape().str()));
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw ShapeError(fmt::format("cross_entropy: label {} outside [0, {})", y, cols));
    }
  }
  auto logp = log_softmax_rows(logits.values(), rows, cols, T{1});
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) total -= logp[r * cols + static_cast<std::size_t>(labels[r])];
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  return make_result<T>(
      "cross_entropy", Shape{1}, {total / static_cast<T>(rows)}, {logits},
      [rows, cols, logp = std::move(logp), y = std::move(y)](Node<T>& self) {
        std::vector<T> g(rows * cols);
        const T k = self.grad[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < cols; ++j) {
            const T onehot = static_cast<std::size_t>(y[r]) == j ? T{1} : T{0};
            g[r * cols + j] = k * (std::exp(logp[r * cols + j]) - onehot);
          }
        }
        parent(self, 0).accumulate(g);
      });
}

#define DCM_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                  \
  template Tensor<T> log<T>(const Tensor<T>&);                                                  \
  template Tensor<T> safe_log<T>(const Tensor<T>&, T);                                          \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                \
  template Tensor<T> flatten<T>(const Tensor<T>&);                                              \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               std::size_t, std::size_t);                                       \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                   std::span<T>, std::span<T>, const BatchNormOptions&);        \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> adaptive_avg_pool<T>(const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> pad2d<T>(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> gather<T>(const Tensor<T>&, std::span<const std::int32_t>);                \
  template Tensor<T> softmax<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::int32_t>);

DCM_INSTANTIATE_OPS(float)
DCM_INSTANTIATE_OPS(double)
#undef DCM_INSTANTIATE_OPS

}  // namespace dcm::ag
