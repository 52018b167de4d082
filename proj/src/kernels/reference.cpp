#include <cmath>
#include <cstddef>
#include <vector>

#include "dcm/kernels/kernels.hpp"

namespace dcm::kernels::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

namespace {

// Input coordinate feeding output (oy, ox) through kernel tap (ky, kx), or -1.
inline std::ptrdiff_t source(std::size_t o, std::size_t tap, const ConvGeometry& g,
                             std::size_t extent) {
  const auto i = static_cast<std::ptrdiff_t>(o * g.stride + tap) - static_cast<std::ptrdiff_t>(g.pad);
  return (i < 0 || i >= static_cast<std::ptrdiff_t>(extent)) ? -1 : i;
}

}  // namespace

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y, const ConvGeometry& g) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t k = g.kernel;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc{0};
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = source(oy, ky, g, g.height);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = source(ox, kx, g, g.width);
                if (ix < 0) continue;
                acc += w[((o * g.in_channels + c) * k + ky) * k + kx] *
                       x[((n * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) *
                             g.width +
                         static_cast<std::size_t>(ix)];
              }
            }
          }
          if (!bias.empty()) acc += bias[o];
          y[((n * g.out_channels + o) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(std::span<const T> dy, std::span<const T> w, std::span<T> dx,
                           const ConvGeometry& g) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t k = g.kernel;
  for (auto& v : dx) v = T{0};
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T grad = dy[((n * g.out_channels + o) * oh + oy) * ow + ox];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = source(oy, ky, g, g.height);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = source(ox, kx, g, g.width);
                if (ix < 0) continue;
                dx[((n * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width +
                   static_cast<std::size_t>(ix)] +=
                    grad * w[((o * g.in_channels + c) * k + ky) * k + kx];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            const ConvGeometry& g) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t k = g.kernel;
  for (auto& v : dw) v = T{0};
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T grad = dy[((n * g.out_channels + o) * oh + oy) * ow + ox];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto iy = source(oy, ky, g, g.height);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto ix = source(ox, kx, g, g.width);
                if (ix < 0) continue;
                dw[((o * g.in_channels + c) * k + ky) * k + kx] +=
                    grad * x[((n * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) *
                                 g.width +
                             static_cast<std::size_t>(ix)];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void channel_moments(std::span<const T> x, std::size_t n, std::size_t c, std::size_t hw,
                     std::span<T> mean, std::span<T> var) {
  const long double count = static_cast<long double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    long double sum = 0;
    long double sum_sq = 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < hw; ++i) {
        const long double v = x[(s * c + ch) * hw + i];
        sum += v;
        sum_sq += v * v;
      }
    }
    const long double mu = sum / count;
    mean[ch] = static_cast<T>(mu);
    var[ch] = static_cast<T>(sum_sq / count - mu * mu);
  }
}

template <typename T>
void batchnorm_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> gamma,
                        std::span<const T> inv_std, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta, std::size_t n, std::size_t c, std::size_t hw) {
  const long double count = static_cast<long double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    long double mean_dy = 0;
    long double mean_dy_xhat = 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (s * c + ch) * hw + i;
        mean_dy += dy[idx];
        mean_dy_xhat += static_cast<long double>(dy[idx]) * xhat[idx];
      }
    }
    dbeta[ch] = static_cast<T>(mean_dy);
    dgamma[ch] = static_cast<T>(mean_dy_xhat);
    mean_dy /= count;
    mean_dy_xhat /= count;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (s * c + ch) * hw + i;
        dx[idx] = static_cast<T>(static_cast<long double>(gamma[ch]) * inv_std[ch] *
                                 (dy[idx] - mean_dy - xhat[idx] * mean_dy_xhat));
      }
    }
  }
}

#define DCM_INSTANTIATE_REFERENCE(T)                                                           \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, std::span<const T>, \
                        std::span<const T>, std::span<T>, bool);                               \
  template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,  \
                                  std::span<T>, const ConvGeometry&);                          \
  template void conv2d_backward_input<T>(std::span<const T>, std::span<const T>, std::span<T>, \
                                         const ConvGeometry&);                                 \
  template void conv2d_backward_weight<T>(std::span<const T>, std::span<const T>,              \
                                          std::span<T>, const ConvGeometry&);                  \
  template void channel_moments<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,  \
                                   std::span<T>, std::span<T>);                                \
  template void batchnorm_backward<T>(std::span<const T>, std::span<const T>,                  \
                                      std::span<const T>, std::span<const T>, std::span<T>,    \
                                      std::span<T>, std::span<T>, std::size_t, std::size_t,    \
                                      std::size_t);

DCM_INSTANTIATE_REFERENCE(float)
DCM_INSTANTIATE_REFERENCE(double)
#undef DCM_INSTANTIATE_REFERENCE

}  // namespace dcm::kernels::reference
