#include "dcm/kernels/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace dcm::kernels {

namespace {

// Below this many multiply-adds a GEMM stays on the calling thread.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[c * rows + r] = src[r * cols + c];
    }
  }
  return out;
}

// Row-major C[m,n] (+)= A[m,k] B[k,n]. Rows are processed four at a time so
// each loaded row of B feeds four accumulator rows. Every C element sums its
// k terms in ascending order regardless of blocking or thread count.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a,
             const T* __restrict b, T* __restrict c, bool accumulate) {
  const auto row_blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (std::ptrdiff_t rb = 0; rb < row_blocks; ++rb) {
    const std::size_t i0 = static_cast<std::size_t>(rb) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (!accumulate) {
      std::fill(c + i0 * n, c + (i0 + rows) * n, T{0});
    }
    if (rows == 4) {
      T* __restrict c0 = c + i0 * n;
      T* __restrict c1 = c0 + n;
      T* __restrict c2 = c1 + n;
      T* __restrict c3 = c2 + n;
      const T* a0 = a + i0 * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T s0 = a0[p];
        const T s1 = a0[k + p];
        const T s2 = a0[2 * k + p];
        const T s3 = a0[3 * k + p];
        const T* __restrict brow = b + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) {
          const T bj = brow[j];
          c0[j] += s0 * bj;
          c1[j] += s1 * bj;
          c2[j] += s2 * bj;
          c3[j] += s3 * bj;
        }
      }
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        T* __restrict crow = c + (i0 + r) * n;
        const T* arow = a + (i0 + r) * k;
        for (std::size_t p = 0; p < k; ++p) {
          const T s = arow[p];
          const T* __restrict brow = b + p * n;
#pragma omp simd
          for (std::size_t j = 0; j < n; ++j) {
            crow[j] += s * brow[j];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  std::vector<T> a_buf;
  std::vector<T> b_buf;
  const T* ap = a.data();
  const T* bp = b.data();
  if (trans_a) {
    a_buf = transposed(ap, k, m);
    ap = a_buf.data();
  }
  if (trans_b) {
    b_buf = transposed(bp, n, k);
    bp = b_buf.data();
  }
  gemm_nn(m, n, k, ap, bp, c.data(), accumulate);
}

template <typename T>
void im2col(std::span<const T> image, const ConvGeometry& g, std::span<T> col) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < g.in_channels; ++ch) {
    const T* plane = image.data() + ch * g.in_pixels();
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        T* out = col.data() + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* out_row = out + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out_row, out_row + ow, T{0});
            continue;
          }
          const T* in_row = plane + iy * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            out_row[ox] = (ix < 0 || ix >= w) ? T{0} : in_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(std::span<const T> col, const ConvGeometry& g, std::span<T> image) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < g.in_channels; ++ch) {
    T* plane = image.data() + ch * g.in_pixels();
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const T* src = col.data() + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= h) continue;
          T* in_row = plane + iy * w;
          const T* src_row = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < w) in_row[ix] += src_row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y, const ConvGeometry& g) {
  const std::size_t patch = g.patch_size();
  const std::size_t pixels = g.out_pixels();
  const auto batch = static_cast<std::ptrdiff_t>(g.batch);
#pragma omp parallel
  {
    std::vector<T> col(patch * pixels);
#pragma omp for schedule(static)
    for (std::ptrdiff_t s = 0; s < batch; ++s) {
      const auto n = static_cast<std::size_t>(s);
      im2col<T>(x.subspan(n * g.in_channels * g.in_pixels(), g.in_channels * g.in_pixels()), g,
                col);
      auto out = y.subspan(n * g.out_channels * pixels, g.out_channels * pixels);
      gemm<T>(false, false, g.out_channels, pixels, patch, w, col, out, false);
      if (!bias.empty()) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          T* row = out.data() + o * pixels;
          for (std::size_t p = 0; p < pixels; ++p) row[p] += bias[o];
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(std::span<const T> dy, std::span<const T> w, std::span<T> dx,
                           const ConvGeometry& g) {
  const std::size_t patch = g.patch_size();
  const std::size_t pixels = g.out_pixels();
  const std::size_t image = g.in_channels * g.in_pixels();
  const auto batch = static_cast<std::ptrdiff_t>(g.batch);
#pragma omp parallel
  {
    std::vector<T> col(patch * pixels);
#pragma omp for schedule(static)
    for (std::ptrdiff_t s = 0; s < batch; ++s) {
      const auto n = static_cast<std::size_t>(s);
      gemm<T>(true, false, patch, pixels, g.out_channels, w,
              dy.subspan(n * g.out_channels * pixels, g.out_channels * pixels), col, false);
      auto dst = dx.subspan(n * image, image);
      std::fill(dst.begin(), dst.end(), T{0});
      col2im<T>(col, g, dst);
    }
  }
}

template <typename T>
void conv2d_backward_weight(std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            const ConvGeometry& g) {
  const std::size_t patch = g.patch_size();
  const std::size_t pixels = g.out_pixels();
  const std::size_t image = g.in_channels * g.in_pixels();
  std::vector<T> col(patch * pixels);
  // Samples are reduced sequentially; the GEMM parallelizes over output rows.
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col<T>(x.subspan(n * image, image), g, col);
    gemm<T>(false, true, g.out_channels, patch, pixels,
            dy.subspan(n * g.out_channels * pixels, g.out_channels * pixels), col, dw, n > 0);
  }
  if (g.batch == 0) std::fill(dw.begin(), dw.end(), T{0});
}

template <typename T>
void channel_moments(std::span<const T> x, std::size_t n, std::size_t c, std::size_t hw,
                     std::span<T> mean, std::span<T> var) {
  const double count = static_cast<double>(n * hw);
#pragma omp parallel for schedule(static) if (n * c * hw >= kParallelWork)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(c); ++ci) {
    const auto ch = static_cast<std::size_t>(ci);
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.data() + (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) sum += static_cast<double>(p[i]);
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.data() + (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        sq += d * d;
      }
    }
    mean[ch] = static_cast<T>(mu);
    var[ch] = static_cast<T>(sq / count);
  }
}

template <typename T>
void channel_affine(std::span<const T> x, std::span<const T> mean, std::span<const T> inv_std,
                    std::span<const T> gamma, std::span<const T> beta, std::span<T> y,
                    std::size_t n, std::size_t c, std::size_t hw) {
#pragma omp parallel for schedule(static) if (n * c * hw >= kParallelWork)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(c); ++ci) {
    const auto ch = static_cast<std::size_t>(ci);
    const T scale = gamma[ch] * inv_std[ch];
    const T shift = beta[ch] - mean[ch] * scale;
    for (std::size_t s = 0; s < n; ++s) {
      const T* src = x.data() + (s * c + ch) * hw;
      T* dst = y.data() + (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * scale + shift;
    }
  }
}

template <typename T>
void batchnorm_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> gamma,
                        std::span<const T> inv_std, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta, std::size_t n, std::size_t c, std::size_t hw) {
  const double count = static_cast<double>(n * hw);
#pragma omp parallel for schedule(static) if (n * c * hw >= kParallelWork)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(c); ++ci) {
    const auto ch = static_cast<std::size_t>(ci);
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += static_cast<double>(dy[off + i]);
        sum_dy_xhat += static_cast<double>(dy[off + i]) * static_cast<double>(xhat[off + i]);
      }
    }
    dbeta[ch] = static_cast<T>(sum_dy);
    dgamma[ch] = static_cast<T>(sum_dy_xhat);
    const double k = static_cast<double>(gamma[ch]) * static_cast<double>(inv_std[ch]) / count;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = count * static_cast<double>(dy[off + i]) - sum_dy -
                         static_cast<double>(xhat[off + i]) * sum_dy_xhat;
        dx[off + i] = static_cast<T>(k * v);
      }
    }
  }
}

#define DCM_INSTANTIATE_KERNELS(T)                                                             \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, std::span<const T>, \
                        std::span<const T>, std::span<T>, bool);                               \
  template void im2col<T>(std::span<const T>, const ConvGeometry&, std::span<T>);              \
  template void col2im<T>(std::span<const T>, const ConvGeometry&, std::span<T>);              \
  template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,  \
                                  std::span<T>, const ConvGeometry&);                          \
  template void conv2d_backward_input<T>(std::span<const T>, std::span<const T>, std::span<T>, \
                                         const ConvGeometry&);                                 \
  template void conv2d_backward_weight<T>(std::span<const T>, std::span<const T>,              \
                                          std::span<T>, const ConvGeometry&);                  \
  template void channel_moments<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,  \
                                   std::span<T>, std::span<T>);                                \
  template void channel_affine<T>(std::span<const T>, std::span<const T>, std::span<const T>,  \
                                  std::span<const T>, std::span<const T>, std::span<T>,        \
                                  std::size_t, std::size_t, std::size_t);                      \
  template void batchnorm_backward<T>(std::span<const T>, std::span<const T>,                  \
                                      std::span<const T>, std::span<const T>, std::span<T>,    \
                                      std::span<T>, std::span<T>, std::size_t, std::size_t,    \
                                      std::size_t);

DCM_INSTANTIATE_KERNELS(float)
DCM_INSTANTIATE_KERNELS(double)
#undef DCM_INSTANTIATE_KERNELS

}  // namespace dcm::kernels
