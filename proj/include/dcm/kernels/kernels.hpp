#pragma once

// Dense compute kernels behind the autograd operators.
//
// `dcm::kernels` holds the OpenMP-parallel versions used for training.
// `dcm::kernels::reference` holds plain serial loops with the textbook
// formulation; tests and the benchmark compare the two. Parallel loops only
// split independent outputs (rows, samples, channels), so each output element
// is reduced in a fixed order and results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace dcm::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const noexcept { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const noexcept { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch_size() const noexcept { return in_channels * kernel * kernel; }
  std::size_t out_pixels() const noexcept { return out_height() * out_width(); }
  std::size_t in_pixels() const noexcept { return height * width; }
};

/// C[m,n] = (accumulate ? C : 0) + op(A)[m,k] * op(B)[k,n], all row-major.
/// With trans_a, A is stored as [k,m]; with trans_b, B is stored as [n,k].
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate);

/// Unfolds one [C,H,W] image into a [C*k*k, Ho*Wo] patch matrix.
template <typename T>
void im2col(std::span<const T> image, const ConvGeometry& g, std::span<T> col);

/// Adjoint of im2col; accumulates into `image`.
template <typename T>
void col2im(std::span<const T> col, const ConvGeometry& g, std::span<T> image);

/// x:[N,C,H,W] w:[O,C,k,k] bias:[O] or empty -> y:[N,O,Ho,Wo]
template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y, const ConvGeometry& g);

/// Overwrites dx with dL/dx.
template <typename T>
void conv2d_backward_input(std::span<const T> dy, std::span<const T> w, std::span<T> dx,
                           const ConvGeometry& g);

/// Overwrites dw with dL/dw.
template <typename T>
void conv2d_backward_weight(std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            const ConvGeometry& g);

/// Per-channel batch statistics over N*HW values; var is the biased estimate.
template <typename T>
void channel_moments(std::span<const T> x, std::size_t n, std::size_t c, std::size_t hw,
                     std::span<T> mean, std::span<T> var);

/// y = gamma * (x - mean) * inv_std + beta, per channel.
template <typename T>
void channel_affine(std::span<const T> x, std::span<const T> mean, std::span<const T> inv_std,
                    std::span<const T> gamma, std::span<const T> beta, std::span<T> y,
                    std::size_t n, std::size_t c, std::size_t hw);

/// Backward of training-mode batch norm given normalized activations xhat.
/// Overwrites dx, dgamma and dbeta.
template <typename T>
void batchnorm_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> gamma,
                        std::span<const T> inv_std, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta, std::size_t n, std::size_t c, std::size_t hw);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate);

/// Direct seven-loop convolution.
template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y, const ConvGeometry& g);

template <typename T>
void conv2d_backward_input(std::span<const T> dy, std::span<const T> w, std::span<T> dx,
                           const ConvGeometry& g);

template <typename T>
void conv2d_backward_weight(std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            const ConvGeometry& g);

template <typename T>
void channel_moments(std::span<const T> x, std::size_t n, std::size_t c, std::size_t hw,
                     std::span<T> mean, std::span<T> var);

template <typename T>
void batchnorm_backward(std::span<const T> dy, std::span<const T> xhat, std::span<const T> gamma,
                        std::span<const T> inv_std, std::span<T> dx, std::span<T> dgamma,
                        std::span<T> dbeta, std::size_t n, std::size_t c, std::size_t hw);

}  // namespace reference
}  // namespace dcm::kernels
