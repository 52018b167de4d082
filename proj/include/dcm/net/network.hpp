#pragma once

// Trunk + classifier heads. The default classifier sits at the end of the
// trunk; auxiliary heads hang off down-sampling boundaries and are dropped
// by export_backbone().

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dcm/autograd/tensor.hpp"
#include "dcm/net/manifest.hpp"
#include "dcm/net/spec.hpp"

namespace dcm::net {

template <typename T>
struct NamedTensor {
  std::string name;
  ag::Tensor<T> tensor;
  bool trainable = true;
};

namespace detail {

template <typename T>
struct Conv {
  ag::Tensor<T> weight;  // [out, in, k, k], no bias (a norm layer follows)
  std::size_t stride = 1;
  std::size_t pad = 1;
};

template <typename T>
struct Norm {
  ag::Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct Block {
  BlockType type = BlockType::Residual;
  Conv<T> conv1, conv2;
  Norm<T> bn1, bn2;
  bool has_projection = false;
  Conv<T> projection;  // 1x1 shortcut when stride or width changes
  Norm<T> projection_bn;
};

template <typename T>
struct Linear {
  ag::Tensor<T> weight;  // [out, in]
  ag::Tensor<T> bias;
};

template <typename T>
struct Head {
  HeadSpec spec;
  std::vector<std::vector<Block<T>>> stages;
  Linear<T> fc;
};

}  // namespace detail

template <typename T>
class SupervisedNet {
 public:
  const BackboneSpec& spec() const { return spec_; }
  /// K, the number of auxiliary heads.
  std::size_t num_aux() const { return heads_.size(); }
  /// Attachment locations of the auxiliary heads, shallow to deep.
  std::vector<std::size_t> locations() const;
  const HeadSpec& head_spec(std::size_t k) const { return heads_.at(k).spec; }

  /// K+1 logit tensors [N, M]: auxiliary heads shallow to deep, then the
  /// default classifier. The trunk runs once and feeds every head. In
  /// training mode batch-norm running statistics are updated.
  std::vector<ag::Tensor<T>> forward_all_heads(const ag::Tensor<T>& x, bool training);
  /// Default classifier only.
  ag::Tensor<T> forward(const ag::Tensor<T>& x, bool training);

  /// Parameters and running statistics in a fixed order, trunk first.
  std::vector<NamedTensor<T>> tensors(bool include_aux = true) const;
  /// Trainable tensors only, same order as tensors().
  std::vector<ag::Tensor<T>> parameters(bool include_aux = true) const;
  std::size_t parameter_count(bool include_aux = true) const;

  /// Deep copy: no tensor storage is shared with the original.
  SupervisedNet clone() const;

  /// Trunk and default classifier only.
  Manifest export_backbone() const;
  /// Loads a manifest produced by export_backbone() of the same spec.
  void import_backbone(const Manifest& manifest);

  template <typename U>
  friend SupervisedNet<U> build_backbone(const BackboneSpec& spec, std::uint64_t seed);
  template <typename U>
  friend SupervisedNet<U> attach_heads(SupervisedNet<U> net,
                                       const std::vector<std::size_t>& locations,
                                       HeadStyle style, std::uint64_t seed);

 private:
  // f(name, tensor handle, trainable) over trunk then heads.
  template <typename Self, typename F>
  static void visit(Self& self, bool include_aux, F&& f);

  BackboneSpec spec_;
  detail::Conv<T> stem_;
  detail::Norm<T> stem_bn_;
  std::vector<std::vector<detail::Block<T>>> stages_;
  detail::Linear<T> fc_;
  std::vector<detail::Head<T>> heads_;
};

/// Validates `spec` and initializes a K=0 network deterministically from `seed`.
template <typename T>
SupervisedNet<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed);

/// Adds one auxiliary head per location. Locations must be distinct
/// down-sampling boundaries not already carrying a head. Each head is
/// initialized from (seed, location), so the order of `locations` does not
/// change the result.
template <typename T>
SupervisedNet<T> attach_heads(SupervisedNet<T> net, const std::vector<std::size_t>& locations,
                              HeadStyle style, std::uint64_t seed);

extern template class SupervisedNet<float>;
extern template class SupervisedNet<double>;

}  // namespace dcm::net
