#include "dcm/net/network.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dcm/autograd/ops.hpp"
#include "dcm/common/error.hpp"
#include "dcm/common/random.hpp"

namespace dcm::net {

namespace {

using ag::Tensor;

template <typename T>
Tensor<T> uniform_tensor(const ag::Shape& shape, double bound, Engine& eng) {
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(uniform(eng, -bound, bound));
  return Tensor<T>::from(shape, std::move(v), true);
}

template <typename T>
detail::Conv<T> make_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          Engine& eng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  return {uniform_tensor<T>({out, in, k, k}, bound, eng), stride, k / 2};
}

template <typename T>
detail::Norm<T> make_norm(std::size_t c) {
  return {Tensor<T>::full({c}, T{1}, true), Tensor<T>::zeros({c}, true), Tensor<T>::zeros({c}),
          Tensor<T>::full({c}, T{1})};
}

template <typename T>
detail::Linear<T> make_linear(std::size_t in, std::size_t out, Engine& eng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_tensor<T>({out, in}, bound, eng), Tensor<T>::zeros({out}, true)};
}

template <typename T>
std::vector<std::vector<detail::Block<T>>> make_stages(std::size_t in_channels,
                                                       const std::vector<StageSpec>& stages,
                                                       Engine& eng) {
  std::vector<std::vector<detail::Block<T>>> out;
  std::size_t c_in = in_channels;
  for (const auto& st : stages) {
    std::vector<detail::Block<T>> blocks;
    for (std::size_t b = 0; b < st.blocks; ++b) {
      const std::size_t stride = (b == 0 && st.downsample) ? 2 : 1;
      detail::Block<T> blk;
      blk.type = st.block;
      blk.conv1 = make_conv<T>(c_in, st.channels, 3, stride, eng);
      blk.bn1 = make_norm<T>(st.channels);
      blk.conv2 = make_conv<T>(st.channels, st.channels, 3, 1, eng);
      blk.bn2 = make_norm<T>(st.channels);
      if (st.block == BlockType::Residual && (stride != 1 || c_in != st.channels)) {
        blk.has_projection = true;
        blk.projection = make_conv<T>(c_in, st.channels, 1, stride, eng);
        blk.projection_bn = make_norm<T>(st.channels);
      }
      blocks.push_back(std::move(blk));
      c_in = st.channels;
    }
    out.push_back(std::move(blocks));
  }
  return out;
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const detail::Conv<T>& c) {
  return ag::conv2d(x, c.weight, Tensor<T>{}, c.stride, c.pad);
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const detail::Norm<T>& n, bool training) {
  auto rm = n.running_mean;
  auto rv = n.running_var;
  return ag::batch_norm(x, n.gamma, n.beta, rm.mutable_values(), rv.mutable_values(),
                        ag::BatchNormOptions{.training = training});
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const detail::Block<T>& b, bool training) {
  auto h = ag::relu(norm(conv(x, b.conv1), b.bn1, training));
  h = norm(conv(h, b.conv2), b.bn2, training);
  if (b.type == BlockType::Residual) {
    h = ag::add(h, b.has_projection ? norm(conv(x, b.projection), b.projection_bn, training) : x);
  }
  return ag::relu(h);
}

template <typename T>
Tensor<T> stages_forward(Tensor<T> x, const std::vector<std::vector<detail::Block<T>>>& stages,
                         bool training) {
  for (const auto& st : stages) {
    for (const auto& b : st) x = block_forward(x, b, training);
  }
  return x;
}

template <typename T>
Tensor<T> head_forward(const Tensor<T>& feature, const detail::Head<T>& head, bool training) {
  if (head.spec.style == HeadStyle::Apfc) {
    auto pooled = ag::flatten(ag::adaptive_avg_pool(feature, 4, 4));
    return ag::linear(pooled, head.fc.weight, head.fc.bias);
  }
  auto h = stages_forward(feature, head.stages, training);
  return ag::linear(ag::global_avg_pool(h), head.fc.weight, head.fc.bias);
}

template <typename F, typename Conv>
void visit_conv(const std::string& prefix, Conv& c, F& f) {
  f(prefix + ".weight", c.weight, true);
}

template <typename F, typename Norm>
void visit_norm(const std::string& prefix, Norm& n, F& f) {
  f(prefix + ".gamma", n.gamma, true);
  f(prefix + ".beta", n.beta, true);
  f(prefix + ".running_mean", n.running_mean, false);
  f(prefix + ".running_var", n.running_var, false);
}

template <typename F, typename Stages>
void visit_stages(const std::string& prefix, Stages& stages, std::size_t first_stage, F& f) {
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      auto& blk = stages[s][b];
      const std::string p = fmt::format("{}stage{}.block{}", prefix, first_stage + s, b);
      visit_conv(p + ".conv1", blk.conv1, f);
      visit_norm(p + ".bn1", blk.bn1, f);
      visit_conv(p + ".conv2", blk.conv2, f);
      visit_norm(p + ".bn2", blk.bn2, f);
      if (blk.has_projection) {
        visit_conv(p + ".shortcut", blk.projection, f);
        visit_norm(p + ".shortcut_bn", blk.projection_bn, f);
      }
    }
  }
}

}  // namespace

template <typename T>
template <typename Self, typename F>
void SupervisedNet<T>::visit(Self& self, bool include_aux, F&& f) {
  visit_conv("stem.conv", self.stem_, f);
  visit_norm("stem.bn", self.stem_bn_, f);
  visit_stages("", self.stages_, 1, f);
  f("fc.weight", self.fc_.weight, true);
  f("fc.bias", self.fc_.bias, true);
  if (!include_aux) return;
  for (auto& head : self.heads_) {
    const std::string prefix = fmt::format("aux{}.", head.spec.location);
    visit_stages(prefix, head.stages, head.spec.location + 1, f);
    f(prefix + "fc.weight", head.fc.weight, true);
    f(prefix + "fc.bias", head.fc.bias, true);
  }
}

template <typename T>
std::vector<std::size_t> SupervisedNet<T>::locations() const {
  std::vector<std::size_t> out;
  for (const auto& h : heads_) out.push_back(h.spec.location);
  return out;
}

template <typename T>
std::vector<Tensor<T>> SupervisedNet<T>::forward_all_heads(const Tensor<T>& x, bool training) {
  if (x.shape().rank() != 4 || x.shape()[1] != spec_.in_channels) {
    throw ShapeError(fmt::format("forward: expected input [N,{},H,W], got {}", spec_.in_channels,
                                 x.shape().str()));
  }
  std::vector<Tensor<T>> features;
  features.reserve(stages_.size() + 1);
  features.push_back(ag::relu(norm(conv(x, stem_), stem_bn_, training)));
  for (const auto& st : stages_) {
    Tensor<T> h = features.back();
    for (const auto& b : st) h = block_forward(h, b, training);
    features.push_back(h);
  }
  std::vector<Tensor<T>> logits;
  logits.reserve(heads_.size() + 1);
  for (const auto& head : heads_) {
    logits.push_back(head_forward(features[head.spec.location], head, training));
  }
  logits.push_back(ag::linear(ag::global_avg_pool(features.back()), fc_.weight, fc_.bias));
  return logits;
}

template <typename T>
Tensor<T> SupervisedNet<T>::forward(const Tensor<T>& x, bool training) {
  if (x.shape().rank() != 4 || x.shape()[1] != spec_.in_channels) {
    throw ShapeError(fmt::format("forward: expected input [N,{},H,W], got {}", spec_.in_channels,
                                 x.shape().str()));
  }
  auto h = ag::relu(norm(conv(x, stem_), stem_bn_, training));
  h = stages_forward(h, stages_, training);
  return ag::linear(ag::global_avg_pool(h), fc_.weight, fc_.bias);
}

template <typename T>
std::vector<NamedTensor<T>> SupervisedNet<T>::tensors(bool include_aux) const {
  std::vector<NamedTensor<T>> out;
  visit(*this, include_aux, [&](const std::string& name, const Tensor<T>& t, bool trainable) {
    out.push_back({name, t, trainable});
  });
  return out;
}

template <typename T>
std::vector<Tensor<T>> SupervisedNet<T>::parameters(bool include_aux) const {
  std::vector<Tensor<T>> out;
  visit(*this, include_aux, [&](const std::string&, const Tensor<T>& t, bool trainable) {
    if (trainable) out.push_back(t);
  });
  return out;
}

template <typename T>
std::size_t SupervisedNet<T>::parameter_count(bool include_aux) const {
  std::size_t n = 0;
  for (const auto& t : parameters(include_aux)) n += t.numel();
  return n;
}

template <typename T>
SupervisedNet<T> SupervisedNet<T>::clone() const {
  SupervisedNet copy = *this;
  visit(copy, true, [](const std::string&, Tensor<T>& t, bool) { t = t.clone(); });
  return copy;
}

template <typename T>
Manifest SupervisedNet<T>::export_backbone() const {
  Manifest m;
  visit(*this, false, [&](const std::string& name, const Tensor<T>& t, bool trainable) {
    m.entries.push_back(
        {name, t.shape(), trainable, std::vector<double>(t.values().begin(), t.values().end())});
  });
  return m;
}

template <typename T>
void SupervisedNet<T>::import_backbone(const Manifest& manifest) {
  std::vector<std::string> problems;
  std::set<std::string> expected;
  visit(*this, false, [&](const std::string& name, const Tensor<T>& t, bool) {
    expected.insert(name);
    const ManifestEntry* e = manifest.find(name);
    if (e == nullptr) {
      problems.push_back(fmt::format("missing '{}'", name));
    } else if (e->shape != t.shape()) {
      problems.push_back(
          fmt::format("'{}' has shape {}, expected {}", name, e->shape.str(), t.shape().str()));
    }
  });
  for (const auto& e : manifest.entries) {
    if (!expected.count(e.name)) problems.push_back(fmt::format("unexpected '{}'", e.name));
  }
  if (!problems.empty()) {
    throw DataError(fmt::format("manifest does not match backbone '{}': {}", spec_.name,
                                fmt::join(problems, "; ")));
  }
  visit(*this, false, [&](const std::string& name, Tensor<T>& t, bool) {
    const auto& src = manifest.find(name)->values;
    auto dst = t.mutable_values();
    std::transform(src.begin(), src.end(), dst.begin(), [](double v) { return static_cast<T>(v); });
  });
}

template <typename T>
SupervisedNet<T> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  SupervisedNet<T> net;
  net.spec_ = spec;
  Engine eng(derive_seed(seed, "trunk"));
  net.stem_ = make_conv<T>(spec.in_channels, spec.stem_channels, 3, 1, eng);
  net.stem_bn_ = make_norm<T>(spec.stem_channels);
  net.stages_ = make_stages<T>(spec.stem_channels, spec.stages, eng);
  net.fc_ = make_linear<T>(spec.stages.back().channels, spec.num_classes, eng);
  return net;
}

template <typename T>
SupervisedNet<T> attach_heads(SupervisedNet<T> net, const std::vector<std::size_t>& locations,
                              HeadStyle style, std::uint64_t seed) {
  std::vector<std::string> problems;
  std::set<std::size_t> seen;
  for (auto loc : net.locations()) seen.insert(loc);
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const std::size_t loc = locations[i];
    if (!is_attachment_point(net.spec_, loc)) {
      problems.push_back(fmt::format("locations[{}]={} is not a down-sampling boundary of '{}'",
                                     i, loc, net.spec_.name));
    } else if (!seen.insert(loc).second) {
      problems.push_back(fmt::format("locations[{}]={} is duplicated", i, loc));
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));

  for (auto loc : locations) {
    detail::Head<T> head;
    head.spec = head_spec_for(net.spec_, loc, style);
    Engine eng(derive_seed(seed, 0x4845414400000000ULL + loc));
    head.stages = make_stages<T>(head.spec.in_channels, head.spec.stages, eng);
    const std::size_t fc_in = style == HeadStyle::Apfc ? head.spec.in_channels * 16
                                                       : head.spec.stages.back().channels;
    head.fc = make_linear<T>(fc_in, net.spec_.num_classes, eng);
    net.heads_.push_back(std::move(head));
  }
  std::sort(net.heads_.begin(), net.heads_.end(),
            [](const auto& a, const auto& b) { return a.spec.location < b.spec.location; });
  return net;
}

template class SupervisedNet<float>;
template class SupervisedNet<double>;
template SupervisedNet<float> build_backbone<float>(const BackboneSpec&, std::uint64_t);
template SupervisedNet<double> build_backbone<double>(const BackboneSpec&, std::uint64_t);
template SupervisedNet<float> attach_heads<float>(SupervisedNet<float>,
                                                  const std::vector<std::size_t>&, HeadStyle,
                                                  std::uint64_t);
template SupervisedNet<double> attach_heads<double>(SupervisedNet<double>,
                                                    const std::vector<std::size_t>&, HeadStyle,
                                                    std::uint64_t);

}  // namespace dcm::net
