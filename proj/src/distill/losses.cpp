#include "dcm/distill/losses.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cmath>

#include "dcm/autograd/ops.hpp"
#include "dcm/common/error.hpp"

namespace dcm::distill {

namespace {

template <typename T>
void check_pair(const char* op, const Tensor<T>& target, const Tensor<T>& pred) {
  if (target.shape().rank() != 2 || target.shape() != pred.shape()) {
    throw ShapeError(fmt::format("{}: target {} and prediction {} must be equal [N,M] shapes", op,
                                 target.shape().str(), pred.shape().str()));
  }
}

template <typename T>
void check_sets(const char* op, const KnowledgeSet<T>& a, const KnowledgeSet<T>& b) {
  if (a.probs.empty() || a.probs.size() != b.probs.size()) {
    throw ShapeError(fmt::format("{}: knowledge sets hold {} and {} classifiers", op,
                                 a.probs.size(), b.probs.size()));
  }
  a.check();
  b.check();
  if (a.probs[0].shape() != b.probs[0].shape()) {
    throw ShapeError(fmt::format("{}: knowledge sets have shapes {} and {}", op,
                                 a.probs[0].shape().str(), b.probs[0].shape().str()));
  }
}

template <typename T>
Tensor<T> zero_scalar() {
  return Tensor<T>::scalar(T{0});
}

template <typename T>
Tensor<T> accumulate(const Tensor<T>& total, const Tensor<T>& term) {
  return total.defined() ? ag::add(total, term) : term;
}

}  // namespace

template <typename T>
Tensor<T> softened_softmax(const Tensor<T>& logits, T temperature) {
  if (!(temperature > T{0})) {
    throw Error(fmt::format("softened_softmax: temperature must be positive, got {}", temperature));
  }
  return ag::softmax(logits, temperature);
}

template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& target, const Tensor<T>& pred) {
  check_pair("soft_cross_entropy", target, pred);
  const auto n = static_cast<T>(target.shape()[0]);
  return ag::scale(ag::sum(ag::mul(target.detach(), ag::safe_log(pred))), T{-1} / n);
}

template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& target, const Tensor<T>& pred) {
  check_pair("kl_divergence", target, pred);
  // KL = CE(target, pred) - H(target); the entropy is a constant here.
  T neg_entropy = 0;
  for (T t : target.values()) {
    if (t > T{0}) neg_entropy += t * std::log(t);
  }
  neg_entropy /= static_cast<T>(target.shape()[0]);
  return ag::add_scalar(soft_cross_entropy(target, pred), neg_entropy);
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  return ag::cross_entropy(logits, labels);
}

template <typename T>
Tensor<T> ds_loss(std::span<const Tensor<T>> aux_logits, std::span<const std::int32_t> labels) {
  Tensor<T> total;
  for (const auto& z : aux_logits) total = accumulate(total, classification_loss(z, labels));
  return total.defined() ? total : zero_scalar<T>();
}

template <typename T>
Tensor<T> divergence(Measure measure, const Tensor<T>& target, const Tensor<T>& pred) {
  return measure == Measure::SoftCrossEntropy ? soft_cross_entropy(target, pred)
                                              : kl_divergence(target, pred);
}

template <typename T>
void KnowledgeSet<T>::check() const {
  for (const auto& p : probs) {
    if (p.shape().rank() != 2 || p.shape() != probs.front().shape()) {
      throw ShapeError(fmt::format("knowledge set mixes shapes {} and {}",
                                   probs.front().shape().str(), p.shape().str()));
    }
  }
}

template <typename T>
KnowledgeSet<T> KnowledgeSet<T>::detached() const {
  KnowledgeSet out;
  out.batch_tag = batch_tag;
  for (const auto& p : probs) out.probs.push_back(p.detach());
  return out;
}

template <typename T>
KnowledgeSet<T> knowledge_set(std::span<const Tensor<T>> logits, T temperature,
                              std::uint64_t batch_tag) {
  KnowledgeSet<T> ks;
  ks.batch_tag = batch_tag;
  for (const auto& z : logits) ks.probs.push_back(softened_softmax(z, temperature));
  ks.check();
  return ks;
}

template <typename T>
Tensor<T> dcm_same_staged(const KnowledgeSet<T>& teacher, const KnowledgeSet<T>& student,
                          Measure measure, std::size_t* terms) {
  check_sets("dcm_same_staged", teacher, student);
  Tensor<T> total;
  for (std::size_t k = 0; k < teacher.probs.size(); ++k) {
    total = accumulate(total, divergence(measure, teacher.probs[k], student.probs[k]));
  }
  if (terms) *terms = teacher.probs.size();
  return total;
}

template <typename T>
Tensor<T> dcm_cross_staged(const KnowledgeSet<T>& teacher, const KnowledgeSet<T>& student,
                           Measure measure, std::size_t* terms) {
  check_sets("dcm_cross_staged", teacher, student);
  Tensor<T> total;
  std::size_t count = 0;
  for (std::size_t i = 0; i < teacher.probs.size(); ++i) {
    for (std::size_t j = 0; j < student.probs.size(); ++j) {
      if (i == j) continue;
      total = accumulate(total, divergence(measure, teacher.probs[i], student.probs[j]));
      ++count;
    }
  }
  if (terms) *terms = count;
  return total.defined() ? total : zero_scalar<T>();
}

std::vector<std::string> LossWeights::problems() const {
  std::vector<std::string> out;
  auto non_negative = [&](const char* name, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      out.push_back(fmt::format("{} must be a finite non-negative number, got {}", name, v));
    }
  };
  non_negative("alpha", alpha);
  non_negative("beta", beta);
  non_negative("gamma", gamma);
  non_negative("lambda", lambda);
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    out.push_back(fmt::format("temperature must be positive, got {}", temperature));
  }
  return out;
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::Baseline: return "baseline";
    case Mode::DS: return "ds";
    case Mode::KD: return "kd";
    case Mode::DML: return "dml";
    case Mode::DMLDS: return "dml+ds";
    case Mode::DCM1: return "dcm-1";
    case Mode::DCM2: return "dcm-2";
    case Mode::DCM: return "dcm";
  }
  return "?";
}

const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> modes{Mode::Baseline, Mode::DS,   Mode::KD,   Mode::DML,
                                       Mode::DMLDS,    Mode::DCM1, Mode::DCM2, Mode::DCM};
  return modes;
}

Mode parse_mode(std::string_view text) {
  for (Mode m : all_modes()) {
    if (to_string(m) == text) return m;
  }
  std::vector<std::string_view> names;
  for (Mode m : all_modes()) names.push_back(to_string(m));
  throw ConfigError({fmt::format("unknown mode '{}' (expected one of {})", text,
                                 fmt::join(names, ", "))});
}

bool uses_aux(Mode mode) {
  return mode == Mode::DS || mode == Mode::DMLDS || mode == Mode::DCM1 || mode == Mode::DCM2 ||
         mode == Mode::DCM;
}

bool uses_peer(Mode mode) { return mode != Mode::Baseline && mode != Mode::DS; }

template <typename T>
Objective<T> dcm_objective(std::span<const Tensor<T>> own_logits,
                           std::span<const std::int32_t> labels, const KnowledgeSet<T>& peer,
                           const LossWeights& weights, Mode mode, const ObjectiveOptions& options) {
  if (own_logits.empty()) throw ShapeError("dcm_objective: no classifier outputs");
  const std::size_t k_aux = own_logits.size() - 1;
  if (mode == Mode::DML && k_aux != 0) {
    throw ConfigError({fmt::format("mode dml requires no auxiliary heads, got {}", k_aux)});
  }

  Objective<T> out;
  const auto& last = own_logits.back();
  Tensor<T> total = classification_loss(last, labels);
  out.c = static_cast<double>(total.item());

  if (uses_aux(mode)) {
    auto ds = ds_loss(own_logits.first(k_aux), labels);
    out.ds = static_cast<double>(ds.item());
    total = ag::add(total, ag::scale(ds, static_cast<T>(weights.alpha)));
  }
  if (!uses_peer(mode)) {
    out.total = total;
    return out;
  }

  const T temperature = static_cast<T>(weights.temperature);
  const auto peer_const = peer.detached();
  if (mode == Mode::KD || mode == Mode::DML || mode == Mode::DMLDS) {
    if (peer_const.probs.empty()) throw ShapeError("dcm_objective: empty peer knowledge set");
    const Measure m = mode == Mode::KD ? Measure::SoftCrossEntropy : options.dml_measure;
    auto term = divergence(m, peer_const.probs.back(), softened_softmax(last, temperature));
    out.dcm1 = static_cast<double>(term.item());
    out.total = ag::add(total, ag::scale(term, static_cast<T>(weights.lambda)));
    return out;
  }

  const auto own = knowledge_set(own_logits, temperature, peer.batch_tag);
  if (mode == Mode::DCM1 || mode == Mode::DCM) {
    auto same = dcm_same_staged(peer_const, own);
    out.dcm1 = static_cast<double>(same.item());
    total = ag::add(total, ag::scale(same, static_cast<T>(weights.beta)));
  }
  if (mode == Mode::DCM2 || mode == Mode::DCM) {
    auto cross = dcm_cross_staged(peer_const, own);
    out.dcm2 = static_cast<double>(cross.item());
    total = ag::add(total, ag::scale(cross, static_cast<T>(weights.gamma)));
  }
  if (mode == Mode::DCM2 && options.dcm2_keep_last_pair) {
    auto pair = soft_cross_entropy(peer_const.probs.back(), own.probs.back());
    out.dcm1 = static_cast<double>(pair.item());
    total = ag::add(total, ag::scale(pair, static_cast<T>(weights.beta)));
  }
  out.total = total;
  return out;
}

#define DCM_INSTANTIATE(T)                                                                       \
  template Tensor<T> softened_softmax<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> soft_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> kl_divergence<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> classification_loss<T>(const Tensor<T>&, std::span<const std::int32_t>);    \
  template Tensor<T> ds_loss<T>(std::span<const Tensor<T>>, std::span<const std::int32_t>);      \
  template Tensor<T> divergence<T>(Measure, const Tensor<T>&, const Tensor<T>&);                 \
  template struct KnowledgeSet<T>;                                                               \
  template KnowledgeSet<T> knowledge_set<T>(std::span<const Tensor<T>>, T, std::uint64_t);       \
  template Tensor<T> dcm_same_staged<T>(const KnowledgeSet<T>&, const KnowledgeSet<T>&, Measure, \
                                        std::size_t*);                                           \
  template Tensor<T> dcm_cross_staged<T>(const KnowledgeSet<T>&, const KnowledgeSet<T>&,         \
                                         Measure, std::size_t*);                                 \
  template Objective<T> dcm_objective<T>(std::span<const Tensor<T>>,                             \
                                         std::span<const std::int32_t>, const KnowledgeSet<T>&,  \
                                         const LossWeights&, Mode, const ObjectiveOptions&);

DCM_INSTANTIATE(float)
DCM_INSTANTIATE(double)

}  // namespace dcm::distill
