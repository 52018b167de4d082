#pragma once

// Classification and distillation losses. Every distillation term treats its
// target distribution as a constant: gradients flow into `pred` only.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcm/autograd/tensor.hpp"

namespace dcm::distill {

using ag::Tensor;

/// softmax(logits / temperature) per row; temperature must be positive.
template <typename T>
Tensor<T> softened_softmax(const Tensor<T>& logits, T temperature);

/// -(1/N) sum_n sum_m target * log(pred), log clamped at 1e-12.
template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& target, const Tensor<T>& pred);

/// (1/N) sum_n sum_m target * (log target - log pred), with 0 log 0 = 0.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& target, const Tensor<T>& pred);

/// Mean one-hot cross-entropy at temperature 1.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels);

/// Sum of classification losses over the auxiliary heads; 0 when there are none.
template <typename T>
Tensor<T> ds_loss(std::span<const Tensor<T>> aux_logits, std::span<const std::int32_t> labels);

enum class Measure { SoftCrossEntropy, KullbackLeibler };

template <typename T>
Tensor<T> divergence(Measure measure, const Tensor<T>& target, const Tensor<T>& pred);

/// Probabilities of the K+1 classifiers of one network on one batch,
/// auxiliary heads shallow to deep, default classifier last.
template <typename T>
struct KnowledgeSet {
  std::vector<Tensor<T>> probs;
  std::uint64_t batch_tag = 0;

  std::size_t num_aux() const { return probs.empty() ? 0 : probs.size() - 1; }
  /// Throws ShapeError when matrices disagree in shape.
  void check() const;
  /// Same probabilities, no history.
  KnowledgeSet detached() const;
};

template <typename T>
KnowledgeSet<T> knowledge_set(std::span<const Tensor<T>> logits, T temperature,
                              std::uint64_t batch_tag = 0);

/// sum_{k=1..K+1} divergence(teacher[k], student[k]). `terms`, when given,
/// receives the number of summed terms.
template <typename T>
Tensor<T> dcm_same_staged(const KnowledgeSet<T>& teacher, const KnowledgeSet<T>& student,
                          Measure measure = Measure::SoftCrossEntropy,
                          std::size_t* terms = nullptr);

/// sum over ordered pairs i != j of divergence(teacher[i], student[j]).
template <typename T>
Tensor<T> dcm_cross_staged(const KnowledgeSet<T>& teacher, const KnowledgeSet<T>& student,
                           Measure measure = Measure::SoftCrossEntropy,
                           std::size_t* terms = nullptr);

struct LossWeights {
  double alpha = 1.0;        // deep supervision
  double beta = 1.0;         // same-staged distillation
  double gamma = 1.0;        // cross-staged distillation
  double lambda = 1.0;       // last-layer KD / DML term
  double temperature = 1.0;

  std::vector<std::string> problems() const;
};

enum class Mode { Baseline, DS, KD, DML, DMLDS, DCM1, DCM2, DCM };

std::string_view to_string(Mode mode);
/// baseline, ds, kd, dml, dml+ds, dcm-1, dcm-2, dcm
Mode parse_mode(std::string_view text);
const std::vector<Mode>& all_modes();
/// Whether the mode uses auxiliary classifiers at all.
bool uses_aux(Mode mode);
/// Whether the objective reads the peer's knowledge.
bool uses_peer(Mode mode);

struct ObjectiveOptions {
  /// Measure of the last-layer term in DML and DML+DS.
  Measure dml_measure = Measure::KullbackLeibler;
  /// DCM-2 keeps the last-layer same-staged pair (weighted by beta).
  bool dcm2_keep_last_pair = true;
};

template <typename T>
struct Objective {
  Tensor<T> total;
  double c = 0.0;
  double ds = 0.0;
  double dcm1 = 0.0;  // same-staged terms, including a lone last-layer KD/DML term
  double dcm2 = 0.0;  // cross-staged terms
};

/// One network's objective:
///   L = L_c + alpha L_ds + beta L_dcm1(peer -> own) + gamma L_dcm2(peer -> own)
/// with terms switched per mode:
///   baseline  L_c
///   ds        L_c + alpha L_ds
///   kd        L_c + lambda CE(peer_last, own_last)
///   dml       L_c + lambda measure(peer_last, own_last)         (requires K = 0)
///   dml+ds    dml + alpha L_ds
///   dcm-1     L_c + alpha L_ds + beta L_dcm1
///   dcm-2     L_c + alpha L_ds + gamma L_dcm2 [+ beta CE(peer_last, own_last)]
///   dcm       L_c + alpha L_ds + beta L_dcm1 + gamma L_dcm2
/// `own_logits` holds the K+1 logits of this network; its probabilities are
/// formed at the configured temperature. The peer set is used as a constant.
template <typename T>
Objective<T> dcm_objective(std::span<const Tensor<T>> own_logits,
                           std::span<const std::int32_t> labels, const KnowledgeSet<T>& peer,
                           const LossWeights& weights, Mode mode,
                           const ObjectiveOptions& options = {});

}  // namespace dcm::distill
