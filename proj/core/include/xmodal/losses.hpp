#pragma once

#include "xmodal/linalg.hpp"

#include <cstddef>

namespace xmodal {

/// Probabilities are clamped here before a log when only probabilities are
/// known (no logits to take a log-softmax from).
inline constexpr double kLogClamp = 1e-12;

enum class Reduction { Mean, Sum };

/// A softmax distribution over M anchors for one embedding.
struct SimilarityDistribution {
  RowVector probs;
  double temperature = 0.01;
};

/// Row-wise distributions for a batch, with the matching log-probabilities.
/// When built from logits the logs come from a log-softmax and are exact;
/// when built from raw probabilities they are log(max(p, kLogClamp)).
struct DistributionBatch {
  Matrix probs;
  Matrix log_probs;

  static DistributionBatch from_logits(const Matrix& logits);
  static DistributionBatch from_probs(const Matrix& probs);

  std::size_t rows() const noexcept { return static_cast<std::size_t>(probs.rows()); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(probs.cols()); }
};

/// A scalar loss and its gradient with respect to one input.
struct LossTerm {
  double value = 0.0;
  Matrix grad;
};

/// Numerically stable row softmax (max subtracted before exp).
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

/// Similarity logits (e . a_j) / tau for every row of `embeddings`.
Matrix similarity_logits(const Matrix& embeddings, const Matrix& anchors, double temperature);

/// Softmax of (e . a_j) / tau over the anchor rows. `embedding` and the
/// anchors are expected unit-norm. Throws NonPositiveTemperature.
SimilarityDistribution cross_modal_similarity(const Eigen::Ref<const RowVector>& embedding,
                                              const Matrix& anchors, double temperature);

/// Batch form: one distribution per row of `embeddings`.
DistributionBatch cross_modal_similarity_batch(const Matrix& embeddings, const Matrix& anchors,
                                               double temperature);

/// ISM: -(1/N) sum_i q_i . k_i (or the plain sum). Gradient is with respect
/// to the unit rows q. Throws ShapeMismatch.
LossTerm ism_loss(const Matrix& q, const Matrix& k, Reduction reduction = Reduction::Mean);

/// Cross-entropy H(k_dist_i, q_dist_i). Gradient is with respect to the
/// student logits that produced q_dist; the teacher side is a constant.
LossTerm cross_entropy_term(const DistributionBatch& q_dist, const Matrix& k_probs,
                            Reduction reduction = Reduction::Mean);

/// Entropy H(q_dist_i). Gradient is with respect to the student logits.
LossTerm entropy_term(const DistributionBatch& q_dist, Reduction reduction = Reduction::Mean);

/// CSM = CE(teacher, student) + EntMin(student), reduced over rows.
struct CsmLoss {
  double ce = 0.0;
  double ent_min = 0.0;
  double value = 0.0;
  Matrix grad;  // w.r.t. student logits
};

CsmLoss csm_loss(const DistributionBatch& q_dist, const Matrix& k_probs,
                 Reduction reduction = Reduction::Mean, double ent_weight = 1.0);

/// KL(k_dist_i || q_dist_i) reduced over rows; gradient w.r.t. student logits.
LossTerm kl_matching_loss(const DistributionBatch& q_dist, const Matrix& k_probs,
                          Reduction reduction = Reduction::Mean);

/// One-hot at the teacher's argmax (lowest index on ties), smoothed:
/// (1 - alpha) on j*, alpha / M everywhere.
RowVector similarity_smoothing(const Eigen::Ref<const RowVector>& k_probs, double alpha);
Matrix similarity_smoothing_rows(const Matrix& k_probs, double alpha);

/// Backpropagates a gradient with respect to q = z / |z| onto z.
Matrix normalize_backward(const Matrix& raw, const Matrix& grad_unit);

enum class LossVariant { CeEntMin, Kl };

struct LossConfig {
  double temperature = 0.01;
  double lambda_ism = 10.0;
  bool csm_enabled = true;
  LossVariant variant = LossVariant::CeEntMin;
  bool smoothing_enabled = true;
  double smoothing_alpha = 0.2;
  /// Weight on the smoothed target when mixing with the raw teacher
  /// distribution; 1 replaces the teacher distribution outright.
  double smoothing_mix = 1.0;
  double ent_weight = 1.0;
  Reduction reduction = Reduction::Mean;
};

struct LossReport {
  double csm_ce = 0.0;   // CE, or KL under LossVariant::Kl
  double ent_min = 0.0;  // unweighted entropy term; 0 under Kl
  double ism = 0.0;
  double total = 0.0;
  Matrix grad_q;  // d total / d raw student output (pre-normalization)
};

/// The full objective: CSM (+ smoothing) + lambda_ISM * ISM.
///
/// `student_raw` is the unnormalized student output; `teacher_unit` and
/// `anchors_unit` must be row-normalized. The teacher side is detached.
LossReport total_loss(const Matrix& student_raw, const Matrix& teacher_unit,
                      const Matrix& anchors_unit, const LossConfig& config);

/// Teacher target distribution the CSM term is trained against, after
/// optional smoothing/mixing.
Matrix teacher_targets(const Matrix& teacher_unit, const Matrix& anchors_unit,
                       const LossConfig& config);

}  // namespace xmodal
