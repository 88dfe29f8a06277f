#include "xmodal/losses.hpp"

#include "xmodal/embedding_store.hpp"
#include "xmodal/error.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace xmodal {

namespace {

void require_temperature(double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "temperature must be > 0, got " + std::to_string(temperature));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

double reduce(const std::vector<double>& per_row, Reduction reduction) {
  const double total = pairwise_sum(per_row);
  if (reduction == Reduction::Mean && !per_row.empty()) {
    return total / static_cast<double>(per_row.size());
  }
  return total;
}

double row_scale(std::size_t rows, Reduction reduction) {
  return (reduction == Reduction::Mean && rows > 0) ? 1.0 / static_cast<double>(rows) : 1.0;
}

}  // namespace

DistributionBatch DistributionBatch::from_logits(const Matrix& logits) {
  DistributionBatch out;
  out.log_probs = log_softmax_rows(logits);
  out.probs = out.log_probs.array().exp().matrix();
  // exp(log_softmax) can drift from summing to 1 by an ulp or two; renormalize.
  for (Eigen::Index r = 0; r < out.probs.rows(); ++r) {
    out.probs.row(r) /= out.probs.row(r).sum();
  }
  return out;
}

DistributionBatch DistributionBatch::from_probs(const Matrix& probs) {
  DistributionBatch out;
  out.probs = probs;
  out.log_probs = probs.unaryExpr([](double p) { return std::log(std::max(p, kLogClamp)); });
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    const RowVector shifted = logits.row(r).array() - peak;
    const double log_norm = std::log(shifted.array().exp().sum());
    out.row(r) = shifted.array() - log_norm;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    const RowVector e = (logits.row(r).array() - peak).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

Matrix similarity_logits(const Matrix& embeddings, const Matrix& anchors, double temperature) {
  require_temperature(temperature);
  if (embeddings.cols() != anchors.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "embedding dim " + std::to_string(embeddings.cols()) +
                                              " != anchor dim " + std::to_string(anchors.cols()));
  }
  return (embeddings * anchors.transpose()) / temperature;
}

SimilarityDistribution cross_modal_similarity(const Eigen::Ref<const RowVector>& embedding,
                                              const Matrix& anchors, double temperature) {
  const Matrix e = embedding;
  const Matrix probs = softmax_rows(similarity_logits(e, anchors, temperature));
  return {probs.row(0), temperature};
}

DistributionBatch cross_modal_similarity_batch(const Matrix& embeddings, const Matrix& anchors,
                                         double temperature) {
  return DistributionBatch::from_logits(similarity_logits(embeddings, anchors, temperature));
}

LossTerm ism_loss(const Matrix& q, const Matrix& k, Reduction reduction) {
  require_same_shape(q, k, "ism_loss");
  std::vector<double> per_row(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    per_row[static_cast<std::size_t>(i)] = -q.row(i).dot(k.row(i));
  }
  const double scale = row_scale(per_row.size(), reduction);
  return {reduce(per_row, reduction), -scale * k};
}

LossTerm cross_entropy_term(const DistributionBatch& q_dist, const Matrix& k_probs,
                            Reduction reduction) {
  require_same_shape(q_dist.probs, k_probs, "cross_entropy_term");
  const auto n = q_dist.rows();
  const double scale = row_scale(n, reduction);
  std::vector<double> per_row(n);
  Matrix grad(q_dist.probs.rows(), q_dist.probs.cols());
  for (Eigen::Index i = 0; i < q_dist.probs.rows(); ++i) {
    const auto p = k_probs.row(i);
    per_row[static_cast<std::size_t>(i)] = -p.dot(q_dist.log_probs.row(i));
    grad.row(i) = scale * (q_dist.probs.row(i) * p.sum() - p);
  }
  return {reduce(per_row, reduction), std::move(grad)};
}

LossTerm entropy_term(const DistributionBatch& q_dist, Reduction reduction) {
  const auto n = q_dist.rows();
  const double scale = row_scale(n, reduction);
  std::vector<double> per_row(n);
  Matrix grad(q_dist.probs.rows(), q_dist.probs.cols());
  for (Eigen::Index i = 0; i < q_dist.probs.rows(); ++i) {
    const auto q = q_dist.probs.row(i).array();
    const auto log_q = q_dist.log_probs.row(i).array();
    const double entropy = -(q * log_q).sum();
    per_row[static_cast<std::size_t>(i)] = entropy;
    // dH/dz_k = -q_k (log q_k + H)
    grad.row(i) = (-scale * q * (log_q + entropy)).matrix();
  }
  return {reduce(per_row, reduction), std::move(grad)};
}

CsmLoss csm_loss(const DistributionBatch& q_dist, const Matrix& k_probs, Reduction reduction,
                 double ent_weight) {
  auto ce = cross_entropy_term(q_dist, k_probs, reduction);
  auto ent = entropy_term(q_dist, reduction);
  CsmLoss out;
  out.ce = ce.value;
  out.ent_min = ent.value;
  out.value = ce.value + ent_weight * ent.value;
  out.grad = ce.grad + ent_weight * ent.grad;
  return out;
}

LossTerm kl_matching_loss(const DistributionBatch& q_dist, const Matrix& k_probs,
                          Reduction reduction) {
  require_same_shape(q_dist.probs, k_probs, "kl_matching_loss");
  const auto n = q_dist.rows();
  const double scale = row_scale(n, reduction);
  std::vector<double> per_row(n);
  Matrix grad(q_dist.probs.rows(), q_dist.probs.cols());
  for (Eigen::Index i = 0; i < q_dist.probs.rows(); ++i) {
    double kl = 0.0;
    for (Eigen::Index j = 0; j < k_probs.cols(); ++j) {
      const double p = k_probs(i, j);
      if (p > 0.0) kl += p * (std::log(p) - q_dist.log_probs(i, j));
    }
    per_row[static_cast<std::size_t>(i)] = kl;
    grad.row(i) = scale * (q_dist.probs.row(i) * k_probs.row(i).sum() - k_probs.row(i));
  }
  return {reduce(per_row, reduction), std::move(grad)};
}

RowVector similarity_smoothing(const Eigen::Ref<const RowVector>& k_probs, double alpha) {
  const auto m = k_probs.size();
  const auto peak = static_cast<Eigen::Index>(argmax(k_probs));
  const double off_peak = alpha / static_cast<double>(m);
  RowVector out = RowVector::Constant(m, off_peak);
  out(peak) = (1.0 - alpha) + off_peak;
  auto index_order_sum = [&] {
    double total = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) total += out(j);
    return total;
  };
  // Nudge the peak a few ulps toward an exact index-order sum of 1; when that
  // cannot land on 1, the last entry absorbs the rounding instead
  // (for p in [0, 1], fl(1 - p) + p rounds back to 1).
  for (int attempt = 0; attempt < 8; ++attempt) {
    const double total = index_order_sum();
    if (total == 1.0) return out;
    out(peak) = std::nextafter(out(peak), total < 1.0 ? 2.0 : 0.0);
  }
  if (index_order_sum() != 1.0) {
    out(peak) = (1.0 - alpha) + off_peak;
    double partial = 0.0;
    for (Eigen::Index j = 0; j + 1 < m; ++j) partial += out(j);
    out(m - 1) = 1.0 - partial;
  }
  return out;
}

Matrix similarity_smoothing_rows(const Matrix& k_probs, double alpha) {
  Matrix out(k_probs.rows(), k_probs.cols());
  for (Eigen::Index i = 0; i < k_probs.rows(); ++i) {
    out.row(i) = similarity_smoothing(k_probs.row(i), alpha);
  }
  return out;
}

Matrix normalize_backward(const Matrix& raw, const Matrix& grad_unit) {
  require_same_shape(raw, grad_unit, "normalize_backward");
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorCode::ZeroVector, "cannot differentiate through a zero row",
                  static_cast<std::size_t>(i));
    }
    const RowVector q = raw.row(i) / norm;
    const auto g = grad_unit.row(i);
    out.row(i) = (g - g.dot(q) * q) / norm;
  }
  return out;
}

Matrix teacher_targets(const Matrix& teacher_unit, const Matrix& anchors_unit,
                       const LossConfig& config) {
  Matrix probs = softmax_rows(similarity_logits(teacher_unit, anchors_unit, config.temperature));
  if (!config.smoothing_enabled) return probs;
  const Matrix smoothed = similarity_smoothing_rows(probs, config.smoothing_alpha);
  if (config.smoothing_mix == 1.0) return smoothed;
  return config.smoothing_mix * smoothed + (1.0 - config.smoothing_mix) * probs;
}

LossReport total_loss(const Matrix& student_raw, const Matrix& teacher_unit,
                      const Matrix& anchors_unit, const LossConfig& config) {
  require_same_shape(student_raw, teacher_unit, "total_loss");
  if (config.lambda_ism < 0.0) {
    throw Error(ErrorCode::InvalidConfig, "lambda_ism must be >= 0");
  }
  const Matrix q = l2_normalize(student_raw);

  LossReport report;
  Matrix grad_q = Matrix::Zero(q.rows(), q.cols());

  if (config.csm_enabled) {
    const auto q_dist = cross_modal_similarity_batch(q, anchors_unit, config.temperature);
    const Matrix targets = teacher_targets(teacher_unit, anchors_unit, config);
    Matrix grad_logits;
    if (config.variant == LossVariant::CeEntMin) {
      auto csm = csm_loss(q_dist, targets, config.reduction, config.ent_weight);
      report.csm_ce = csm.ce;
      report.ent_min = csm.ent_min;
      grad_logits = std::move(csm.grad);
    } else {
      auto kl = kl_matching_loss(q_dist, targets, config.reduction);
      report.csm_ce = kl.value;
      grad_logits = std::move(kl.grad);
    }
    // logits = q A^T / tau
    grad_q.noalias() += (grad_logits * anchors_unit) / config.temperature;
  }

  const auto ism = ism_loss(q, teacher_unit, config.reduction);
  report.ism = ism.value;
  grad_q += config.lambda_ism * ism.grad;

  report.total = report.csm_ce + config.ent_weight * report.ent_min + config.lambda_ism * report.ism;
  report.grad_q = normalize_backward(student_raw, grad_q);
  return report;
}

}  // namespace xmodal
