#pragma once

#include "xmodal/embedding_store.hpp"
#include "xmodal/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace xmodal {

struct ZeroShotResult {
  /// Predicted class index (position in anchors.classes()) per row.
  std::vector<std::int32_t> predictions;
  std::optional<double> accuracy;
};

/// Predicts the class of the most similar anchor. Temperature only has to be
/// positive: softmax is monotone, so it never changes the argmax.
ZeroShotResult zero_shot_classify(const Matrix& embeddings_unit, const AnchorSet& anchors,
                                  double temperature = 0.01);

/// Same, and scores against labels. Throws MissingLabels if they are absent.
ZeroShotResult zero_shot_classify(const EmbeddingSet& embeddings, const AnchorSet& anchors,
                                  double temperature, bool require_accuracy);

double accuracy(const std::vector<std::int32_t>& predicted, const std::vector<std::int32_t>& truth);

struct ProbeOptions {
  double c = 30.0;
  double grad_tolerance = 1e-6;
  std::size_t max_iterations = 5000;
  std::size_t lbfgs_memory = 10;
  /// Random (seeded) starting weights instead of zeros.
  std::optional<std::uint64_t> init_seed;
  /// Choose C on a held-out fifth of the training rows before the final fit.
  bool c_search = false;
  std::vector<double> c_grid = {0.1, 1.0, 10.0, 30.0, 100.0};
};

struct ProbeResult {
  double top1_accuracy = 0.0;
  Matrix weights;  // classes x D
  Vector bias;
  bool converged = false;
  double final_objective = 0.0;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
  double c = 0.0;
};

/// Multinomial logistic regression minimising
///   (1 / (2C)) |W|_F^2 + sum_i CE(softmax(W e_i + b), y_i)
/// with L-BFGS and a backtracking line search; the bias is unregularized.
/// Throws SingleClass if fewer than two classes appear in train_labels.
ProbeResult linear_probe(const Matrix& train, const std::vector<std::int32_t>& train_labels,
                         const Matrix& test, const std::vector<std::int32_t>& test_labels,
                         const ProbeOptions& options = {});

struct RetrievalResult {
  std::vector<std::string> ids;
  std::vector<std::size_t> rows;
  std::vector<double> scores;
};

/// The k gallery rows with the highest cosine to `query`, ties by row order.
/// Throws KTooLarge when k exceeds the gallery size.
RetrievalResult retrieve_topk(const Eigen::Ref<const RowVector>& query,
                              const EmbeddingSet& gallery, std::size_t k);

void write_retrieval_jsonl(const std::vector<std::string>& queries,
                           const std::vector<RetrievalResult>& results,
                           const std::filesystem::path& path);

/// One `experiment,subset_size,seed,metric,value` row.
struct ResultRow {
  std::string experiment;
  std::size_t subset_size = 0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path);

struct SweepOptions {
  /// Held-out rows to score; the training bundle itself when null.
  const DatasetBundle* eval_bundle = nullptr;
  std::vector<std::uint64_t> seeds = {0};
  std::string experiment = "prompt_sweep";
};

/// Trains once per (anchor subset, seed) and scores zero-shot accuracy
/// against the *full* anchor set of the evaluation bundle.
std::vector<ResultRow> prompt_sweep(const DatasetBundle& bundle, const TrainConfig& config,
                                    const std::vector<AnchorSet>& prompt_subsets,
                                    const SweepOptions& options = {});

/// Deterministic shuffle split into (train, test) row indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(
    std::size_t n, double test_fraction, std::uint64_t seed);

/// Ground-truth labels of a bundle: eval_labels, else teacher labels.
const std::optional<std::vector<std::int32_t>>& bundle_labels(const DatasetBundle& bundle);

}  // namespace xmodal
