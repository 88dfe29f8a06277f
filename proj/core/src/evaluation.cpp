#include "xmodal/evaluation.hpp"

#include "xmodal/error.hpp"
#include "xmodal/losses.hpp"

#include "log.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

namespace xmodal {

namespace {

Matrix unit_rows(const Matrix& m, bool already_normalized) {
  return already_normalized ? m : l2_normalize(m);
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression objective over a flat parameter vector
// [W (classes x D, row-major), b (classes)].

class SoftmaxRegression {
 public:
  SoftmaxRegression(const Matrix& x, const std::vector<std::int32_t>& y, std::size_t classes, double c)
      : x_(x), y_(y), classes_(static_cast<Eigen::Index>(classes)), inv_c_(1.0 / c) {}

  Eigen::Index size() const { return classes_ * x_.cols() + classes_; }

  double evaluate(const Vector& theta, Vector& grad) const {
    const auto d = x_.cols();
    const Eigen::Map<const Matrix> w(theta.data(), classes_, d);
    const Eigen::Map<const Vector> b(theta.data() + classes_ * d, classes_);

    Matrix logits = x_ * w.transpose();
    logits.rowwise() += b.transpose();
    const Matrix log_p = log_softmax_rows(logits);

    std::vector<double> nll(static_cast<std::size_t>(x_.rows()));
    Matrix g = log_p.array().exp().matrix();
    for (Eigen::Index i = 0; i < x_.rows(); ++i) {
      const auto label = y_[static_cast<std::size_t>(i)];
      nll[static_cast<std::size_t>(i)] = -log_p(i, label);
      g(i, label) -= 1.0;
    }
    grad.resize(size());
    Eigen::Map<Matrix> gw(grad.data(), classes_, d);
    Eigen::Map<Vector> gb(grad.data() + classes_ * d, classes_);
    gw.noalias() = g.transpose() * x_;
    gw += inv_c_ * w;
    gb = g.colwise().sum().transpose();
    return pairwise_sum(nll) + 0.5 * inv_c_ * w.squaredNorm();
  }

 private:
  const Matrix& x_;
  const std::vector<std::int32_t>& y_;
  Eigen::Index classes_;
  double inv_c_;
};

struct LbfgsOutcome {
  Vector theta;
  double value = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

LbfgsOutcome minimize_lbfgs(const SoftmaxRegression& objective, Vector theta, const ProbeOptions& options) {
  constexpr double kArmijo = 1e-4;
  constexpr int kMaxBacktracks = 60;
  constexpr double kEps = std::numeric_limits<double>::epsilon();

  Vector grad;
  double value = objective.evaluate(theta, grad);
  std::deque<std::pair<Vector, Vector>> history;  // (s, y)
  LbfgsOutcome out;

  for (std::size_t iter = 0; iter < options.max_iterations; ++iter) {
    out.iterations = iter;
    if (grad.norm() < options.grad_tolerance) {
      out.converged = true;
      break;
    }
    // Two-loop recursion.
    Vector q = grad;
    std::vector<double> alphas(history.size());
    for (std::size_t k = history.size(); k-- > 0;) {
      const auto& [s, y] = history[k];
      alphas[k] = s.dot(q) / y.dot(s);
      q -= alphas[k] * y;
    }
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      q *= s.dot(y) / y.squaredNorm();
    } else {
      q /= std::max(1.0, grad.norm());
    }
    for (std::size_t k = 0; k < history.size(); ++k) {
      const auto& [s, y] = history[k];
      const double beta = y.dot(q) / y.dot(s);
      q += (alphas[k] - beta) * s;
    }
    Vector direction = -q;
    double slope = grad.dot(direction);
    if (!(slope < 0.0)) {
      history.clear();
      direction = -grad / std::max(1.0, grad.norm());
      slope = grad.dot(direction);
    }

    double step = 1.0;
    Vector next_grad;
    Vector next = theta + step * direction;
    double next_value = objective.evaluate(next, next_grad);
    int backtracks = 0;
    // A few ulps of slack keep the search from stalling on rounding noise
    // once the decrease drops below the objective's precision.
    while (!(next_value <= value + kArmijo * step * slope + 4.0 * kEps * std::abs(value)) &&
           backtracks < kMaxBacktracks) {
      step *= 0.5;
      next = theta + step * direction;
      next_value = objective.evaluate(next, next_grad);
      ++backtracks;
    }
    if (backtracks == kMaxBacktracks) break;

    Vector s = next - theta;
    Vector y = next_grad - grad;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      history.emplace_back(std::move(s), std::move(y));
      if (history.size() > options.lbfgs_memory) history.pop_front();
    }
    theta = std::move(next);
    grad = std::move(next_grad);
    value = next_value;
    out.iterations = iter + 1;
  }
  out.converged = out.converged || grad.norm() < options.grad_tolerance;
  out.theta = std::move(theta);
  out.value = value;
  out.grad_norm = grad.norm();
  return out;
}

std::vector<std::int32_t> predict(const Matrix& weights, const Vector& bias, const Matrix& x) {
  Matrix logits = x * weights.transpose();
  logits.rowwise() += bias.transpose();
  std::vector<std::int32_t> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(argmax(logits.row(i)));
  return out;
}

ProbeResult fit_probe(const Matrix& train, const std::vector<std::int32_t>& train_labels,
                      const Matrix& test, const std::vector<std::int32_t>& test_labels,
                      std::size_t classes, const ProbeOptions& options) {
  const SoftmaxRegression objective(train, train_labels, classes, options.c);
  Vector theta = Vector::Zero(objective.size());
  if (options.init_seed) {
    std::mt19937_64 rng(*options.init_seed);
    std::normal_distribution<double> dist(0.0, 0.1);
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = dist(rng);
  }
  auto fit = minimize_lbfgs(objective, std::move(theta), options);

  const auto d = train.cols();
  const auto k = static_cast<Eigen::Index>(classes);
  ProbeResult result;
  result.weights = Eigen::Map<const Matrix>(fit.theta.data(), k, d);
  result.bias = Eigen::Map<const Vector>(fit.theta.data() + k * d, k);
  result.converged = fit.converged;
  result.final_objective = fit.value;
  result.gradient_norm = fit.grad_norm;
  result.iterations = fit.iterations;
  result.c = options.c;
  result.top1_accuracy = test.rows() == 0 ? 0.0 : accuracy(predict(result.weights, result.bias, test), test_labels);
  if (!result.converged) {
    detail::log().warn("linear probe did not converge: |grad|={:.3g} after {} iterations (C={})",
                       result.gradient_norm, result.iterations, options.c);
  }
  return result;
}

void require_labels(const Matrix& x, const std::vector<std::int32_t>& labels, const char* what) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(labels.size()) +
                                              " labels for " + std::to_string(x.rows()) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw Error(ErrorCode::InvalidConfig, std::string(what) + ": negative label", i);
  }
}

}  // namespace

const std::optional<std::vector<std::int32_t>>& bundle_labels(const DatasetBundle& bundle) {
  return bundle.eval_labels ? bundle.eval_labels : bundle.teacher.labels;
}

double accuracy(const std::vector<std::int32_t>& predicted, const std::vector<std::int32_t>& truth) {
  if (predicted.size() != truth.size()) {
    throw Error(ErrorCode::ShapeMismatch, "prediction and label counts differ");
  }
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

ZeroShotResult zero_shot_classify(const Matrix& embeddings_unit, const AnchorSet& anchors,
                                  double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "temperature must be > 0");
  }
  const Matrix anchor_unit = unit_rows(anchors.data, anchors.normalized);
  if (embeddings_unit.cols() != anchor_unit.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "embedding and anchor dimensions differ");
  }
  const auto class_of = anchors.class_of_anchor();
  const Matrix sims = embeddings_unit * anchor_unit.transpose();
  ZeroShotResult out;
  out.predictions.reserve(static_cast<std::size_t>(sims.rows()));
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    out.predictions.push_back(static_cast<std::int32_t>(class_of[argmax(sims.row(i))]));
  }
  return out;
}

ZeroShotResult zero_shot_classify(const EmbeddingSet& embeddings, const AnchorSet& anchors,
                                  double temperature, bool require_accuracy) {
  if (require_accuracy && !embeddings.labels) {
    throw Error(ErrorCode::MissingLabels, "zero-shot accuracy requested but the embeddings carry no labels");
  }
  auto out = zero_shot_classify(unit_rows(embeddings.data, embeddings.normalized), anchors, temperature);
  if (embeddings.labels) out.accuracy = accuracy(out.predictions, *embeddings.labels);
  return out;
}

ProbeResult linear_probe(const Matrix& train, const std::vector<std::int32_t>& train_labels,
                         const Matrix& test, const std::vector<std::int32_t>& test_labels,
                         const ProbeOptions& options) {
  require_labels(train, train_labels, "train");
  require_labels(test, test_labels, "test");
  if (train.cols() != test.cols() && test.rows() > 0) {
    throw Error(ErrorCode::DimensionMismatch, "train and test embeddings differ in width");
  }
  if (!(options.c > 0.0)) throw Error(ErrorCode::InvalidConfig, "probe C must be > 0");
  const std::set<std::int32_t> distinct(train_labels.begin(), train_labels.end());
  if (distinct.size() < 2) {
    throw Error(ErrorCode::SingleClass, "linear probe needs at least two classes in the training labels");
  }
  std::int32_t top = *distinct.rbegin();
  for (auto l : test_labels) top = std::max(top, l);
  const auto classes = static_cast<std::size_t>(top) + 1;

  ProbeOptions final_options = options;
  if (options.c_search) {
    const auto [fit_rows, val_rows] = holdout_split(train_labels.size(), 0.2, 0);
    Matrix fit_x(static_cast<Eigen::Index>(fit_rows.size()), train.cols());
    Matrix val_x(static_cast<Eigen::Index>(val_rows.size()), train.cols());
    std::vector<std::int32_t> fit_y, val_y;
    for (std::size_t i = 0; i < fit_rows.size(); ++i) {
      fit_x.row(static_cast<Eigen::Index>(i)) = train.row(static_cast<Eigen::Index>(fit_rows[i]));
      fit_y.push_back(train_labels[fit_rows[i]]);
    }
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
      val_x.row(static_cast<Eigen::Index>(i)) = train.row(static_cast<Eigen::Index>(val_rows[i]));
      val_y.push_back(train_labels[val_rows[i]]);
    }
    double best_acc = -1.0;
    for (double c : options.c_grid) {
      ProbeOptions trial = options;
      trial.c = c;
      const auto r = fit_probe(fit_x, fit_y, val_x, val_y, classes, trial);
      detail::log().info("probe C={} validation top-1={:.4f}", c, r.top1_accuracy);
      if (r.top1_accuracy > best_acc) {
        best_acc = r.top1_accuracy;
        final_options.c = c;
      }
    }
  }
  return fit_probe(train, train_labels, test, test_labels, classes, final_options);
}

RetrievalResult retrieve_topk(const Eigen::Ref<const RowVector>& query, const EmbeddingSet& gallery,
                              std::size_t k) {
  if (k > gallery.size()) {
    throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " exceeds gallery size " +
                                          std::to_string(gallery.size()));
  }
  if (static_cast<std::size_t>(query.size()) != gallery.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query and gallery dimensions differ");
  }
  const double query_norm = query.norm();
  if (!(query_norm > kZeroNormThreshold)) throw Error(ErrorCode::ZeroVector, "query has zero norm");
  const Vector unit_query = query.transpose() / query_norm;
  const Vector scores = gallery.normalized ? Vector(gallery.data * unit_query)
                                           : Vector(l2_normalize(gallery.data) * unit_query);

  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    const double sa = scores(static_cast<Eigen::Index>(a));
    const double sb = scores(static_cast<Eigen::Index>(b));
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  RetrievalResult out;
  for (std::size_t r = 0; r < k; ++r) {
    out.rows.push_back(order[r]);
    out.ids.push_back(gallery.ids.at(order[r]));
    out.scores.push_back(scores(static_cast<Eigen::Index>(order[r])));
  }
  return out;
}

void write_retrieval_jsonl(const std::vector<std::string>& queries,
                           const std::vector<RetrievalResult>& results, const std::filesystem::path& path) {
  if (queries.size() != results.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one retrieval result per query expected");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  for (std::size_t q = 0; q < queries.size(); ++q) {
    nlohmann::json line = {
        {"query", queries[q]}, {"ranked_ids", results[q].ids}, {"scores", results[q].scores}};
    out << line.dump() << '\n';
  }
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << "experiment,subset_size,seed,metric,value\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.experiment << ',' << r.subset_size << ',' << r.seed << ',' << r.metric << ',' << buf << '\n';
  }
}

std::vector<ResultRow> prompt_sweep(const DatasetBundle& bundle, const TrainConfig& config,
                                    const std::vector<AnchorSet>& prompt_subsets, const SweepOptions& options) {
  const DatasetBundle& eval = options.eval_bundle ? *options.eval_bundle : bundle;
  if (!bundle_labels(eval)) {
    throw Error(ErrorCode::MissingLabels, "prompt sweep needs labelled evaluation rows");
  }
  std::vector<ResultRow> rows;
  for (const auto& subset : prompt_subsets) {
    subset.validate();
    for (auto seed : options.seeds) {
      TrainConfig cfg = config;
      cfg.seed = seed;
      TransferOptions transfer;
      transfer.train_anchors = subset;
      transfer.eval_bundle = &eval;
      const auto result = run_transfer(bundle, cfg, transfer);
      const auto acc = zero_shot_accuracy(result.shadow.shadow, eval);
      rows.push_back({options.experiment, subset.size(), seed, "zeroshot_acc", acc.value_or(0.0)});
      detail::log().info("sweep subset={} seed={} zero-shot={:.4f}", subset.size(), seed, acc.value_or(0.0));
    }
  }
  return rows;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n,
                                                                            double test_fraction,
                                                                            std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "test fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto test_count = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

}  // namespace xmodal
