#include "xmodal/trainer.hpp"

#include "xmodal/error.hpp"
#include "xmodal/evaluation.hpp"

#include "log.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace xmodal {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidConfig, key + ": expected a number, got '" + value + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc{} || ptr != end) {
    throw Error(ErrorCode::InvalidConfig, key + ": expected a non-negative integer, got '" + value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw Error(ErrorCode::InvalidConfig, key + ": expected true/false, got '" + value + "'");
}

const char* bool_name(bool v) { return v ? "true" : "false"; }

// Per-field metadata so set() and to_key_values() cannot drift apart.
struct Field {
  const char* key;
  void (*set)(TrainConfig&, const std::string&, const std::string&);
  std::string (*get)(const TrainConfig&);
};

#define XMODAL_DOUBLE_FIELD(name)                                                                  \
  Field {                                                                                          \
    #name, [](TrainConfig& c, const std::string& k, const std::string& v) { c.name = parse_double(k, v); }, \
        [](const TrainConfig& c) { return format_double(c.name); }                                 \
  }
#define XMODAL_SIZE_FIELD(name)                                                                    \
  Field {                                                                                          \
    #name,                                                                                         \
        [](TrainConfig& c, const std::string& k, const std::string& v) {                           \
          c.name = static_cast<decltype(c.name)>(parse_uint(k, v));                                \
        },                                                                                         \
        [](const TrainConfig& c) { return std::to_string(c.name); }                                \
  }
#define XMODAL_BOOL_FIELD(name)                                                                    \
  Field {                                                                                          \
    #name, [](TrainConfig& c, const std::string& k, const std::string& v) { c.name = parse_bool(k, v); }, \
        [](const TrainConfig& c) { return std::string(bool_name(c.name)); }                        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      XMODAL_DOUBLE_FIELD(temperature),
      XMODAL_DOUBLE_FIELD(lambda_ism),
      XMODAL_BOOL_FIELD(csm_enabled),
      Field{"loss_variant",
            [](TrainConfig& c, const std::string& k, const std::string& v) {
              if (v == "ce_entmin") c.loss_variant = LossVariant::CeEntMin;
              else if (v == "kl") c.loss_variant = LossVariant::Kl;
              else throw Error(ErrorCode::InvalidConfig, k + ": expected ce_entmin or kl, got '" + v + "'");
            },
            [](const TrainConfig& c) {
              return std::string(c.loss_variant == LossVariant::Kl ? "kl" : "ce_entmin");
            }},
      XMODAL_BOOL_FIELD(smoothing_enabled),
      XMODAL_DOUBLE_FIELD(smoothing_alpha),
      XMODAL_DOUBLE_FIELD(smoothing_mix),
      XMODAL_DOUBLE_FIELD(ent_weight),
      Field{"reduction",
            [](TrainConfig& c, const std::string& k, const std::string& v) {
              if (v == "mean") c.reduction = Reduction::Mean;
              else if (v == "sum") c.reduction = Reduction::Sum;
              else throw Error(ErrorCode::InvalidConfig, k + ": expected mean or sum, got '" + v + "'");
            },
            [](const TrainConfig& c) { return std::string(c.reduction == Reduction::Sum ? "sum" : "mean"); }},
      XMODAL_DOUBLE_FIELD(lr0),
      XMODAL_DOUBLE_FIELD(lr_min),
      XMODAL_DOUBLE_FIELD(weight_decay),
      XMODAL_DOUBLE_FIELD(sgd_momentum),
      XMODAL_DOUBLE_FIELD(ema_momentum),
      XMODAL_SIZE_FIELD(batch_size),
      XMODAL_SIZE_FIELD(epochs),
      XMODAL_DOUBLE_FIELD(restart_period),
      XMODAL_DOUBLE_FIELD(restart_mult),
      XMODAL_SIZE_FIELD(seed),
      XMODAL_BOOL_FIELD(shadow_in_loss),
      Field{"architecture",
            [](TrainConfig& c, const std::string& k, const std::string& v) {
              if (v == "linear") c.architecture = Architecture::Linear;
              else if (v == "mlp") c.architecture = Architecture::Mlp;
              else throw Error(ErrorCode::InvalidConfig, k + ": expected linear or mlp, got '" + v + "'");
            },
            [](const TrainConfig& c) {
              return std::string(c.architecture == Architecture::Mlp ? "mlp" : "linear");
            }},
      XMODAL_SIZE_FIELD(hidden_dim),
      XMODAL_SIZE_FIELD(pretrain_epochs),
      XMODAL_DOUBLE_FIELD(nce_temperature),
      XMODAL_SIZE_FIELD(proj_dim),
      XMODAL_DOUBLE_FIELD(view_noise),
      XMODAL_DOUBLE_FIELD(view_dropout),
      XMODAL_DOUBLE_FIELD(pretrain_lr),
      XMODAL_DOUBLE_FIELD(probe_c),
      XMODAL_BOOL_FIELD(probe_c_search),
  };
  return table;
}

#undef XMODAL_DOUBLE_FIELD
#undef XMODAL_SIZE_FIELD
#undef XMODAL_BOOL_FIELD

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const auto stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

Matrix gather(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

void sgd_update(Parameters& params, Parameters grads, double lr, const TrainConfig& config,
                Parameters& velocity) {
  if (config.weight_decay != 0.0) axpy(grads, config.weight_decay, params);
  if (config.sgd_momentum > 0.0) {
    if (velocity.empty()) velocity = zeros_like(params);
    for (std::size_t l = 0; l < velocity.size(); ++l) {
      velocity[l].weight = config.sgd_momentum * velocity[l].weight + grads[l].weight;
      velocity[l].bias = config.sgd_momentum * velocity[l].bias + grads[l].bias;
    }
    axpy(params, -lr, velocity);
  } else {
    axpy(params, -lr, grads);
  }
}

// Seed streams for the independent random consumers of one run.
constexpr std::uint64_t kShuffleStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kHeadStream = 0xbf58476d1ce4e5b9ULL;
constexpr std::uint64_t kViewStream = 0x94d049bb133111ebULL;

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw Error(ErrorCode::InvalidConfig, key + ": " + why);
  };
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "temperature must be > 0");
  }
  if (!(lambda_ism >= 0.0)) fail("lambda_ism", "must be >= 0");
  if (!(smoothing_alpha >= 0.0 && smoothing_alpha < 1.0)) fail("smoothing_alpha", "must lie in [0, 1)");
  if (!(smoothing_mix >= 0.0 && smoothing_mix <= 1.0)) fail("smoothing_mix", "must lie in [0, 1]");
  if (!(ent_weight >= 0.0)) fail("ent_weight", "must be >= 0");
  if (!(lr0 > 0.0)) fail("lr0", "must be > 0");
  if (!(lr_min >= 0.0 && lr_min <= lr0)) fail("lr_min", "must lie in [0, lr0]");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) fail("sgd_momentum", "must lie in [0, 1)");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) fail("ema_momentum", "must lie in [0, 1]");
  if (batch_size == 0) fail("batch_size", "must be > 0");
  if (!(restart_period >= 0.0)) fail("restart_period", "must be >= 0");
  if (!(restart_mult >= 1.0)) fail("restart_mult", "must be >= 1");
  if (architecture == Architecture::Mlp && hidden_dim == 0) fail("hidden_dim", "must be > 0");
  if (!(nce_temperature > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "nce_temperature must be > 0");
  }
  if (proj_dim < 2) fail("proj_dim", "must be >= 2");
  if (!(view_noise >= 0.0)) fail("view_noise", "must be >= 0");
  if (!(view_dropout >= 0.0 && view_dropout < 1.0)) fail("view_dropout", "must lie in [0, 1)");
  if (!(pretrain_lr > 0.0)) fail("pretrain_lr", "must be > 0");
  if (!(probe_c > 0.0)) fail("probe_c", "must be > 0");
}

LossConfig TrainConfig::loss_config() const {
  LossConfig lc;
  lc.temperature = temperature;
  lc.lambda_ism = lambda_ism;
  lc.csm_enabled = csm_enabled;
  lc.variant = loss_variant;
  lc.smoothing_enabled = smoothing_enabled;
  lc.smoothing_alpha = smoothing_alpha;
  lc.smoothing_mix = smoothing_mix;
  lc.ent_weight = ent_weight;
  lc.reduction = reduction;
  return lc;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  const auto& table = fields();
  const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
  if (it == table.end()) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  it->set(*this, key, trim(value));
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_key_values() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

std::vector<std::pair<std::string, std::string>> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config file '" + path.string() + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, path.string() + ":" + std::to_string(line_no) +
                                                ": expected key=value");
    }
    // Accept the CLI spelling (dashes) as well as underscores.
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base) {
  for (const auto& [key, value] : read_key_value_file(path)) base.set(key, value);
  return base;
}

// ---------------------------------------------------------------------------
// Schedule

double sgdr_lr(double epoch, const TrainConfig& config) {
  const double period0 = config.restart_period > 0.0 ? config.restart_period
                                                      : static_cast<double>(config.epochs);
  if (!(period0 > 0.0) || epoch <= 0.0) return config.lr0;
  double t_cur = epoch;
  double period = period0;
  if (config.restart_mult == 1.0) {
    t_cur = std::fmod(epoch, period0);
  } else {
    while (t_cur >= period) {
      t_cur -= period;
      period *= config.restart_mult;
    }
  }
  if (t_cur == 0.0) return config.lr0;
  return config.lr_min +
         0.5 * (config.lr0 - config.lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / period));
}

// ---------------------------------------------------------------------------
// Training

LossReport train_step(StudentModel& model, MomentumStudent& shadow, const Matrix& batch_inputs,
                      const Matrix& batch_teacher_unit, const Matrix& anchors_unit,
                      const TrainConfig& config, TrainState& state) {
  const StudentModel& in_loss = config.shadow_in_loss ? shadow.shadow : model;
  ForwardCache cache;
  const Matrix raw = forward(in_loss, batch_inputs, cache);
  LossReport report;
  try {
    report = total_loss(raw, batch_teacher_unit, anchors_unit, config.loss_config());
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ZeroVector) throw;
    throw Error(ErrorCode::NonFiniteLoss, std::string("degenerate student output: ") + e.what(),
                static_cast<std::size_t>(state.step));
  }
  if (!std::isfinite(report.total) || !report.grad_q.allFinite()) {
    throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at step " + std::to_string(state.step),
                static_cast<std::size_t>(state.step));
  }
  auto grads = backward(in_loss, cache, report.grad_q, Reduction::Sum);
  sgd_update(model.layers, std::move(grads), state.lr, config, state.velocity);
  if (!all_finite(model.layers)) {
    throw Error(ErrorCode::NonFiniteLoss, "parameters became non-finite at step " + std::to_string(state.step),
                static_cast<std::size_t>(state.step));
  }
  ema_update(shadow, model, config.ema_momentum);
  ++state.step;
  return report;
}

Checkpoint TransferResult::checkpoint() const {
  return {model, shadow, state.step, std::nullopt};
}

std::optional<double> zero_shot_accuracy(const StudentModel& model, const DatasetBundle& bundle) {
  const auto& labels = bundle_labels(bundle);
  if (!labels) return std::nullopt;
  const Matrix unit = l2_normalize(forward(model, bundle.inputs));
  const auto result = zero_shot_classify(unit, l2_normalize(bundle.anchors));
  return accuracy(result.predictions, *labels);
}

TransferResult run_transfer(const DatasetBundle& bundle, const TrainConfig& config,
                            const TransferOptions& options) {
  config.validate();
  bundle.validate();
  const auto n = bundle.size();
  const auto embed_dim = bundle.teacher.dim();

  StudentModel model;
  if (options.init) {
    model = *options.init;
    model.validate();
    if (model.input_dim() != bundle.input_dim() || model.embed_dim() != embed_dim) {
      throw Error(ErrorCode::ShapeMismatch, "initial student does not fit the bundle dimensions");
    }
  } else if (config.pretrain_epochs > 0) {
    model = run_pretrain(bundle, config).model;
  } else {
    model = StudentModel::create(config.architecture, bundle.input_dim(), embed_dim, config.hidden_dim,
                                 config.seed);
  }

  TransferResult result{model, MomentumStudent::track(model, config.ema_momentum), {}, {}};
  if (config.epochs == 0 || n == 0) {
    result.state.lr = config.lr0;
    return result;
  }

  const Matrix teacher_unit = l2_normalize(bundle.teacher.data);
  const AnchorSet& train_anchors = options.train_anchors ? *options.train_anchors : bundle.anchors;
  if (train_anchors.dim() != embed_dim) {
    throw Error(ErrorCode::DimensionMismatch, "training anchors do not match the teacher dimension");
  }
  const Matrix anchors_unit = l2_normalize(train_anchors.data);
  const DatasetBundle& eval = options.eval_bundle ? *options.eval_bundle : bundle;

  std::mt19937_64 shuffle_rng(config.seed ^ kShuffleStream);
  auto& state = result.state;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto batches = epoch_batches(n, config.batch_size, shuffle_rng);
    std::vector<double> ce, ent, ism, total;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      state.epoch = epoch;
      state.lr = sgdr_lr(static_cast<double>(epoch) +
                             static_cast<double>(b) / static_cast<double>(batches.size()),
                         config);
      const auto report = train_step(result.model, result.shadow, gather(bundle.inputs, batches[b]),
                                     gather(teacher_unit, batches[b]), anchors_unit, config, state);
      ce.push_back(report.csm_ce);
      ent.push_back(report.ent_min);
      ism.push_back(report.ism);
      total.push_back(report.total);
    }
    const auto count = static_cast<double>(batches.size());
    CurveRow row;
    row.epoch = epoch + 1;
    row.step = state.step;
    row.lr = state.lr;
    row.csm_ce = pairwise_sum(ce) / count;
    row.ent_min = pairwise_sum(ent) / count;
    row.ism = pairwise_sum(ism) / count;
    row.total = pairwise_sum(total) / count;
    row.zeroshot_acc = zero_shot_accuracy(result.shadow.shadow, eval);
    state.history.push_back(row);
    result.curve.push_back(row);

    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - started;
    detail::log().info("epoch {}/{} lr={:.4g} total={:.6g} ism={:.6g} zeroshot={} ({:.3f}s)", epoch + 1,
                       config.epochs, row.lr, row.total, row.ism,
                       row.zeroshot_acc ? format_double(*row.zeroshot_acc) : std::string("-"),
                       elapsed.count());
  }
  return result;
}

PretrainResult run_pretrain(const DatasetBundle& bundle, const TrainConfig& config) {
  config.validate();
  const auto n = bundle.size();
  if (n < 2) throw Error(ErrorCode::BatchTooSmall, "pretraining needs at least 2 samples");

  PretrainResult result{
      StudentModel::create(config.architecture, bundle.input_dim(), bundle.teacher.dim(), config.hidden_dim,
                           config.seed),
      ProjectionHead::create(bundle.teacher.dim(), config.proj_dim, config.seed ^ kHeadStream),
      {}};
  const ViewAugmenter augmenter{config.view_noise, config.view_dropout, config.seed ^ kViewStream};

  TrainConfig schedule = config;
  schedule.lr0 = config.pretrain_lr;
  schedule.lr_min = std::min(config.lr_min, config.pretrain_lr);
  schedule.epochs = config.pretrain_epochs;

  std::mt19937_64 shuffle_rng(config.seed ^ kShuffleStream ^ kViewStream);
  Parameters velocity;
  Parameters head_velocity;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    const auto batches = epoch_batches(n, config.batch_size, shuffle_rng);
    std::vector<double> losses;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (batches[b].size() < 2) continue;
      const double lr = sgdr_lr(static_cast<double>(epoch) +
                                    static_cast<double>(b) / static_cast<double>(batches.size()),
                                schedule);
      auto grads = infonce_pretrain_step(result.model, result.head, gather(bundle.inputs, batches[b]),
                                         augmenter, config.nce_temperature, step++);
      if (!std::isfinite(grads.loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "InfoNCE loss is not finite", static_cast<std::size_t>(step));
      }
      losses.push_back(grads.loss);
      sgd_update(result.model.layers, std::move(grads.model_grad), lr, config, velocity);
      Parameters head_params{result.head.layer};
      sgd_update(head_params, Parameters{std::move(grads.head_grad)}, lr, config, head_velocity);
      result.head.layer = std::move(head_params.front());
    }
    const double mean = losses.empty() ? 0.0 : pairwise_sum(losses) / static_cast<double>(losses.size());
    result.epoch_loss.push_back(mean);
    detail::log().info("pretrain epoch {}/{} infonce={:.6g}", epoch + 1, config.pretrain_epochs, mean);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Curve CSV

void write_curve_csv(const std::vector<CurveRow>& rows, const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::string>>& echo) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  for (const auto& [key, value] : echo) out << "# " << key << '=' << value << '\n';
  out << kCurveHeader << '\n';
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.step << ',' << format_double(r.lr) << ',' << format_double(r.csm_ce) << ','
        << format_double(r.ent_min) << ',' << format_double(r.ism) << ',' << format_double(r.total) << ','
        << (r.zeroshot_acc ? format_double(*r.zeroshot_acc) : std::string()) << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "short write to '" + path.string() + "'");
}

std::vector<CurveRow> read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open curve CSV '" + path.string() + "'");
  std::vector<CurveRow> rows;
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (trim(line) != kCurveHeader) {
        throw Error(ErrorCode::MalformedHeader, "curve CSV header mismatch in '" + path.string() + "'");
      }
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 8) {
      throw Error(ErrorCode::MalformedHeader, "curve CSV row has " + std::to_string(cells.size()) + " cells",
                  line_no);
    }
    CurveRow r;
    r.epoch = static_cast<std::size_t>(parse_uint("epoch", cells[0]));
    r.step = parse_uint("step", cells[1]);
    r.lr = parse_double("lr", cells[2]);
    r.csm_ce = parse_double("csm_ce", cells[3]);
    r.ent_min = parse_double("ent_min", cells[4]);
    r.ism = parse_double("ism", cells[5]);
    r.total = parse_double("total", cells[6]);
    if (!trim(cells[7]).empty()) r.zeroshot_acc = parse_double("zeroshot_acc", trim(cells[7]));
    rows.push_back(r);
  }
  if (!header_seen) throw Error(ErrorCode::MalformedHeader, "curve CSV has no header");
  return rows;
}

}  // namespace xmodal
