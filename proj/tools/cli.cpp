#include "cli.hpp"

#include "CLI11.hpp"

#include <xmodal/error.hpp>
#include <xmodal/evaluation.hpp>
#include <xmodal/log.hpp>
#include <xmodal/prompt_augmentation.hpp>
#include <xmodal/synthetic_teacher.hpp>
#include <xmodal/trainer.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace xmodal::cli {
namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used);
    if (used == text.size() && text.find('-') == std::string::npos) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::InvalidConfig, "'" + key + "' expects a non-negative integer, got '" + text + "'");
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::InvalidConfig, "'" + key + "' expects a number, got '" + text + "'");
}

struct Flag {
  Flag() = default;
  Flag(std::string h, bool req = false, bool sw = false, std::optional<std::string> fb = std::nullopt)
      : help(std::move(h)), required(req), is_switch(sw), fallback(std::move(fb)) {}

  std::string help;
  bool required = false;
  bool is_switch = false;
  std::optional<std::string> fallback;
};

class Context;
using Handler = std::function<void(Context&)>;

struct Command {
  CLI::App* app = nullptr;
  Handler run;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::map<std::string, Flag> flags;
  std::map<std::string, std::string> config_values;
  std::map<std::string, CLI::Option*> config_options;
  std::string config_path;
  std::string out_dir = ".";
};

class Context {
 public:
  Context(Command& cmd, TrainConfig config) : cmd_(cmd), config_(std::move(config)) {}

  const TrainConfig& config() const { return config_; }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = cmd_.values.find(key);
    if (it == cmd_.values.end() || it->second.empty()) return std::nullopt;
    return it->second;
  }
  std::string require(const std::string& key) const {
    if (auto v = get(key)) return *v;
    throw UsageError("--" + dashed(key) + " is required");
  }
  bool on(const std::string& key) const {
    const auto v = get(key);
    return v && (*v == "true" || *v == "1" || *v == "yes" || *v == "on");
  }
  std::size_t size(const std::string& key) const { return parse_size(key, require(key)); }
  double number(const std::string& key) const { return parse_double(key, require(key)); }

  /// Explicit path if given, otherwise <out-dir>/<default_name>.
  fs::path output(const std::string& key, const std::string& default_name) const {
    fs::path p = get(key) ? fs::path(*get(key)) : fs::path(cmd_.out_dir) / default_name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
  }

 private:
  Command& cmd_;
  TrainConfig config_;
};

// ---------------------------------------------------------------------------
// shared helpers

DatasetBundle open_bundle(const Context& ctx, const std::string& key = "bundle") {
  const auto path = ctx.require(key);
  if (key == "bundle") {
    if (auto sidecar = ctx.get("prompts")) return load_bundle(path, *sidecar);
  }
  return load_bundle(path);
}

/// Unit-norm embeddings of every bundle row: the student's when a checkpoint
/// is given (EMA shadow unless --live), else the teacher's.
Matrix embed(const Context& ctx, const DatasetBundle& bundle) {
  const auto ckpt_path = ctx.get("checkpoint");
  if (!ckpt_path) return l2_normalize(bundle.teacher.data);
  const Checkpoint ckpt = load_checkpoint(*ckpt_path);
  const StudentModel& model = ctx.on("live") ? ckpt.model : ckpt.shadow.shadow;
  if (model.input_dim() != bundle.input_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "checkpoint expects " + std::to_string(model.input_dim()) +
                                                  " input features, bundle has " +
                                                  std::to_string(bundle.input_dim()));
  }
  return l2_normalize(forward(model, bundle.inputs));
}

const std::vector<std::int32_t>& labels_of(const DatasetBundle& bundle) {
  const auto& labels = bundle_labels(bundle);
  if (!labels) throw Error(ErrorCode::MissingLabels, "bundle carries no labels");
  return *labels;
}

std::vector<std::int32_t> pick(const std::vector<std::int32_t>& v, const std::vector<std::size_t>& rows) {
  std::vector<std::int32_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

Matrix pick(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// Splits by id so all views of one image land on the same side.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_id(const std::vector<std::string>& ids,
                                                                          double test_fraction, std::uint64_t seed) {
  std::vector<std::string> unique;
  std::map<std::string, std::size_t> group;
  for (const auto& id : ids) {
    if (group.emplace(id, unique.size()).second) unique.push_back(id);
  }
  const auto [train_groups, test_groups] = holdout_split(unique.size(), test_fraction, seed);
  std::vector<bool> is_test(unique.size(), false);
  for (auto g : test_groups) is_test[g] = true;
  std::vector<std::size_t> train, test;
  for (std::size_t r = 0; r < ids.size(); ++r) (is_test[group[ids[r]]] ? test : train).push_back(r);
  return {train, test};
}

// ---------------------------------------------------------------------------
// subcommands

void run_synth(Context& ctx) {
  SynthSpec spec;
  spec.num_classes = ctx.size("classes");
  spec.embed_dim = ctx.size("dim");
  spec.input_dim = ctx.size("input_dim");
  spec.samples_per_class = ctx.size("per_class");
  spec.noise_sigma = ctx.number("sigma");
  spec.input_noise = ctx.number("input_noise");
  spec.seed = ctx.config().seed;

  std::optional<std::vector<LabelRecord>> records;
  if (auto csv = ctx.get("label_csv")) {
    records = read_label_csv(*csv);
    if (records->size() != spec.num_classes) {
      throw Error(ErrorCode::DimensionMismatch, "label CSV has " + std::to_string(records->size()) +
                                                    " rows but --classes is " + std::to_string(spec.num_classes));
    }
  }
  auto out = generate(spec);

  if (records) {
    const auto kind = ctx.require("template");
    PromptTemplate tmpl = kind == "basic"          ? PromptTemplate::basic()
                          : kind == "wiki"         ? PromptTemplate::wiki_context()
                          : kind == "hierarchical" ? PromptTemplate::hierarchical()
                                                   : throw Error(ErrorCode::InvalidConfig,
                                                                 "unknown template '" + kind +
                                                                     "' (basic|wiki|hierarchical)");
    tmpl.retain_braces = !ctx.on("plain_prompts");
    auto& anchors = out.bundle.anchors;
    for (std::size_t c = 0; c < records->size(); ++c) {
      anchors.prompts[c] = render_prompt(tmpl, (*records)[c]);
      anchors.class_names[c] = (*records)[c].fine_label;
    }
    anchors.validate();
  }

  const auto path = ctx.output("out", "bundle.xmb");
  save_bundle(out.bundle, path);
  if (ctx.get("truth")) write_truth_csv(out.bundle, out.truth, ctx.output("truth", "truth.csv"));
  if (ctx.get("prompts_out")) write_prompt_list(out.bundle.anchors.prompts, ctx.output("prompts_out", "prompts.txt"));
  std::cerr << "wrote " << path.string() << " (N=" << out.bundle.size() << ", M=" << out.bundle.anchors.size()
            << ")\n";
}

void run_pretrain_cmd(Context& ctx) {
  const auto& cfg = ctx.config();
  if (cfg.pretrain_epochs == 0) {
    throw Error(ErrorCode::InvalidConfig, "pretrain needs --pretrain-epochs > 0");
  }
  const auto bundle = open_bundle(ctx);
  auto result = run_pretrain(bundle, cfg);
  Checkpoint ckpt;
  ckpt.model = result.model;
  ckpt.shadow = MomentumStudent::track(result.model, cfg.ema_momentum);
  ckpt.head = result.head;
  const auto path = ctx.output("out", "pretrain.xms");
  save_checkpoint(ckpt, path);
  std::cerr << "wrote " << path.string() << " (final InfoNCE "
            << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << ")\n";
}

void run_transfer_cmd(Context& ctx) {
  const auto& cfg = ctx.config();
  const auto bundle = open_bundle(ctx);
  std::optional<DatasetBundle> eval;
  if (ctx.get("eval_bundle")) eval = open_bundle(ctx, "eval_bundle");

  TransferOptions options;
  if (auto init = ctx.get("init")) {
    options.init = load_checkpoint(*init).model;
  } else if (cfg.pretrain_epochs > 0) {
    options.init = run_pretrain(bundle, cfg).model;
  }
  if (eval) options.eval_bundle = &*eval;

  const auto result = run_transfer(bundle, cfg, options);

  const auto ckpt_path = ctx.output("out", "student.xms");
  save_checkpoint(result.checkpoint(), ckpt_path);

  auto echo = cfg.to_key_values();
  echo.emplace_back("anchors", std::to_string(bundle.anchors.size()));
  for (const char* key : {"bundle", "prompts", "eval_bundle", "init"}) {
    if (auto v = ctx.get(key)) echo.emplace_back(key, *v);
  }
  const auto curve_path = ctx.output("curve", "curve.csv");
  write_curve_csv(result.curve, curve_path, echo);
  std::cerr << "wrote " << ckpt_path.string() << " and " << curve_path.string() << "\n";
}

void run_zeroshot(Context& ctx) {
  const auto& cfg = ctx.config();
  const auto bundle = open_bundle(ctx);
  const Matrix emb = embed(ctx, bundle);
  const auto result = zero_shot_classify(emb, bundle.anchors, cfg.temperature);

  if (ctx.get("predictions")) {
    std::ofstream out(ctx.output("predictions", "predictions.csv"));
    const auto classes = bundle.anchors.classes();
    out << "id,predicted\n";
    for (std::size_t i = 0; i < result.predictions.size(); ++i) {
      out << bundle.teacher.ids[i] << ',' << classes[static_cast<std::size_t>(result.predictions[i])] << '\n';
    }
    if (!out) throw Error(ErrorCode::Io, "failed writing predictions");
  }
  if (!bundle_labels(bundle)) {
    if (ctx.get("predictions")) return;
    labels_of(bundle);  // throws MissingLabels
  }
  const double acc = accuracy(result.predictions, labels_of(bundle));
  write_results_csv({{"zeroshot", bundle.anchors.size(), cfg.seed, "zeroshot_acc", acc}},
                    ctx.output("results", "zeroshot.csv"));
  std::cerr << "zero-shot accuracy " << acc << "\n";
}

void run_probe(Context& ctx) {
  const auto& cfg = ctx.config();
  const auto bundle = open_bundle(ctx);
  const Matrix emb = embed(ctx, bundle);
  const auto& labels = labels_of(bundle);

  Matrix train, test;
  std::vector<std::int32_t> train_y, test_y;
  if (ctx.get("test_bundle")) {
    const auto other = open_bundle(ctx, "test_bundle");
    train = emb;
    train_y = labels;
    test = embed(ctx, other);
    test_y = labels_of(other);
  } else {
    const auto [tr, te] = split_by_id(bundle.teacher.ids, ctx.number("test_fraction"), cfg.seed);
    train = pick(emb, tr);
    train_y = pick(labels, tr);
    test = pick(emb, te);
    test_y = pick(labels, te);
  }
  ProbeOptions options;
  options.c = cfg.probe_c;
  options.c_search = cfg.probe_c_search;
  const auto r = linear_probe(train, train_y, test, test_y, options);
  if (!r.converged) {
    std::cerr << "warning: probe stopped after " << r.iterations << " iterations (|grad|=" << r.gradient_norm
              << ")\n";
  }
  write_results_csv({{"probe", bundle.anchors.size(), cfg.seed, "probe_top1", r.top1_accuracy},
                     {"probe", bundle.anchors.size(), cfg.seed, "probe_c", r.c}},
                    ctx.output("results", "probe.csv"));
  std::cerr << "linear-probe top-1 " << r.top1_accuracy << " (C=" << r.c << ")\n";
}

void run_retrieve(Context& ctx) {
  const auto bundle = open_bundle(ctx);
  EmbeddingSet gallery;
  gallery.ids = bundle.teacher.ids;
  gallery.data = embed(ctx, bundle);
  gallery.normalized = true;
  const auto k = ctx.size("k");

  std::vector<std::string> names;
  Matrix queries;
  if (auto list = ctx.get("query_ids")) {
    names = split_list(*list);
    queries.resize(static_cast<Eigen::Index>(names.size()), gallery.data.cols());
    for (std::size_t q = 0; q < names.size(); ++q) {
      const auto it = std::find(gallery.ids.begin(), gallery.ids.end(), names[q]);
      if (it == gallery.ids.end()) throw Error(ErrorCode::InvalidConfig, "unknown query id '" + names[q] + "'");
      queries.row(static_cast<Eigen::Index>(q)) = gallery.data.row(it - gallery.ids.begin());
    }
  } else {
    names = bundle.anchors.prompts;
    queries = l2_normalize(bundle.anchors.data);
  }
  std::vector<RetrievalResult> results;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) results.push_back(retrieve_topk(queries.row(q), gallery, k));
  const auto path = ctx.output("out", "retrieval.jsonl");
  write_retrieval_jsonl(names, results, path);
  std::cerr << "wrote " << path.string() << "\n";
}

void run_sweep(Context& ctx) {
  const auto& cfg = ctx.config();
  const auto bundle = open_bundle(ctx);
  std::optional<DatasetBundle> eval;
  if (ctx.get("eval_bundle")) eval = open_bundle(ctx, "eval_bundle");

  std::vector<std::size_t> sizes;
  for (const auto& s : split_list(ctx.require("sizes"))) sizes.push_back(parse_size("sizes", s));
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(ctx.require("seeds"))) seeds.push_back(parse_size("seeds", s));
  if (sizes.empty() || seeds.empty()) throw UsageError("--sizes and --seeds must be non-empty");

  std::vector<ResultRow> rows;
  for (auto seed : seeds) {
    std::vector<AnchorSet> subsets;
    for (auto s : sizes) {
      auto idx = sample_indices(bundle.anchors.size(), s, seed);
      std::sort(idx.begin(), idx.end());
      subsets.push_back(bundle.anchors.subset(idx));
    }
    SweepOptions options;
    options.eval_bundle = eval ? &*eval : nullptr;
    options.seeds = {seed};
    options.experiment = ctx.require("experiment");
    auto part = prompt_sweep(bundle, cfg, subsets, options);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return a.subset_size != b.subset_size ? a.subset_size < b.subset_size : a.seed < b.seed;
  });
  const auto path = ctx.output("results", "sweep.csv");
  write_results_csv(rows, path);
  std::cerr << "wrote " << path.string() << "\n";
}

void run_export_curves(Context& ctx) {
  const auto experiment = ctx.require("experiment");
  std::vector<ResultRow> rows;
  for (const auto& file : split_list(ctx.require("curve"))) {
    std::uint64_t seed = 0;
    std::size_t subset_size = 0;
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line) && line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(2, eq - 2);
      if (key == "seed") seed = parse_size(key, line.substr(eq + 1));
      if (key == "anchors") subset_size = parse_size(key, line.substr(eq + 1));
    }
    for (const auto& r : read_curve_csv(file)) {
      const auto tag = "@" + std::to_string(r.epoch);
      rows.push_back({experiment, subset_size, seed, "lr" + tag, r.lr});
      rows.push_back({experiment, subset_size, seed, "csm_ce" + tag, r.csm_ce});
      rows.push_back({experiment, subset_size, seed, "ent_min" + tag, r.ent_min});
      rows.push_back({experiment, subset_size, seed, "ism" + tag, r.ism});
      rows.push_back({experiment, subset_size, seed, "total" + tag, r.total});
      if (r.zeroshot_acc) rows.push_back({experiment, subset_size, seed, "zeroshot_acc" + tag, *r.zeroshot_acc});
    }
  }
  const auto path = ctx.output("out", "curves.csv");
  write_results_csv(rows, path);
  std::cerr << "wrote " << path.string() << "\n";
}

// ---------------------------------------------------------------------------
// wiring

using FlagList = std::vector<std::pair<std::string, Flag>>;

const FlagList kBundleFlags = {
    {"bundle", {"input bundle (.xmb)", true}},
    {"prompts", {"prompts.txt sidecar replacing the bundle's prompt strings"}},
};
const FlagList kModelFlags = {
    {"checkpoint", {"student checkpoint (.xms); teacher embeddings when omitted"}},
    {"live", {"use the live student instead of its EMA shadow", false, true}},
};

struct Spec {
  const char* name;
  const char* description;
  Handler run;
  std::vector<FlagList> flags;
};

std::vector<Spec> command_specs() {
  return {
      {"synth", "generate a synthetic teacher bundle", run_synth,
       {{{"classes", {"number of classes M", false, false, "10"}},
         {"dim", {"embedding width D", false, false, "16"}},
         {"input_dim", {"raw input width F", false, false, "32"}},
         {"per_class", {"samples per class", false, false, "200"}},
         {"sigma", {"teacher noise around each anchor", false, false, "0.1"}},
         {"input_noise", {"extra noise on raw inputs", false, false, "0"}},
         {"out", {"bundle path (default <out-dir>/bundle.xmb)"}},
         {"truth", {"also write id,label CSV here"}},
         {"label_csv", {"fine,coarse,description CSV naming the classes"}},
         {"template", {"prompt template for --label-csv: basic|wiki|hierarchical", false, false, "basic"}},
         {"plain_prompts", {"drop the braces around substituted labels", false, true}},
         {"prompts_out", {"also write the prompt list here"}}}}},
      {"pretrain", "self-supervised InfoNCE pretraining of the student", run_pretrain_cmd,
       {kBundleFlags, {{"out", {"checkpoint path (default <out-dir>/pretrain.xms)"}}}}},
      {"transfer", "distill the teacher into the student", run_transfer_cmd,
       {kBundleFlags,
        {{"eval_bundle", {"bundle for the per-epoch zero-shot column"}},
         {"init", {"starting checkpoint (e.g. from pretrain)"}},
         {"out", {"checkpoint path (default <out-dir>/student.xms)"}},
         {"curve", {"curve CSV path (default <out-dir>/curve.csv)"}}}}},
      {"zeroshot", "nearest-anchor classification", run_zeroshot,
       {kBundleFlags, kModelFlags,
        {{"results", {"results CSV (default <out-dir>/zeroshot.csv)"}},
         {"predictions", {"also write id,predicted CSV here"}}}}},
      {"probe", "linear-probe evaluation on frozen embeddings", run_probe,
       {kBundleFlags, kModelFlags,
        {{"test_bundle", {"held-out bundle; otherwise a split of --bundle"}},
         {"test_fraction", {"held-out share when splitting", false, false, "0.2"}},
         {"results", {"results CSV (default <out-dir>/probe.csv)"}}}}},
      {"retrieve", "top-k retrieval over bundle rows", run_retrieve,
       {kBundleFlags, kModelFlags,
        {{"k", {"results per query", false, false, "5"}},
         {"query_ids", {"comma-separated row ids to query with; anchors otherwise"}},
         {"out", {"JSONL path (default <out-dir>/retrieval.jsonl)"}}}}},
      {"sweep", "zero-shot accuracy versus number of training prompts", run_sweep,
       {kBundleFlags,
        {{"eval_bundle", {"bundle to score on (full anchor set)"}},
         {"sizes", {"comma-separated subset sizes", false, false, "3,5,7,10"}},
         {"seeds", {"comma-separated seeds", false, false, "0,1,2"}},
         {"experiment", {"experiment column value", false, false, "prompt_sweep"}},
         {"results", {"results CSV (default <out-dir>/sweep.csv)"}}}}},
      {"export-curves", "convert curve CSVs to long-format results", run_export_curves,
       {{{"curve", {"comma-separated curve CSV paths", true}},
         {"experiment", {"experiment column value", false, false, "transfer"}},
         {"out", {"results CSV (default <out-dir>/curves.csv)"}}}}},
  };
}

int usage(const CLI::App& app, const std::string& message) {
  std::cerr << "usage error: " << message << "\n\n" << app.help();
  return 2;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  configure_logging_from_env("info");

  CLI::App app{"xmodal: cross-modal similarity distillation toolkit"};
  app.name(args.empty() ? "xmodal" : fs::path(args.front()).filename().string());
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all subcommand help");

  const auto specs = command_specs();
  std::vector<std::unique_ptr<Command>> commands;
  std::set<std::string> all_flag_keys;
  for (const auto& spec : specs) {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(spec.name, spec.description);
    cmd->run = spec.run;
    cmd->app->add_option("--config", cmd->config_path, "key=value config file (flags override it)");
    cmd->app->add_option("--out-dir", cmd->out_dir, "directory for default output paths")
        ->capture_default_str();
    for (const auto& list : spec.flags) {
      for (const auto& [key, flag] : list) {
        cmd->flags[key] = flag;
        all_flag_keys.insert(key);
        auto& slot = cmd->values[key];
        std::string help = flag.help;
        if (flag.fallback) help += " [" + *flag.fallback + "]";
        cmd->options[key] = flag.is_switch ? cmd->app->add_flag("--" + dashed(key), help)
                                           : cmd->app->add_option("--" + dashed(key), slot, help);
      }
    }
    for (const auto& key : TrainConfig::keys()) {
      if (key == "out_dir" || cmd->flags.count(key)) continue;
      cmd->config_options[key] =
          cmd->app->add_option("--" + dashed(key), cmd->config_values[key], "config: " + key);
    }
    commands.push_back(std::move(cmd));
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("xmodal");

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    CLI::App* failing = &app;
    for (auto& cmd : commands) {
      if (cmd->app->parsed()) failing = cmd->app;
    }
    return usage(*failing, e.what());
  }

  Command* cmd = nullptr;
  for (auto& c : commands) {
    if (c->app->parsed()) cmd = c.get();
  }
  if (cmd == nullptr) return usage(app, "a subcommand is required");

  try {
    TrainConfig config;
    if (!cmd->config_path.empty()) {
      const std::set<std::string> config_keys = [] {
        const auto k = TrainConfig::keys();
        return std::set<std::string>(k.begin(), k.end());
      }();
      for (const auto& [key, value] : read_key_value_file(cmd->config_path)) {
        if (cmd->flags.count(key)) {
          if (cmd->options[key]->count() == 0) cmd->values[key] = value;
        } else if (config_keys.count(key)) {
          config.set(key, value);
        } else if (key == "out_dir") {
          if (cmd->app->get_option("--out-dir")->count() == 0) cmd->out_dir = value;
        } else if (!all_flag_keys.count(key)) {
          throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + cmd->config_path);
        }
      }
    }
    for (const auto& [key, option] : cmd->config_options) {
      if (option->count() > 0) config.set(key, cmd->config_values[key]);
    }
    for (const auto& [key, flag] : cmd->flags) {
      if (flag.is_switch && cmd->options[key]->count() > 0) cmd->values[key] = "true";
      if (flag.fallback && cmd->values[key].empty()) cmd->values[key] = *flag.fallback;
      if (flag.required && cmd->values[key].empty()) throw UsageError("--" + dashed(key) + " is required");
    }
    config.validate();

    Context ctx(*cmd, config);
    try {
      cmd->run(ctx);
    } catch (const UsageError& e) {
      return usage(*cmd->app, e.what());
    }
    return 0;
  } catch (const UsageError& e) {
    return usage(*cmd->app, e.what());
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: Io: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace xmodal::cli
