// Acceptance checks. Prints one "PASS <name>: ..." or "FAIL <name>: ..." line
// per criterion; a criterion name on the command line runs just that one.

#include "oracles.hpp"
#include "temp_dir.hpp"

#include <cli.hpp>
#include <xmodal/embedding_store.hpp>
#include <xmodal/error.hpp>
#include <xmodal/evaluation.hpp>
#include <xmodal/losses.hpp>
#include <xmodal/prompt_augmentation.hpp>
#include <xmodal/student.hpp>
#include <xmodal/synthetic_teacher.hpp>
#include <xmodal/trainer.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

using namespace xmodal;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<std::int32_t> labels_of(const std::vector<std::int32_t>& y, const std::vector<std::size_t>& rows) {
  std::vector<std::int32_t> out;
  for (auto r : rows) out.push_back(y[r]);
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  oracle::Gen gen(20240);
  const char* names[] = {"ism", "csm_ce", "ent_min", "kl", "infonce", "total"};
  double worst[6] = {};
  int failures[6] = {};
  constexpr double kTol = 1e-5;

  for (int inst = 0; inst < 100; ++inst) {
    const auto n = gen.index(1, 8);
    const auto m = gen.index(2, 8);
    const auto d = gen.index(2, 16);
    const double tau = std::exp(gen.uniform(std::log(0.01), std::log(1.0)));
    const Matrix z = gen.gaussian(n, d);
    const Matrix k = gen.unit_rows(n, d);
    const Matrix a = gen.unit_rows(m, d);
    const Matrix target = gen.distributions(n, m);
    const auto q = cross_modal_similarity_batch(l2_normalize(z), a, tau);
    auto via_logits = [&](const Matrix& g) { return normalize_backward(z, g * a / tau); };

    Matrix analytic[6];
    std::function<double(const Matrix&)> value[6];
    analytic[0] = normalize_backward(z, ism_loss(l2_normalize(z), k).grad);
    value[0] = [&](const Matrix& x) { return static_cast<double>(oracle::ism_ld(x, k)); };
    analytic[1] = via_logits(cross_entropy_term(q, target).grad);
    value[1] = [&](const Matrix& x) { return static_cast<double>(oracle::ce_ld(x, a, target, tau)); };
    analytic[2] = via_logits(entropy_term(q).grad);
    value[2] = [&](const Matrix& x) { return static_cast<double>(oracle::entropy_ld(x, a, tau)); };
    analytic[3] = via_logits(kl_matching_loss(q, target).grad);
    value[3] = [&](const Matrix& x) { return static_cast<double>(oracle::kl_ld(x, a, target, tau)); };

    const auto b = gen.index(2, 4);
    const Matrix p = gen.gaussian(2 * b, d);
    analytic[4] = infonce_loss(p, tau).grad;
    value[4] = [&](const Matrix& x) { return static_cast<double>(oracle::infonce_ld(x, tau)); };

    LossConfig cfg;
    cfg.temperature = tau;
    cfg.lambda_ism = 10.0;
    cfg.smoothing_enabled = inst % 2 == 0;
    cfg.variant = inst % 3 == 0 ? LossVariant::Kl : LossVariant::CeEntMin;
    const Matrix total_target = cfg.smoothing_enabled ? oracle::smoothed_targets(k, a, tau, cfg.smoothing_alpha)
                                                      : teacher_targets(k, a, cfg);
    analytic[5] = total_loss(z, k, a, cfg).grad_q;
    value[5] = [&](const Matrix& x) {
      const long double csm = cfg.variant == LossVariant::Kl
                                  ? oracle::kl_ld(x, a, total_target, tau)
                                  : oracle::ce_ld(x, a, total_target, tau) + oracle::entropy_ld(x, a, tau);
      return static_cast<double>(csm + 10.0L * oracle::ism_ld(x, k));
    };

    for (int l = 0; l < 6; ++l) {
      const Matrix& at = l == 4 ? p : z;
      const double err = oracle::relative_error(analytic[l], oracle::numeric_gradient(value[l], at, 1e-5));
      worst[l] = std::max(worst[l], err);
      if (!(err < kTol)) ++failures[l];
    }
  }
  const double elapsed = seconds_since(start);
  bool ok = elapsed < 30.0;
  std::string detail;
  for (int l = 0; l < 6; ++l) {
    ok = ok && failures[l] == 0;
    detail += fmt("%s max_rel=%.2e fails=%d; ", names[l], worst[l], failures[l]);
  }
  detail += fmt("%.2fs", elapsed);
  return {ok, detail};
}

Outcome distribution_normalization() {
  oracle::Gen gen(7);
  double worst_sum = 0.0;
  double worst_shift = 0.0;
  for (double tau : {1e-3, 0.01, 0.1, 1.0, 10.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto m = gen.index(2, 64);
      const auto d = gen.index(2, 32);
      const Matrix e = gen.unit_rows(32, d);
      const Matrix a = gen.unit_rows(m, d);
      const auto batch = cross_modal_similarity_batch(e, a, tau);
      for (Eigen::Index i = 0; i < batch.probs.rows(); ++i) {
        worst_sum = std::max(worst_sum, std::abs(batch.probs.row(i).sum() - 1.0));
        const auto single = cross_modal_similarity(e.row(i), a, tau);
        worst_sum = std::max(worst_sum, std::abs(single.probs.sum() - 1.0));
      }
      const Matrix logits = similarity_logits(e, a, tau);
      const double shift = gen.uniform(-50.0, 50.0);
      const Matrix shifted = (logits.array() + shift).matrix();
      worst_shift = std::max(worst_shift, (softmax_rows(logits) - softmax_rows(shifted)).cwiseAbs().maxCoeff());
    }
  }
  return {worst_sum <= 1e-9 && worst_shift <= 1e-12,
          fmt("max |sum-1|=%.2e, max shift delta=%.2e", worst_sum, worst_shift)};
}

Outcome smoothing_sum() {
  oracle::Gen gen(11);
  int checked = 0;
  int inexact = 0;
  int moved = 0;
  for (double alpha : {0.0, 0.2, 0.5, 0.9}) {
    for (std::size_t m = 2; m <= 300; ++m) {
      for (int trial = 0; trial < 3; ++trial) {
        const Matrix p = gen.distributions(1, m);
        const RowVector s = similarity_smoothing(p.row(0), alpha);
        const double total = std::accumulate(s.data(), s.data() + s.size(), 0.0);
        ++checked;
        if (total != 1.0) ++inexact;
        if (argmax(s) != argmax(p.row(0))) ++moved;
      }
    }
  }
  return {inexact == 0 && moved == 0,
          fmt("%d vectors, %d with sum != 1, %d with a moved argmax", checked, inexact, moved)};
}

Outcome ema_closed_form() {
  const auto theta = StudentModel::create(Architecture::Mlp, 32, 16, 24, 1);
  auto shadow = MomentumStudent::track(StudentModel::create(Architecture::Mlp, 32, 16, 24, 2), 0.99);
  const double d0 = std::sqrt(squared_distance(shadow.shadow.layers, theta.layers));
  double worst = 0.0;
  for (int k = 1; k <= 100; ++k) {
    ema_update(shadow, theta);
    const double ratio = std::sqrt(squared_distance(shadow.shadow.layers, theta.layers)) / d0;
    worst = std::max(worst, std::abs(ratio - std::pow(0.99, k)));
  }
  return {worst <= 1e-9, fmt("max |ratio - 0.99^k| = %.2e over k<=100", worst)};
}

Outcome sgdr_schedule() {
  TrainConfig cfg;
  cfg.lr0 = 0.5;
  cfg.lr_min = 0.0;
  cfg.epochs = 310;
  cfg.restart_period = 10;
  cfg.restart_mult = 2;
  bool boundaries = true;
  for (double b : {0.0, 10.0, 30.0, 70.0, 150.0}) boundaries = boundaries && sgdr_lr(b, cfg) == 0.5;
  TrainConfig single;
  single.epochs = 100;
  boundaries = boundaries && sgdr_lr(0.0, single) == 0.5;
  double worst = 0.0;
  for (double t = 0.0; t < 310.0; t += 0.37) {
    worst = std::max(worst, std::abs(sgdr_lr(t, cfg) - oracle::sgdr_replay(t, 0.5, 0.0, 10.0, 2.0)));
  }
  // Mid-cycle of the second cycle: T_cur = 10 of T_i = 20.
  const double mid = sgdr_lr(20.0, cfg);
  worst = std::max(worst, std::abs(mid - 0.25));
  return {boundaries && worst <= 1e-12, fmt("boundaries exact=%s, max closed-form delta=%.2e",
                                            boundaries ? "yes" : "no", worst)};
}

struct EndToEnd {
  double student_zero_shot = 0.0;
  double probe = 0.0;
  double bayes = 0.0;
};

EndToEnd run_end_to_end(const SynthSpec& spec, const TrainConfig& cfg) {
  const auto out = generate(spec);
  const auto [train, test] = holdout_split(out.bundle.size(), 0.2, spec.seed);
  const auto train_b = out.bundle.subset(train);
  const auto test_b = out.bundle.subset(test);
  const auto result = run_transfer(train_b, cfg);
  EndToEnd r;
  r.student_zero_shot = *zero_shot_accuracy(result.shadow.shadow, test_b);
  const Matrix student_train = l2_normalize(forward(result.shadow.shadow, train_b.inputs));
  const Matrix student_test = l2_normalize(forward(result.shadow.shadow, test_b.inputs));
  ProbeOptions probe;
  probe.c = cfg.probe_c;
  r.probe = linear_probe(student_train, labels_of(out.truth, train), student_test, labels_of(out.truth, test), probe)
                .top1_accuracy;
  const auto bayes = oracle::nearest_prototype(l2_normalize(test_b.teacher.data), l2_normalize(test_b.anchors.data));
  r.bayes = accuracy(bayes, labels_of(out.truth, test));
  return r;
}

Outcome synthetic_end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg;
  cfg.epochs = 100;
  const auto r = run_end_to_end(SynthSpec{}, cfg);
  const double elapsed = seconds_since(start);
  return {r.student_zero_shot >= 0.95 && r.probe >= 0.97 && r.bayes >= 0.99 && elapsed < 120.0,
          fmt("student zero-shot=%.4f probe=%.4f bayes=%.4f (%.1fs)", r.student_zero_shot, r.probe, r.bayes, elapsed)};
}

Outcome csm_ablation() {
  SynthSpec spec;
  spec.noise_sigma = 0.3;
  double csm = 0.0;
  double ism_only = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {0, 1, 2}) {
    spec.seed = seed;
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.seed = seed;
    const double with = run_end_to_end(spec, cfg).student_zero_shot;
    cfg.csm_enabled = false;
    const double without = run_end_to_end(spec, cfg).student_zero_shot;
    csm += with / 3.0;
    ism_only += without / 3.0;
    per_seed += fmt(" seed%llu %.4f/%.4f", static_cast<unsigned long long>(seed), with, without);
  }
  return {csm - ism_only >= 0.03,
          fmt("CSM=%.4f ISM-only=%.4f gap=%+.4f (need >= 0.03);%s", csm, ism_only, csm - ism_only, per_seed.c_str())};
}

Outcome prompt_count_trend() {
  const auto out = generate(SynthSpec{});
  const auto [train, test] = holdout_split(out.bundle.size(), 0.2, 0);
  const auto train_b = out.bundle.subset(train);
  const auto test_b = out.bundle.subset(test);
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.lambda_ism = 1.0;
  cfg.smoothing_enabled = false;
  const std::vector<std::size_t> sizes = {3, 5, 7, 10};
  std::vector<double> xs;
  std::vector<double> means;
  std::string detail;
  for (auto size : sizes) {
    double mean = 0.0;
    for (std::uint64_t seed : {0, 1, 2}) {
      auto idx = sample_indices(out.bundle.anchors.size(), size, seed);
      std::sort(idx.begin(), idx.end());
      SweepOptions opts;
      opts.eval_bundle = &test_b;
      opts.seeds = {seed};
      mean += prompt_sweep(train_b, cfg, {out.bundle.anchors.subset(idx)}, opts).front().value / 3.0;
    }
    xs.push_back(static_cast<double>(size));
    means.push_back(mean);
    detail += fmt("%zu:%.4f ", size, mean);
  }
  const double rho = oracle::spearman(xs, means);
  return {rho >= 0.8, detail + fmt("spearman=%.3f", rho)};
}

Outcome topological_witness() {
  const Matrix k{{0.0, 0.0, 1.0}};
  const Matrix anchors = l2_normalize(Matrix{{0.8, 0.3, 0.5}, {-0.2, 0.9, 0.4}, {0.1, -0.6, 0.8}});
  const Matrix target = cross_modal_similarity_batch(k, anchors, 0.01).probs;
  double best = 0.0;
  double best_theta = 0.0;
  bool equal_ism = true;
  for (double theta = 0.05; theta < 1.5; theta += 0.05) {
    const Matrix q1{{std::sin(theta), 0.0, std::cos(theta)}};
    const Matrix q2{{-std::sin(theta), 0.0, std::cos(theta)}};
    equal_ism = equal_ism && ism_loss(q1, k).value == ism_loss(q2, k).value;
    const double c1 = csm_loss(cross_modal_similarity_batch(q1, anchors, 0.01), target).value;
    const double c2 = csm_loss(cross_modal_similarity_batch(q2, anchors, 0.01), target).value;
    if (std::abs(c1 - c2) > best) best = std::abs(c1 - c2), best_theta = theta;
  }
  const double theta = 0.6;
  const Matrix q1{{std::sin(theta), 0.0, std::cos(theta)}};
  const Matrix q2{{-std::sin(theta), 0.0, std::cos(theta)}};
  const double gap = std::abs(csm_loss(cross_modal_similarity_batch(q1, anchors, 0.01), target).value -
                              csm_loss(cross_modal_similarity_batch(q2, anchors, 0.01), target).value);
  return {equal_ism && gap >= 0.1,
          fmt("ISM equal=%s, CSM gap at theta=0.6: %.4f (largest %.4f at theta=%.2f)", equal_ism ? "yes" : "no", gap,
              best, best_theta)};
}

Outcome determinism() {
  testing_support::TempDir dir;
  const auto bundle = (dir / "b.xmb").string();
  auto call = [](std::vector<std::string> args) {
    args.insert(args.begin(), "xmodal");
    return xmodal::cli::dispatch(args);
  };
  if (call({"synth", "--out", bundle, "--seed", "7"}) != 0) return {false, "synth failed"};
  for (const char* run : {"a", "b"}) {
    if (call({"transfer", "--bundle", bundle, "--epochs", "10", "--seed", "3", "--out-dir", (dir / run).string()}) !=
        0) {
      return {false, "transfer failed"};
    }
  }
  using testing_support::read_bytes;
  const bool ckpt = read_bytes(dir / "a/student.xms") == read_bytes(dir / "b/student.xms");
  const bool curve = read_bytes(dir / "a/curve.csv") == read_bytes(dir / "b/curve.csv");
  return {ckpt && curve, fmt("checkpoint identical=%s, curve identical=%s", ckpt ? "yes" : "no", curve ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  if (!std::getenv("XMODAL_LOG")) setenv("XMODAL_LOG", "warn", 1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_check", gradient_check},
      {"distribution_normalization", distribution_normalization},
      {"smoothing_sum", smoothing_sum},
      {"ema_closed_form", ema_closed_form},
      {"sgdr_schedule", sgdr_schedule},
      {"synthetic_end_to_end", synthetic_end_to_end},
      {"csm_ablation", csm_ablation},
      {"prompt_count_trend", prompt_count_trend},
      {"topological_witness", topological_witness},
      {"determinism", determinism},
  };
  const std::string only = argc > 1 ? argv[1] : "";
  bool all_ok = true;
  bool matched = false;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && name != only) continue;
    matched = true;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    all_ok = all_ok && o.pass;
  }
  if (!matched) {
    std::fprintf(stderr, "unknown criterion '%s'\n", only.c_str());
    return 2;
  }
  return all_ok ? 0 : 1;
}
