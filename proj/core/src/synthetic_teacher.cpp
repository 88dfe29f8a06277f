#include "xmodal/synthetic_teacher.hpp"

#include "xmodal/error.hpp"
#include "xmodal/prompt_augmentation.hpp"

#include "log.hpp"

#include <Eigen/QR>

#include <cstdio>
#include <fstream>
#include <random>

namespace xmodal {

namespace {

constexpr std::uint64_t kAnchorStream = 0x2545f4914f6cdd1dULL;
constexpr std::uint64_t kMixingStream = 0x9fb21c651e98df25ULL;
constexpr std::uint64_t kSampleStream = 0xd6e8feb86659fd93ULL;

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix orthonormal_anchors(std::size_t m, std::size_t d, std::mt19937_64& rng) {
  const Matrix g = gaussian(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m), rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
  return q.transpose();
}

// Riesz-energy repulsion on the unit sphere.
Matrix spread_anchors(std::size_t m, std::size_t d, std::mt19937_64& rng) {
  Matrix a = l2_normalize(gaussian(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d), rng));
  constexpr int kIterations = 500;
  for (int it = 0; it < kIterations; ++it) {
    Matrix force = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.rows(); ++j) {
        if (i == j) continue;
        const RowVector diff = a.row(i) - a.row(j);
        const double dist = std::max(diff.norm(), 1e-9);
        force.row(i) += diff / (dist * dist * dist);
      }
    }
    const double step = 0.05 / static_cast<double>(m);
    a = l2_normalize(a + step * force);
  }
  return a;
}

}  // namespace

void SynthSpec::validate() const {
  if (embed_dim < 2) throw Error(ErrorCode::DimensionTooSmall, "embed_dim must be >= 2");
  if (num_classes < 2) throw Error(ErrorCode::InvalidConfig, "num_classes must be >= 2");
  if (input_dim < embed_dim) {
    throw Error(ErrorCode::DimensionTooSmall, "input_dim must be >= embed_dim so the mixing map is invertible");
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidConfig, "noise_sigma must be >= 0");
  if (!(input_noise >= 0.0)) throw Error(ErrorCode::InvalidConfig, "input_noise must be >= 0");
  if (samples_per_class == 0) throw Error(ErrorCode::InvalidConfig, "samples_per_class must be > 0");
}

SynthOutput generate(const SynthSpec& spec) {
  spec.validate();
  const auto m = spec.num_classes;
  const auto d = spec.embed_dim;
  const auto f = spec.input_dim;

  std::mt19937_64 anchor_rng(spec.seed ^ kAnchorStream);
  Matrix anchors;
  if (m <= d) {
    anchors = orthonormal_anchors(m, d, anchor_rng);
  } else {
    detail::log().warn("DimensionTooSmall: {} classes cannot be orthogonal in {} dimensions; "
                       "using maximally spread anchors instead", m, d);
    anchors = spread_anchors(m, d, anchor_rng);
  }
  anchors = round_to_float(anchors);

  std::mt19937_64 mixing_rng(spec.seed ^ kMixingStream);
  const Matrix mixing = gaussian(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(d), mixing_rng) /
                        std::sqrt(static_cast<double>(d));

  const auto n = m * spec.samples_per_class;
  SynthOutput out;
  out.mixing = mixing;
  auto& bundle = out.bundle;
  Matrix raw_teacher(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::mt19937_64 sample_rng(spec.seed ^ kSampleStream);
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const auto row = static_cast<Eigen::Index>(c * spec.samples_per_class + i);
      for (std::size_t k = 0; k < d; ++k) {
        raw_teacher(row, static_cast<Eigen::Index>(k)) =
            anchors(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) +
            spec.noise_sigma * unit_normal(sample_rng);
      }
      char id[48];
      std::snprintf(id, sizeof id, "c%03zu_%05zu", c, i);
      bundle.teacher.ids.emplace_back(id);
      out.truth.push_back(static_cast<std::int32_t>(c));
    }
  }

  Matrix inputs = raw_teacher * mixing.transpose();
  if (spec.input_noise > 0.0) {
    for (Eigen::Index i = 0; i < inputs.size(); ++i) inputs.data()[i] += spec.input_noise * unit_normal(sample_rng);
  }
  bundle.inputs = round_to_float(inputs);
  bundle.teacher.data = round_to_float(l2_normalize(raw_teacher));
  bundle.eval_labels = out.truth;

  const auto tmpl = PromptTemplate::basic();
  for (std::size_t c = 0; c < m; ++c) {
    const std::string name = "class_" + std::to_string(c);
    bundle.anchors.class_names.push_back(name);
    bundle.anchors.prompts.push_back(render_prompt(tmpl, LabelRecord{name, std::nullopt, std::nullopt}));
  }
  bundle.anchors.data = anchors;
  bundle.validate();
  return out;
}

void write_truth_csv(const DatasetBundle& bundle, const std::vector<std::int32_t>& truth,
                     const std::filesystem::path& path) {
  if (truth.size() != bundle.size()) {
    throw Error(ErrorCode::DimensionMismatch, "truth labels do not match bundle rows");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  out << "id,label\n";
  for (std::size_t i = 0; i < truth.size(); ++i) out << bundle.teacher.ids[i] << ',' << truth[i] << '\n';
}

}  // namespace xmodal
