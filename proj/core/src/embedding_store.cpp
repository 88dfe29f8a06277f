#include "xmodal/embedding_store.hpp"

#include "xmodal/error.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

namespace xmodal {

namespace {

constexpr std::array<char, 4> kBundleMagic = {'X', 'M', 'B', '1'};
constexpr std::uint32_t kFlagTeacherLabels = 1u << 0;
constexpr std::uint32_t kFlagEvalLabels = 1u << 1;
constexpr std::uint32_t kKnownFlags = kFlagTeacherLabels | kFlagEvalLabels;

std::size_t first_nonfinite_row(const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (!m.row(r).allFinite()) return static_cast<std::size_t>(r);
  }
  return static_cast<std::size_t>(m.rows());
}

void check_finite(const Matrix& m, const char* what) {
  const auto row = first_nonfinite_row(m);
  if (row < static_cast<std::size_t>(m.rows())) {
    throw Error(ErrorCode::NonFiniteValue, std::string(what) + " row contains NaN/Inf", row);
  }
}

void check_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > kUnitNormTolerance) {
      throw Error(ErrorCode::InvalidConfig, std::string(what) + " flagged normalized but row is not unit norm",
                  static_cast<std::size_t>(r));
    }
  }
}

void check_labels(const std::vector<std::int32_t>& labels, std::size_t n,
                  std::optional<std::size_t> num_classes, const char* what) {
  if (labels.size() != n) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(what) + " count " + std::to_string(labels.size()) +
                    " != rows " + std::to_string(n));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool negative = labels[i] < 0;
    const bool too_big = num_classes && static_cast<std::size_t>(labels[i]) >= *num_classes;
    if (negative || (!negative && too_big)) {
      throw Error(ErrorCode::InvalidConfig,
                  std::string(what) + " value " + std::to_string(labels[i]) + " out of range", i);
    }
  }
}

std::vector<std::string> pick(const std::vector<std::string>& src,
                              const std::vector<std::size_t>& rows) {
  std::vector<std::string> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(src.at(r));
  return out;
}

Matrix pick_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(m.rows())) {
      throw Error(ErrorCode::ShapeMismatch, "row index out of range", rows[i]);
    }
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::optional<std::vector<std::int32_t>> pick_labels(
    const std::optional<std::vector<std::int32_t>>& labels, const std::vector<std::size_t>& rows) {
  if (!labels) return std::nullopt;
  std::vector<std::int32_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels->at(r));
  return out;
}

void write_block(detail::Writer& out, const Matrix& m) {
  out.u32(static_cast<std::uint32_t>(m.rows()));
  out.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) out.f32(static_cast<float>(m.data()[i]));
}

Matrix read_block_data(detail::Reader& in, std::uint32_t rows, std::uint32_t cols, const char* what) {
  in.need(static_cast<std::size_t>(rows) * cols * 4, what);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(in.f32(what));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------

void EmbeddingSet::validate(std::optional<std::size_t> num_classes) const {
  if (ids.size() != size()) {
    throw Error(ErrorCode::DimensionMismatch, "ids count " + std::to_string(ids.size()) +
                                                  " != rows " + std::to_string(size()));
  }
  check_finite(data, "embedding");
  if (normalized) check_unit_rows(data, "embedding");
  if (labels) check_labels(*labels, size(), num_classes, "label");
}

bool EmbeddingSet::operator==(const EmbeddingSet& other) const {
  return ids == other.ids && identical(data, other.data) && labels == other.labels &&
         normalized == other.normalized;
}

void AnchorSet::validate() const {
  if (size() < 2) {
    throw Error(ErrorCode::DimensionMismatch, "an anchor set needs at least 2 anchors, got " +
                                                  std::to_string(size()));
  }
  if (prompts.size() != size() || class_names.size() != size()) {
    throw Error(ErrorCode::DimensionMismatch, "anchor prompts/class names do not match anchor rows");
  }
  check_finite(data, "anchor");
  if (normalized) check_unit_rows(data, "anchor");
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    const auto [it, inserted] = seen.emplace(normalize_whitespace(prompts[j]), j);
    if (!inserted) {
      throw Error(ErrorCode::InvalidConfig, "duplicate prompt '" + prompts[j] + "' (first at " +
                                                std::to_string(it->second) + ")", j);
    }
  }
}

std::vector<std::string> AnchorSet::classes() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& name : class_names) {
    if (seen.insert(name).second) out.push_back(name);
  }
  return out;
}

std::vector<std::size_t> AnchorSet::class_of_anchor() const {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::size_t> out;
  out.reserve(class_names.size());
  for (const auto& name : class_names) {
    const auto [it, inserted] = index.emplace(name, index.size());
    out.push_back(it->second);
  }
  return out;
}

AnchorSet AnchorSet::subset(const std::vector<std::size_t>& rows) const {
  return {pick(prompts, rows), pick(class_names, rows), pick_rows(data, rows), normalized};
}

bool AnchorSet::operator==(const AnchorSet& other) const {
  return prompts == other.prompts && class_names == other.class_names &&
         identical(data, other.data) && normalized == other.normalized;
}

void DatasetBundle::validate() const {
  if (inputs.rows() != teacher.data.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "inputs have " + std::to_string(inputs.rows()) +
                                                  " rows but teacher embeddings have " +
                                                  std::to_string(teacher.data.rows()));
  }
  if (anchors.dim() != teacher.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "anchor dim " + std::to_string(anchors.dim()) +
                                                  " != teacher dim " + std::to_string(teacher.dim()));
  }
  check_finite(inputs, "input");
  anchors.validate();
  const auto num_classes = anchors.classes().size();
  teacher.validate(num_classes);
  if (eval_labels) check_labels(*eval_labels, size(), num_classes, "eval label");
}

DatasetBundle DatasetBundle::subset(const std::vector<std::size_t>& rows) const {
  DatasetBundle out;
  out.inputs = pick_rows(inputs, rows);
  out.teacher.ids = pick(teacher.ids, rows);
  out.teacher.data = pick_rows(teacher.data, rows);
  out.teacher.labels = pick_labels(teacher.labels, rows);
  out.teacher.normalized = teacher.normalized;
  out.anchors = anchors;
  out.eval_labels = pick_labels(eval_labels, rows);
  return out;
}

bool DatasetBundle::operator==(const DatasetBundle& other) const {
  return identical(inputs, other.inputs) && teacher == other.teacher &&
         anchors == other.anchors && eval_labels == other.eval_labels;
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(ch);
  }
  return out;
}

DatasetBundle load_bundle(const std::filesystem::path& path) {
  detail::Reader in(detail::read_file(path, "bundle file"));
  in.magic(kBundleMagic);
  const auto n = in.u32("header N");
  const auto f = in.u32("header F");
  const auto d = in.u32("header D");
  const auto m = in.u32("header M");
  const auto flags = in.u32("header flags");
  if ((flags & ~kKnownFlags) != 0) {
    throw Error(ErrorCode::MalformedHeader, "unknown flag bits " + std::to_string(flags));
  }

  auto read_block = [&](std::uint32_t rows, std::uint32_t cols, const char* what) {
    const auto got_rows = in.u32(what);
    const auto got_cols = in.u32(what);
    if (got_rows != rows || got_cols != cols) {
      throw Error(ErrorCode::DimensionMismatch,
                  std::string(what) + " block is " + std::to_string(got_rows) + "x" +
                      std::to_string(got_cols) + ", header says " + std::to_string(rows) + "x" +
                      std::to_string(cols));
    }
    return read_block_data(in, rows, cols, what);
  };

  DatasetBundle bundle;
  bundle.inputs = read_block(n, f, "inputs");
  bundle.teacher.data = read_block(n, d, "teacher embeddings");
  {
    const auto rows = in.u32("anchors");
    const auto cols = in.u32("anchors");
    if (rows != m) {
      throw Error(ErrorCode::DimensionMismatch, "anchor block has " + std::to_string(rows) +
                                                    " rows, header says M=" + std::to_string(m));
    }
    if (cols != d) {
      throw Error(ErrorCode::DimensionMismatch, "anchor dim " + std::to_string(cols) +
                                                    " != teacher dim " + std::to_string(d));
    }
    bundle.anchors.data = read_block_data(in, rows, cols, "anchors");
  }

  auto read_labels = [&](const char* what) {
    std::vector<std::int32_t> labels(n);
    for (auto& label : labels) label = in.i32(what);
    return labels;
  };
  if (flags & kFlagTeacherLabels) bundle.teacher.labels = read_labels("teacher labels");
  if (flags & kFlagEvalLabels) bundle.eval_labels = read_labels("eval labels");

  bundle.teacher.ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) bundle.teacher.ids.push_back(in.string("ids"));
  bundle.anchors.prompts.reserve(m);
  for (std::uint32_t j = 0; j < m; ++j) bundle.anchors.prompts.push_back(in.string("prompts"));
  bundle.anchors.class_names.reserve(m);
  for (std::uint32_t j = 0; j < m; ++j) bundle.anchors.class_names.push_back(in.string("class names"));
  if (!in.done()) throw Error(ErrorCode::MalformedHeader, "trailing bytes after string table");

  // Teacher rows are reported first: that is where exporter bugs show up.
  check_finite(bundle.teacher.data, "teacher embedding");
  check_finite(bundle.inputs, "input");
  bundle.validate();
  return bundle;
}

DatasetBundle load_bundle(const std::filesystem::path& path,
                          const std::filesystem::path& prompt_sidecar) {
  auto bundle = load_bundle(path);
  auto prompts = read_prompt_lines(prompt_sidecar);
  if (prompts.size() != bundle.anchors.size()) {
    throw Error(ErrorCode::DimensionMismatch, "prompt sidecar has " + std::to_string(prompts.size()) +
                                                  " lines, bundle has M=" +
                                                  std::to_string(bundle.anchors.size()));
  }
  bundle.anchors.prompts = std::move(prompts);
  bundle.anchors.validate();
  return bundle;
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& path) {
  bundle.validate();
  detail::Writer out;
  out.bytes(kBundleMagic.data(), kBundleMagic.size());
  out.u32(static_cast<std::uint32_t>(bundle.size()));
  out.u32(static_cast<std::uint32_t>(bundle.input_dim()));
  out.u32(static_cast<std::uint32_t>(bundle.teacher.dim()));
  out.u32(static_cast<std::uint32_t>(bundle.anchors.size()));
  std::uint32_t flags = 0;
  if (bundle.teacher.labels) flags |= kFlagTeacherLabels;
  if (bundle.eval_labels) flags |= kFlagEvalLabels;
  out.u32(flags);
  write_block(out, bundle.inputs);
  write_block(out, bundle.teacher.data);
  write_block(out, bundle.anchors.data);
  if (bundle.teacher.labels) for (auto l : *bundle.teacher.labels) out.i32(l);
  if (bundle.eval_labels) for (auto l : *bundle.eval_labels) out.i32(l);
  for (const auto& id : bundle.teacher.ids) out.string(id);
  for (const auto& p : bundle.anchors.prompts) out.string(p);
  for (const auto& c : bundle.anchors.class_names) out.string(c);
  detail::write_file(path, out.buffer());
}

std::vector<std::string> read_prompt_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open prompt file '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (normalize_whitespace(line).empty()) continue;
    lines.push_back(line);
  }
  return lines;
}

Matrix l2_normalize(const Matrix& rows) {
  Matrix out(rows.rows(), rows.cols());
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double norm = rows.row(r).norm();
    if (!(norm > kZeroNormThreshold)) {
      throw Error(ErrorCode::ZeroVector, "row norm " + std::to_string(norm) + " <= 1e-12",
                  static_cast<std::size_t>(r));
    }
    out.row(r) = rows.row(r) / norm;
  }
  return out;
}

EmbeddingSet l2_normalize(const EmbeddingSet& set) {
  EmbeddingSet out = set;
  out.data = l2_normalize(set.data);
  out.normalized = true;
  return out;
}

AnchorSet l2_normalize(const AnchorSet& set) {
  AnchorSet out = set;
  out.data = l2_normalize(set.data);
  out.normalized = true;
  return out;
}

Matrix round_to_float(const Matrix& m) {
  return m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

}  // namespace xmodal
