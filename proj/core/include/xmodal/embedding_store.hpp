#pragma once

#include "xmodal/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xmodal {

/// Rows with an L2 norm at or below this are rejected by l2_normalize.
inline constexpr double kZeroNormThreshold = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

/// N x D embeddings (teacher k_i or student q_i) with per-row ids.
///
/// Several rows may share an id: that is how K precomputed augmented views of
/// one image are stored.
struct EmbeddingSet {
  std::vector<std::string> ids;
  Matrix data;
  std::optional<std::vector<std::int32_t>> labels;
  bool normalized = false;

  std::size_t size() const noexcept { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(data.cols()); }

  /// Throws on any broken invariant. num_classes bounds the labels when given.
  void validate(std::optional<std::size_t> num_classes = std::nullopt) const;

  bool operator==(const EmbeddingSet&) const;
};

/// M x D text-anchor embeddings paired with the prompts that produced them.
struct AnchorSet {
  std::vector<std::string> prompts;
  std::vector<std::string> class_names;
  Matrix data;
  bool normalized = false;

  std::size_t size() const noexcept { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(data.cols()); }

  void validate() const;

  /// Distinct class names in first-appearance order.
  std::vector<std::string> classes() const;
  /// For every anchor, the index of its class in classes().
  std::vector<std::size_t> class_of_anchor() const;

  /// Anchors at the given positions, in the given order.
  AnchorSet subset(const std::vector<std::size_t>& rows) const;

  bool operator==(const AnchorSet&) const;
};

struct DatasetBundle {
  Matrix inputs;
  EmbeddingSet teacher;
  AnchorSet anchors;
  std::optional<std::vector<std::int32_t>> eval_labels;

  std::size_t size() const noexcept { return static_cast<std::size_t>(inputs.rows()); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(inputs.cols()); }

  void validate() const;

  /// Rows at the given positions (inputs, teacher rows, ids, labels).
  DatasetBundle subset(const std::vector<std::size_t>& rows) const;

  bool operator==(const DatasetBundle&) const;
};

/// Collapses runs of whitespace and trims; used for prompt uniqueness.
std::string normalize_whitespace(const std::string& text);

/// Reads an "XMB1" bundle. Values are stored as 32-bit floats on disk and
/// widened to double on load; rows are left unnormalized.
DatasetBundle load_bundle(const std::filesystem::path& path);

/// As above, then replaces the embedded prompts with the lines of a
/// prompts.txt sidecar (one prompt per line, count must equal M).
DatasetBundle load_bundle(const std::filesystem::path& path,
                          const std::filesystem::path& prompt_sidecar);

/// Writes an "XMB1" bundle. Values are narrowed to float32, so a bundle
/// round-trips bit-exactly whenever its values are float-representable.
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& path);

std::vector<std::string> read_prompt_lines(const std::filesystem::path& path);

Matrix l2_normalize(const Matrix& rows);
EmbeddingSet l2_normalize(const EmbeddingSet& set);
AnchorSet l2_normalize(const AnchorSet& set);

/// Rounds every entry through float32 (the on-disk precision).
Matrix round_to_float(const Matrix& m);

}  // namespace xmodal
