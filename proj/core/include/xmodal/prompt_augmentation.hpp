#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xmodal {

enum class TemplateKind { Basic, WikiContext, Hierarchical };

/// A prompt pattern with named slots. Recognised slots are {label},
/// {description}, {fine} and {coarse}; {label} and {fine} both resolve to
/// the record's fine label.
struct PromptTemplate {
  TemplateKind kind = TemplateKind::Basic;
  std::string pattern;
  /// Keep the literal braces around substituted values, as in
  /// "A photo of a {baby}." Disable for plain "A photo of a baby."
  bool retain_braces = true;

  static PromptTemplate basic();
  static PromptTemplate wiki_context();
  static PromptTemplate hierarchical();

  /// Throws InvalidConfig if the pattern lacks a slot its kind requires.
  void validate() const;
};

struct LabelRecord {
  std::string fine_label;
  std::optional<std::string> coarse_label;
  std::optional<std::string> description;
};

/// Substitutes every slot and normalizes the ending to a single period.
/// Throws MissingSlot(name) when the record lacks a field the pattern uses.
std::string render_prompt(const PromptTemplate& tmpl, const LabelRecord& record);

/// One prompt per record per template, record-major, deduplicated on the
/// rendered string (case-sensitive, first occurrence kept).
std::vector<std::string> build_prompt_list(const std::vector<PromptTemplate>& templates,
                                           const std::vector<LabelRecord>& records);

/// Uniform sample of k prompts without replacement, in sampled order.
std::vector<std::string> sample_prompt_subset(const std::vector<std::string>& prompts,
                                              std::size_t k, std::uint64_t seed);

/// Index form of sample_prompt_subset: k distinct positions in [0, n).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed);

/// Reads a `fine,coarse,description` CSV (RFC-4180 quoting, header required).
/// Empty coarse/description cells become nullopt.
std::vector<LabelRecord> read_label_csv(const std::filesystem::path& path);
std::vector<LabelRecord> parse_label_csv(const std::string& text);

/// One prompt per line.
void write_prompt_list(const std::vector<std::string>& prompts,
                       const std::filesystem::path& path);

}  // namespace xmodal
