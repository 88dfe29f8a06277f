#include "xmodal/prompt_augmentation.hpp"

#include "xmodal/embedding_store.hpp"
#include "xmodal/error.hpp"

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace xmodal {

namespace {

struct Slot {
  const char* marker;
  const char* name;
};

constexpr Slot kSlots[] = {
    {"{label}", "label"},
    {"{fine}", "fine"},
    {"{coarse}", "coarse"},
    {"{description}", "description"},
};

bool contains(const std::string& s, const char* needle) {
  return s.find(needle) != std::string::npos;
}

std::string trim_end(std::string s, const char* chars) {
  const auto end = s.find_last_not_of(chars);
  s.erase(end == std::string::npos ? 0 : end + 1);
  return s;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  return trim_end(s.substr(begin), " \t\r\n");
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

const std::optional<std::string>& field_for(const LabelRecord& record, const std::string& name,
                                            const std::optional<std::string>& fine) {
  if (name == "coarse") return record.coarse_label;
  if (name == "description") return record.description;
  return fine;
}

}  // namespace

PromptTemplate PromptTemplate::basic() {
  return {TemplateKind::Basic, "A photo of a {label}.", true};
}

PromptTemplate PromptTemplate::wiki_context() {
  return {TemplateKind::WikiContext, "A photo of {label}. {description}.", true};
}

PromptTemplate PromptTemplate::hierarchical() {
  return {TemplateKind::Hierarchical, "A photo of a {fine}, categorized as {coarse}.", true};
}

void PromptTemplate::validate() const {
  auto require = [&](const char* marker) {
    if (!contains(pattern, marker)) {
      throw Error(ErrorCode::InvalidConfig, "template '" + pattern + "' lacks slot " + marker);
    }
  };
  switch (kind) {
    case TemplateKind::Basic:
      require("{label}");
      break;
    case TemplateKind::WikiContext:
      require("{label}");
      require("{description}");
      break;
    case TemplateKind::Hierarchical:
      require("{fine}");
      require("{coarse}");
      break;
  }
}

std::string render_prompt(const PromptTemplate& tmpl, const LabelRecord& record) {
  tmpl.validate();
  if (record.fine_label.empty()) {
    throw Error(ErrorCode::MissingSlot, "fine_label is empty");
  }
  const std::optional<std::string> fine = record.fine_label;

  std::string out = tmpl.pattern;
  for (const auto& slot : kSlots) {
    if (!contains(out, slot.marker)) continue;
    const auto& value = field_for(record, slot.name, fine);
    if (!value || trim(*value).empty()) {
      throw Error(ErrorCode::MissingSlot, std::string(slot.name) + " required by '" + tmpl.pattern + "'");
    }
    // Sentence punctuation belongs to the template, not the value.
    std::string text = trim_end(trim(*value), ". ");
    replace_all(out, slot.marker, tmpl.retain_braces ? "{" + text + "}" : text);
  }
  return trim_end(out, ". \t") + ".";
}

std::vector<std::string> build_prompt_list(const std::vector<PromptTemplate>& templates,
                                           const std::vector<LabelRecord>& records) {
  if (records.empty()) throw Error(ErrorCode::EmptyRecordSet, "no label records");
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& record : records) {
    for (const auto& tmpl : templates) {
      auto prompt = render_prompt(tmpl, record);
      if (seen.insert(prompt).second) out.push_back(std::move(prompt));
    }
  }
  return out;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 1 || k > n) {
    throw Error(ErrorCode::SampleTooLarge,
                "cannot sample " + std::to_string(k) + " of " + std::to_string(n));
  }
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

std::vector<std::string> sample_prompt_subset(const std::vector<std::string>& prompts,
                                              std::size_t k, std::uint64_t seed) {
  std::vector<std::string> out;
  for (auto i : sample_indices(prompts.size(), k, seed)) out.push_back(prompts[i]);
  return out;
}

std::vector<LabelRecord> parse_label_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };

  std::size_t i = 0;
  if (text.rfind("\xEF\xBB\xBF", 0) == 0) i = 3;
  for (; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      // CRLF: the '\n' ends the row.
    } else if (ch == '\n') {
      end_row();
    } else {
      field.push_back(ch);
      field_started = true;
    }
  }
  if (quoted) throw Error(ErrorCode::InvalidConfig, "unterminated quoted field in label CSV");
  if (!field.empty() || !row.empty()) end_row();

  if (rows.empty() || rows[0] != std::vector<std::string>{"fine", "coarse", "description"}) {
    throw Error(ErrorCode::InvalidConfig, "label CSV must start with header fine,coarse,description");
  }
  std::vector<LabelRecord> records;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& cells = rows[r];
    if (cells.size() != 3) {
      throw Error(ErrorCode::InvalidConfig, "label CSV row has " + std::to_string(cells.size()) +
                                                " fields, expected 3", r);
    }
    LabelRecord record;
    record.fine_label = cells[0];
    if (record.fine_label.empty()) throw Error(ErrorCode::MissingSlot, "empty fine label", r);
    if (!cells[1].empty()) record.coarse_label = cells[1];
    if (!cells[2].empty()) record.description = cells[2];
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<LabelRecord> read_label_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open label CSV '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_label_csv(text.str());
}

void write_prompt_list(const std::vector<std::string>& prompts, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  for (const auto& p : prompts) out << p << '\n';
}

}  // namespace xmodal
