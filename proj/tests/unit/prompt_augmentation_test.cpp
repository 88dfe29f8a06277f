#include "temp_dir.hpp"

#include <xmodal/error.hpp>
#include <xmodal/prompt_augmentation.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <regex>
#include <set>

using namespace xmodal;

namespace {

LabelRecord fine(const std::string& label) { return {label, std::nullopt, std::nullopt}; }

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an xmodal::Error";
  return ErrorCode::Io;
}

}  // namespace

TEST(RenderPrompt, BasicKeepsBraces) {
  EXPECT_EQ(render_prompt(PromptTemplate::basic(), fine("baby")), "A photo of a {baby}.");
}

TEST(RenderPrompt, Hierarchical) {
  EXPECT_EQ(render_prompt(PromptTemplate::hierarchical(), {"baby", "people", std::nullopt}),
            "A photo of a {baby}, categorized as {people}.");
}

TEST(RenderPrompt, WikiContext) {
  EXPECT_EQ(render_prompt(PromptTemplate::wiki_context(),
                          {"snapdragon", std::nullopt, "Antirrhinum is a genus of plants."}),
            "A photo of {snapdragon}. {Antirrhinum is a genus of plants}.");
}

TEST(RenderPrompt, PlainModeDropsBraces) {
  auto t = PromptTemplate::hierarchical();
  t.retain_braces = false;
  EXPECT_EQ(render_prompt(t, {"baby", "people", std::nullopt}), "A photo of a baby, categorized as people.");
}

TEST(RenderPrompt, SingleTrailingPeriod) {
  PromptTemplate t{TemplateKind::Basic, "a {label}...", false};
  EXPECT_EQ(render_prompt(t, fine("cat")), "a cat.");
  PromptTemplate no_period{TemplateKind::Basic, "a {label}", false};
  EXPECT_EQ(render_prompt(no_period, fine("cat")), "a cat.");
}

TEST(RenderPrompt, MissingSlotIsNamed) {
  try {
    render_prompt(PromptTemplate::hierarchical(), fine("baby"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingSlot);
    EXPECT_NE(std::string(e.what()).find("coarse"), std::string::npos);
  }
  EXPECT_EQ(code_of([] { render_prompt(PromptTemplate::wiki_context(), fine("x")); }), ErrorCode::MissingSlot);
}

TEST(RenderPrompt, NoUnresolvedSlotsAndInjective) {
  const std::regex slot(R"(\{(label|fine|coarse|description)\})");
  for (const auto& tmpl : {PromptTemplate::basic(), PromptTemplate::wiki_context(), PromptTemplate::hierarchical()}) {
    std::set<std::string> seen;
    for (int i = 0; i < 200; ++i) {
      const LabelRecord r{"label" + std::to_string(i), "group", "some description"};
      const auto p = render_prompt(tmpl, r);
      EXPECT_FALSE(std::regex_search(p, slot)) << p;
      EXPECT_TRUE(seen.insert(p).second) << p;
    }
  }
}

TEST(PromptTemplate, ValidateRequiresKindSlots) {
  EXPECT_EQ(code_of([] { PromptTemplate{TemplateKind::Hierarchical, "A {fine}.", true}.validate(); }),
            ErrorCode::InvalidConfig);
  EXPECT_NO_THROW(PromptTemplate::wiki_context().validate());
}

TEST(BuildPromptList, RecordOrderAndDedup) {
  const auto basic = PromptTemplate::basic();
  EXPECT_EQ(build_prompt_list({basic}, {fine("b"), fine("a")}),
            (std::vector<std::string>{"A photo of a {b}.", "A photo of a {a}."}));
  EXPECT_EQ(build_prompt_list({basic}, {fine("a"), fine("b"), fine("a")}),
            (std::vector<std::string>{"A photo of a {a}.", "A photo of a {b}."}));
  EXPECT_EQ(code_of([&] { build_prompt_list({basic}, {}); }), ErrorCode::EmptyRecordSet);
}

TEST(BuildPromptList, OnePerRecordPerTemplate) {
  std::vector<LabelRecord> records;
  for (int i = 0; i < 102; ++i) records.push_back({"flower " + std::to_string(i), std::nullopt, "desc " + std::to_string(i)});
  EXPECT_EQ(build_prompt_list({PromptTemplate::wiki_context()}, records).size(), 102u);
  EXPECT_EQ(build_prompt_list({PromptTemplate::wiki_context(), PromptTemplate::basic()}, records).size(), 204u);
}

TEST(SamplePromptSubset, FullSizeKeepsMembership) {
  std::vector<std::string> prompts;
  for (int i = 0; i < 10; ++i) prompts.push_back("p" + std::to_string(i));
  auto s = sample_prompt_subset(prompts, 10, 4);
  std::sort(s.begin(), s.end());
  auto sorted = prompts;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(s, sorted);
}

TEST(SamplePromptSubset, DeterministicUnderSeed) {
  std::vector<std::string> prompts;
  for (int i = 0; i < 10; ++i) prompts.push_back("p" + std::to_string(i));
  EXPECT_EQ(sample_prompt_subset(prompts, 3, 99), sample_prompt_subset(prompts, 3, 99));
  EXPECT_EQ(code_of([&] { sample_prompt_subset(prompts, 11, 0); }), ErrorCode::SampleTooLarge);
  EXPECT_EQ(code_of([&] { sample_prompt_subset(prompts, 0, 0); }), ErrorCode::SampleTooLarge);
}

TEST(SamplePromptSubset, InclusionFrequencyIsUniform) {
  std::vector<int> hits(10, 0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    for (auto i : sample_indices(10, 5, static_cast<std::uint64_t>(t))) ++hits[i];
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, 0.5, 0.02);
}

TEST(LabelCsv, QuotingBomAndCrlf) {
  const std::string text =
      "\xEF\xBB\xBF"
      "fine,coarse,description\r\n"
      "baby,people,\r\n"
      "\"bird of paradise\",,\"A plant, with \"\"orange\"\" flowers\"\r\n";
  const auto records = parse_label_csv(text);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].fine_label, "baby");
  EXPECT_EQ(records[0].coarse_label, std::optional<std::string>("people"));
  EXPECT_FALSE(records[0].description);
  EXPECT_EQ(records[1].fine_label, "bird of paradise");
  EXPECT_FALSE(records[1].coarse_label);
  EXPECT_EQ(records[1].description, std::optional<std::string>("A plant, with \"orange\" flowers"));
}

TEST(LabelCsv, HeaderRequired) {
  EXPECT_EQ(code_of([] { parse_label_csv("a,b,c\nx,y,z\n"); }), ErrorCode::InvalidConfig);
}

TEST(LabelCsv, FileRoundTripThroughPromptList) {
  testing_support::TempDir dir;
  testing_support::write_text(dir / "labels.csv", "fine,coarse,description\nbaby,people,\n");
  const auto records = read_label_csv(dir / "labels.csv");
  const auto prompts = build_prompt_list({PromptTemplate::hierarchical()}, records);
  write_prompt_list(prompts, dir / "prompts.txt");
  std::ifstream in(dir / "prompts.txt");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "A photo of a {baby}, categorized as {people}.");
}
