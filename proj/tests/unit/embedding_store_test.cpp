#include "oracles.hpp"
#include "temp_dir.hpp"

#include <xmodal/embedding_store.hpp>
#include <xmodal/error.hpp>

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

using namespace xmodal;
using testing_support::TempDir;

namespace {

// Hand-rolled XMB1 writer, kept separate from save_bundle so the tests pin
// the byte layout rather than round-tripping the library against itself.
struct RawBundle {
  std::vector<char> bytes;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void block(std::uint32_t rows, std::uint32_t cols, float fill, std::optional<std::uint32_t> nan_row = {}) {
    u32(rows);
    u32(cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c)
        f32(nan_row && *nan_row == r && c == 0 ? std::numeric_limits<float>::quiet_NaN()
                                               : fill + static_cast<float>(r) + 0.25f * static_cast<float>(c));
  }
  void save(const std::filesystem::path& p) const {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
};

RawBundle raw_bundle(std::uint32_t n, std::uint32_t f, std::uint32_t d, std::uint32_t m,
                     std::uint32_t anchor_d, std::optional<std::uint32_t> nan_teacher_row = {}) {
  RawBundle b;
  b.bytes = {'X', 'M', 'B', '1'};
  b.u32(n);
  b.u32(f);
  b.u32(d);
  b.u32(m);
  b.u32(0);
  b.block(n, f, 1.0f);
  b.block(n, d, 1.0f, nan_teacher_row);
  b.block(m, anchor_d, 2.0f);
  for (std::uint32_t i = 0; i < n; ++i) b.str("img" + std::to_string(i));
  for (std::uint32_t j = 0; j < m; ++j) b.str("A photo of a {c" + std::to_string(j) + "}.");
  for (std::uint32_t j = 0; j < m; ++j) b.str("c" + std::to_string(j));
  return b;
}

DatasetBundle random_bundle(oracle::Gen& gen, std::size_t n, std::size_t f, std::size_t d, std::size_t m) {
  DatasetBundle b;
  b.inputs = round_to_float(gen.gaussian(n, f));
  b.teacher.data = round_to_float(gen.gaussian(n, d));
  for (std::size_t i = 0; i < n; ++i) b.teacher.ids.push_back("id" + std::to_string(i / 2));
  b.anchors.data = round_to_float(gen.gaussian(m, d));
  std::vector<std::int32_t> labels;
  for (std::size_t j = 0; j < m; ++j) {
    b.anchors.prompts.push_back("prompt " + std::to_string(j));
    b.anchors.class_names.push_back("class " + std::to_string(j));
  }
  for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<std::int32_t>(i % m));
  b.eval_labels = labels;
  b.teacher.labels = labels;
  return b;
}

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

TEST(LoadBundle, ShapesPassThrough) {
  TempDir dir;
  raw_bundle(4, 5, 3, 2, 3).save(dir / "b.xmb");
  const auto b = load_bundle(dir / "b.xmb");
  EXPECT_EQ(b.inputs.rows(), 4);
  EXPECT_EQ(b.inputs.cols(), 5);
  EXPECT_EQ(b.teacher.data.rows(), 4);
  EXPECT_EQ(b.teacher.data.cols(), 3);
  EXPECT_EQ(b.anchors.data.rows(), 2);
  EXPECT_EQ(b.anchors.data.cols(), 3);
  EXPECT_FALSE(b.teacher.normalized);
  EXPECT_EQ(b.teacher.data(2, 1), 3.25);
  EXPECT_EQ(b.anchors.prompts[1], "A photo of a {c1}.");
}

TEST(LoadBundle, AnchorWidthMismatch) {
  TempDir dir;
  raw_bundle(4, 5, 3, 2, 5).save(dir / "b.xmb");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "b.xmb"); }), ErrorCode::DimensionMismatch);
}

TEST(LoadBundle, NanNamesTheRow) {
  TempDir dir;
  raw_bundle(10, 4, 3, 2, 3, 7).save(dir / "b.xmb");
  try {
    load_bundle(dir / "b.xmb");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteValue);
    EXPECT_EQ(e.index(), std::optional<std::size_t>(7));
    EXPECT_NE(std::string(e.what()).find("NonFiniteValue(row=7)"), std::string::npos) << e.what();
  }
}

TEST(LoadBundle, RejectsBadMagicTruncationAndTrailingBytes) {
  TempDir dir;
  auto raw = raw_bundle(4, 2, 3, 2, 3);
  auto bad = raw;
  bad.bytes[3] = '2';
  bad.save(dir / "magic.xmb");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "magic.xmb"); }), ErrorCode::MalformedHeader);

  auto cut = raw;
  cut.bytes.resize(cut.bytes.size() - 3);
  cut.save(dir / "cut.xmb");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "cut.xmb"); }), ErrorCode::MalformedHeader);

  auto extra = raw;
  extra.bytes.push_back('\0');
  extra.save(dir / "extra.xmb");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "extra.xmb"); }), ErrorCode::MalformedHeader);

  EXPECT_EQ(code_of([&] { load_bundle(dir / "absent.xmb"); }), ErrorCode::MalformedHeader);
}

TEST(LoadBundle, DuplicatePromptsAfterWhitespaceNormalization) {
  TempDir dir;
  auto raw = raw_bundle(2, 2, 3, 2, 3);
  raw.save(dir / "b.xmb");
  testing_support::write_text(dir / "prompts.txt", "a  photo of x\n a photo of x \n");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "b.xmb", dir / "prompts.txt"); }), ErrorCode::InvalidConfig);
}

TEST(LoadBundle, PromptSidecarOverridesEmbeddedStrings) {
  TempDir dir;
  raw_bundle(2, 2, 3, 2, 3).save(dir / "b.xmb");
  testing_support::write_text(dir / "prompts.txt", "first prompt\r\nsecond prompt\n");
  const auto b = load_bundle(dir / "b.xmb", dir / "prompts.txt");
  EXPECT_EQ(b.anchors.prompts, (std::vector<std::string>{"first prompt", "second prompt"}));

  testing_support::write_text(dir / "short.txt", "only one\n");
  EXPECT_EQ(code_of([&] { load_bundle(dir / "b.xmb", dir / "short.txt"); }), ErrorCode::DimensionMismatch);
}

TEST(SaveBundle, RoundTripIsBitExact) {
  TempDir dir;
  oracle::Gen gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_bundle(gen, gen.index(1, 30), gen.index(1, 9), gen.index(2, 9), gen.index(2, 6));
    save_bundle(b, dir / "rt.xmb");
    const auto back = load_bundle(dir / "rt.xmb");
    EXPECT_TRUE(back == b);
    EXPECT_TRUE(identical(back.teacher.data, b.teacher.data));
  }
}

TEST(SaveBundle, RepeatedIdsHoldViews) {
  TempDir dir;
  oracle::Gen gen(3);
  auto b = random_bundle(gen, 6, 2, 3, 2);
  ASSERT_EQ(b.teacher.ids[0], b.teacher.ids[1]);
  save_bundle(b, dir / "views.xmb");
  EXPECT_EQ(load_bundle(dir / "views.xmb").teacher.ids, b.teacher.ids);
}

TEST(EmbeddingSet, ValidateCatchesBrokenInvariants) {
  EmbeddingSet s;
  s.ids = {"a", "b"};
  s.data = Matrix{{1.0, 0.0}, {0.0, 2.0}};
  s.validate();
  s.normalized = true;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::InvalidConfig);
  s.normalized = false;
  s.labels = std::vector<std::int32_t>{0, 3};
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(code_of([&] { s.validate(3); }), ErrorCode::InvalidConfig);
  s.labels.reset();
  s.ids.pop_back();
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::DimensionMismatch);
}

TEST(AnchorSet, NeedsTwoAnchors) {
  AnchorSet a;
  a.prompts = {"only"};
  a.class_names = {"only"};
  a.data = Matrix{{1.0, 0.0}};
  EXPECT_EQ(code_of([&] { a.validate(); }), ErrorCode::DimensionMismatch);
}

TEST(AnchorSet, ClassesInFirstAppearanceOrder) {
  AnchorSet a;
  a.prompts = {"p0", "p1", "p2", "p3"};
  a.class_names = {"dog", "cat", "dog", "eel"};
  a.data = Matrix::Identity(4, 4);
  EXPECT_EQ(a.classes(), (std::vector<std::string>{"dog", "cat", "eel"}));
  EXPECT_EQ(a.class_of_anchor(), (std::vector<std::size_t>{0, 1, 0, 2}));
}

TEST(L2Normalize, ThreeFourFive) {
  const Matrix out = l2_normalize(Matrix{{3.0, 4.0}});
  EXPECT_DOUBLE_EQ(out(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.8);
}

TEST(L2Normalize, UnitRowIsUnchanged) {
  const Matrix row{{1.0, 0.0, 0.0}};
  EXPECT_TRUE(identical(l2_normalize(row), row));
}

TEST(L2Normalize, RandomRowsHaveUnitNormByIndependentCheck) {
  oracle::Gen gen(5);
  const Matrix m = gen.gaussian(5, 8);
  const Matrix out = l2_normalize(m);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    EXPECT_NEAR(oracle::naive_norm(out.row(i)), 1.0, 1e-9);
  }
}

TEST(L2Normalize, IdempotentAndCosineIsDot) {
  oracle::Gen gen(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = gen.gaussian(4, 7);
    const Matrix once = l2_normalize(m);
    EXPECT_LE((l2_normalize(once) - once).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix other = gen.gaussian(4, 7);
    const Matrix other_unit = l2_normalize(other);
    for (Eigen::Index i = 0; i < 4; ++i) {
      const double cosine = m.row(i).dot(other.row(i)) / (oracle::naive_norm(m.row(i)) * oracle::naive_norm(other.row(i)));
      EXPECT_NEAR(once.row(i).dot(other_unit.row(i)), cosine, 1e-12);
    }
  }
}

TEST(L2Normalize, ZeroRowIsRejectedWithIndex) {
  try {
    l2_normalize(Matrix{{1.0, 1.0}, {0.0, 1e-13}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVector);
    EXPECT_EQ(e.index(), std::optional<std::size_t>(1));
  }
}

TEST(L2Normalize, SetFlagIsRaised) {
  EmbeddingSet s;
  s.ids = {"x"};
  s.data = Matrix{{0.0, 2.0}};
  const auto unit = l2_normalize(s);
  EXPECT_TRUE(unit.normalized);
  EXPECT_NO_THROW(unit.validate());
}

TEST(NormalizeWhitespace, CollapsesAndTrims) {
  EXPECT_EQ(normalize_whitespace("  a \t photo\nof  x "), "a photo of x");
  EXPECT_EQ(normalize_whitespace(""), "");
}
