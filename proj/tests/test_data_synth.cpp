#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "clan_forge/data_synth.hpp"

using namespace clan_forge;

TEST(Scene, DeterministicPerSeed) {
  const SceneSpec spec;
  EXPECT_EQ(generate_scene(spec, 42), generate_scene(spec, 42));
  EXPECT_NE(generate_scene(spec, 42), generate_scene(spec, 43));
}

TEST(Scene, ClassFrequenciesWithinTwentyPercent) {
  const SceneSpec spec;
  std::vector<double> counts(spec.num_classes, 0.0);
  const std::size_t n = 2000;
  for (std::size_t i = 0; i < n; ++i) {
    const LabelMap m = generate_scene(spec, derive_seed(99, streams::source_scenes, i));
    for (auto v : m.values) counts[v] += 1.0;
  }
  const double total = static_cast<double>(n * spec.height * spec.width);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const double f = counts[c] / total;
    EXPECT_NEAR(f, spec.class_frequency[c], 0.2 * spec.class_frequency[c]) << "class " << c;
  }
}

TEST(Scene, RareClassesAndValidation) {
  SceneSpec spec;
  EXPECT_EQ(spec.rare_classes(), (std::vector<std::size_t>{4}));
  spec.class_frequency = {0.5, 0.2, 0.2, 0.1, 0.0};
  EXPECT_NO_THROW(spec.validate());
  spec.class_frequency = {0.5, 0.2, 0.2, 0.2, 0.2};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Scene, UnreachableFrequencyWarns) {
  SceneSpec spec;
  spec.class_frequency = {0.9599, 0.02, 0.01, 0.01, 0.0001};
  spec.min_extent = 10;
  std::vector<std::string> warnings;
  generate_scene(spec, 1, &warnings);
  ASSERT_FALSE(warnings.empty());
  EXPECT_NE(warnings.back().find("class 4"), std::string::npos);
}

TEST(Scene, ShapeKindFollowsClass) {
  EXPECT_EQ(shape_kind(1), ShapeKind::stripe);
  EXPECT_EQ(shape_kind(4), ShapeKind::ring);
  EXPECT_EQ(shape_kind(5), ShapeKind::stripe);

  // Only class 1: every foreground pixel sits on a full-width or full-height stripe.
  SceneSpec spec;
  spec.class_frequency = {0.5, 0.5, 0.0, 0.0, 0.0};
  const LabelMap m = generate_scene(spec, 3);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (m.at(y, x) != 1) continue;
      bool row = true, col = true;
      for (std::size_t k = 0; k < m.width; ++k) row = row && m.at(y, k) == 1;
      for (std::size_t k = 0; k < m.height; ++k) col = col && m.at(k, x) == 1;
      EXPECT_TRUE(row || col) << y << "," << x;
    }
  }
}

TEST(Scene, RingHasAHole) {
  SceneSpec spec;
  spec.class_frequency = {0.5, 0.0, 0.0, 0.0, 0.5};
  spec.shape_count_min = spec.shape_count_max = 1;
  spec.min_extent = spec.max_extent = 12;
  const LabelMap m = generate_scene(spec, 8);
  const auto area = std::count(m.values.begin(), m.values.end(), 4);
  // disc of radius 6 covers ~113 pixels, the ring with radius-3 hole ~85
  EXPECT_GT(area, 60);
  EXPECT_LT(area, 100);
}

TEST(Render, ValuesClippedToUnitInterval) {
  const SceneSpec spec;
  const LabelMap m = generate_scene(spec, 5);
  DomainTransform t = default_target_transform(spec.num_classes);
  t.gain = 3.0;
  t.offset = -0.5;
  const Tensor img = render(m, t, 9);
  EXPECT_EQ(img.shape(), (Shape{3, 32, 32}));
  for (double v : img.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, SameLayoutDiffersAcrossDomains) {
  const SceneSpec spec;
  const LabelMap m = generate_scene(spec, 5);
  const Tensor s = render(m, default_source_transform(5), 9);
  const Tensor t = render(m, default_target_transform(5), 9);
  double diff = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) diff += std::abs(s[i] - t[i]);
  EXPECT_GT(diff / static_cast<double>(s.size()), 0.02);
}

TEST(Render, UnknownLabelRejected) {
  LabelMap m(2, 2, 9);
  EXPECT_THROW(render(m, default_source_transform(5), 1), std::out_of_range);
}

TEST(Dataset, TargetLabelsAreEvalOnlyAndDomainsDiffer) {
  DataConfig dc;
  dc.source_train = dc.target_train = 4;
  dc.source_eval = dc.target_eval = 2;
  const DataBundle b = make_bundle(dc);
  EXPECT_FALSE(b.source_train.eval_only);
  EXPECT_TRUE(b.target_train.eval_only);
  EXPECT_NE(b.source_train.items[0].labels, b.target_train.items[0].labels);
  EXPECT_NE(b.source_train.items[0].labels, b.source_eval.items[0].labels);
  EXPECT_THROW(make_dataset(0, Domain::source, dc.scene, dc.source, 1), std::invalid_argument);
}

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Dataset, SaveLoadRoundTripAndByteDeterminism) {
  DataConfig dc;
  dc.source_train = dc.target_train = 3;
  dc.source_eval = dc.target_eval = 2;
  const auto base = std::filesystem::temp_directory_path() / "clan_forge_data_test";
  std::filesystem::remove_all(base);
  save_bundle(make_bundle(dc), base / "a");
  save_bundle(make_bundle(dc), base / "b");
  for (const char* f : {"manifest.json", "source_train.images.f64", "target_eval.labels.u8"}) {
    EXPECT_EQ(slurp(base / "a" / f), slurp(base / "b" / f)) << f;
  }
  const DataBundle r = load_bundle(base / "a");
  const DataBundle o = make_bundle(dc);
  EXPECT_EQ(r.config_hash, o.config_hash);
  EXPECT_EQ(r.target_train.items[2].image, o.target_train.items[2].image);
  EXPECT_EQ(r.source_eval.items[1].labels, o.source_eval.items[1].labels);
  EXPECT_THROW(load_bundle(base / "missing"), std::runtime_error);
  std::filesystem::remove_all(base);
}
