#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gscd/serialize.hpp"
#include "gscd/synth.hpp"

using namespace gscd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gscd_synth_test_" + name);
  fs::remove_all(p);
  return p;
}

void expect_same(const Dataset& a, const Dataset& b) {
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].t1.to_vector(), b.samples[i].t1.to_vector());
    EXPECT_EQ(a.samples[i].t2.to_vector(), b.samples[i].t2.to_vector());
    EXPECT_EQ(a.samples[i].y1, b.samples[i].y1);
    EXPECT_EQ(a.samples[i].y2, b.samples[i].y2);
    EXPECT_EQ(a.samples[i].cd, b.samples[i].cd);
  }
}

}  // namespace

TEST(Synth, NoShapesNoNoiseMeansNoChange) {
  SceneSpec s;
  s.n_shapes = 0;
  s.noise_std = 0.0;
  const auto d = generate(s, 3);
  for (const auto& x : d.samples) {
    EXPECT_EQ(x.t1.to_vector(), x.t2.to_vector());
    for (int c : x.cd) EXPECT_EQ(c, 0);
  }
}

TEST(Synth, DeterministicPerSeed) {
  SceneSpec s;
  s.seed = 42;
  expect_same(generate(s, 4), generate(s, 4));
  s.seed = 43;
  EXPECT_NE(generate(s, 1).samples[0].y1, generate(SceneSpec{.seed = 42}, 1).samples[0].y1);
}

TEST(Synth, LabelsConsistentAndImagesInRange) {
  SceneSpec s;
  s.seed = 7;
  s.noise_std = 0.2;
  for (const auto& x : generate(s, 10).samples) {
    for (std::size_t p = 0; p < x.cd.size(); ++p) {
      EXPECT_EQ(x.cd[p], x.y1[p] != x.y2[p] ? 1 : 0);
      EXPECT_GE(x.y1[p], 0);
      EXPECT_LT(x.y1[p], 4);
    }
    for (double v : x.t1.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synth, ChangeFractionNearTarget) {
  for (double target : {0.15, 0.3, 0.45}) {
    SceneSpec s;
    s.change_fraction = target;
    s.seed = 1000;
    const auto d = generate(s, 20);
    for (const auto& x : d.samples) {
      double changed = 0.0;
      for (int c : x.cd) changed += c;
      EXPECT_NEAR(changed / static_cast<double>(x.cd.size()), target, 0.1);
    }
    EXPECT_TRUE(d.warnings.empty());
  }
}

TEST(Synth, InfeasibleTargetWarns) {
  SceneSpec s;
  s.n_shapes = 1;
  s.change_fraction = 0.99;
  const auto d = generate(s, 2);
  EXPECT_FALSE(d.warnings.empty());
}

TEST(Synth, HistogramCoversAllClasses) {
  SceneSpec s;
  s.n_classes = 5;
  std::set<int> seen;
  for (const auto& x : generate(s, 20).samples) seen.insert(x.y1.begin(), x.y1.end());
  EXPECT_EQ(seen.size(), 5u);
}

TEST(Synth, LabelBoundariesOnCellGrid) {
  SceneSpec s;
  s.seed = 3;
  const auto x = generate(s, 1).samples[0];
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t c = 0; c < s.width; ++c)
      EXPECT_EQ(x.y1[y * s.width + c], x.y1[(y / kCellSize * kCellSize) * s.width + c / kCellSize * kCellSize]);
}

TEST(Synth, InvalidSpecs) {
  EXPECT_THROW(generate(SceneSpec{.height = 48}, 1), ConfigError);
  EXPECT_THROW(generate(SceneSpec{.n_classes = 1}, 1), ConfigError);
  EXPECT_THROW(generate(SceneSpec{.change_fraction = 1.0}, 1), ConfigError);
}

TEST(Dataset, RoundTripBitExact) {
  const auto dir = scratch("roundtrip");
  SceneSpec s;
  s.seed = 9;
  s.height = s.width = 32;
  const auto d = generate(s, 3, 5);
  save_dataset(dir, d);
  EXPECT_TRUE(fs::exists(dir / "0002.cd.gtnsr"));
  const auto back = load_dataset(dir);
  expect_same(d, back);
  EXPECT_EQ(back.first_index, 5u);
  EXPECT_EQ(back.spec.seed, 9u);
  EXPECT_EQ(back.spec.height, 32u);
  fs::remove_all(dir);
}

TEST(Dataset, MissingFileAndCorruptMagic) {
  const auto dir = scratch("broken");
  SceneSpec s;
  s.height = s.width = 32;
  save_dataset(dir, generate(s, 2));
  fs::remove(dir / "0001.y2.gtnsr");
  EXPECT_THROW(load_dataset(dir), IoError);
  save_dataset(dir, generate(s, 2));
  {
    std::fstream f(dir / "0000.t1.gtnsr", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(load_dataset(dir), FormatError);
  EXPECT_THROW(load_dataset(dir / "nope"), IoError);
  fs::remove_all(dir);
}

TEST(Batch, StacksSamplesInOrder) {
  SceneSpec s;
  s.height = s.width = 32;
  const auto d = generate(s, 3);
  const auto b = make_batch(d, {2, 0});
  EXPECT_EQ(b.img1.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.img1[0], d.samples[2].t1[0]);
  EXPECT_EQ(std::vector<int>(b.y2.begin() + 1024, b.y2.end()), d.samples[0].y2);
}

TEST(Serialize, TensorAndArchiveRoundTrip) {
  const auto dir = scratch("archive");
  fs::create_directories(dir);
  const auto t = Tensor::from({2, 3}, {1.5, -2.0, 1e-300, 3.0, 0.0, -0.0});
  save_tensor(dir / "t.gtnsr", t);
  EXPECT_EQ(load_tensor(dir / "t.gtnsr").to_vector(), t.to_vector());
  save_archive(dir / "a.gckpt", {{"x", t}, {"y", Tensor::scalar(4.0)}});
  const auto a = load_archive(dir / "a.gckpt");
  EXPECT_EQ(archive_get(a, "y").item(), 4.0);
  EXPECT_EQ(archive_get(a, "x").shape(), t.shape());
  EXPECT_THROW(archive_get(a, "z"), FormatError);
  {
    std::ofstream f(dir / "short.gtnsr", std::ios::binary);
    f.write("GTNSR1", 6);
  }
  EXPECT_THROW(load_tensor(dir / "short.gtnsr"), FormatError);
  fs::remove_all(dir);
}
