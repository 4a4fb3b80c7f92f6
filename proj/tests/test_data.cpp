#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mast/data.hpp"

using namespace mast;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mast_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Hue of the mean color over strongly chromatic pixels, binned into 8.
std::size_t hue_stump(const Image& img) {
  double r = 0, g = 0, b = 0;
  int count = 0;
  for (std::size_t i = 0; i < img.plane(); ++i) {
    const double pr = img.channel(0)[i], pg = img.channel(1)[i], pb = img.channel(2)[i];
    if (std::max({pr, pg, pb}) - std::min({pr, pg, pb}) < 0.3) continue;
    r += pr, g += pg, b += pb, ++count;
  }
  if (count == 0) return 99;
  r /= count, g /= count, b /= count;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  double h = 0;
  if (mx == r) h = std::fmod((g - b) / d + 6.0, 6.0);
  else if (mx == g) h = 2.0 + (b - r) / d;
  else h = 4.0 + (r - g) / d;
  return static_cast<std::size_t>(std::floor(h / 6.0 * 8.0)) % 8;
}

}  // namespace

TEST(Data, GenerationIsSeedDeterministicByteForByte) {
  auto dir = temp_dir("determinism");
  SyntheticSpec spec{64, 16, Factor::hue};
  write_dataset(generate(spec, 5), dir / "a.bin", DatasetFormat::packed);
  write_dataset(generate(spec, 5), dir / "b.bin", DatasetFormat::packed);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  write_dataset(generate(spec, 6), dir / "c.bin", DatasetFormat::packed);
  EXPECT_NE(slurp(dir / "a.bin"), slurp(dir / "c.bin"));
}

TEST(Data, HueLabelsAreBalanced) {
  auto ds = generate({800, 16, Factor::hue}, 1);
  std::array<int, 8> counts{};
  for (const auto& s : ds.samples) ++counts.at(s.label);
  for (int c : counts) EXPECT_NEAR(c, 100, 1);
  auto shapes = generate({10, 16, Factor::shape}, 1);
  std::array<int, 4> sc{};
  for (const auto& s : shapes.samples) ++sc.at(s.label);
  for (int c : sc) EXPECT_NEAR(c, 2.5, 1);
}

TEST(Data, HueRecoverableFromPixelStatistics) {
  auto ds = generate({400, 32, Factor::hue}, 2);
  int correct = 0;
  for (const auto& s : ds.samples) correct += hue_stump(s.image) == s.factors[1];
  EXPECT_GE(correct, 380);
}

TEST(Data, LabelMatchesItsFactorAndPixelsInRange) {
  auto ds = generate({100, 16, Factor::scale}, 3);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.label, s.factors[2]);
    for (float v : s.image.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Data, TooFewSamplesIsContractError) {
  EXPECT_THROW(generate({5, 16, Factor::hue}, 1), ContractError);
}

TEST(Data, PackedRoundTripMatchesMemory) {
  auto dir = temp_dir("packed");
  auto ds = generate({40, 16, Factor::shape}, 9);
  auto m = write_dataset(ds, dir / "ds.bin", DatasetFormat::packed);
  EXPECT_EQ(m.count(), 40u);
  auto back = load(dir / "ds.bin");
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.label_factor, Factor::shape);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, ds.samples[i].image);
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].factors, ds.samples[i].factors);
  }
}

TEST(Data, PpmDirectoryRoundTripMatchesMemory) {
  auto dir = temp_dir("ppm");
  auto ds = generate({12, 16, Factor::position}, 4);
  write_dataset(ds, dir / "set", DatasetFormat::ppm_dir);
  EXPECT_TRUE(fs::exists(dir / "set" / "manifest.json"));
  auto back = load(dir / "set");
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, ds.samples[i].image);
    EXPECT_EQ(back.samples[i].factors, ds.samples[i].factors);
  }
}

TEST(Data, ShuffleOrderIsStableForASeed) {
  auto dir = temp_dir("shuffle");
  write_dataset(generate({30, 8, Factor::hue}, 1), dir / "ds.bin", DatasetFormat::packed);
  auto order = [&](std::uint64_t seed) {
    std::vector<std::uint16_t> labels;
    std::vector<std::array<std::uint8_t, 4>> factors;
    DatasetReader r(dir / "ds.bin", seed);
    while (auto s = r.next()) factors.push_back(s->factors);
    return factors;
  };
  EXPECT_EQ(order(7), order(7));
  EXPECT_NE(order(7), order(8));
}

TEST(Data, TruncatedBlobNamesTheRecord) {
  auto dir = temp_dir("truncated");
  write_dataset(generate({10, 8, Factor::hue}, 1), dir / "ds.bin", DatasetFormat::packed);
  const auto full = fs::file_size(dir / "ds.bin");
  fs::resize_file(dir / "ds.bin", full - 10);
  try {
    DatasetReader r(dir / "ds.bin");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 9"), std::string::npos) << e.what();
  }
}

TEST(Data, CorruptFactorCodeNamesTheRecord) {
  auto dir = temp_dir("corrupt");
  write_dataset(generate({10, 8, Factor::hue}, 1), dir / "ds.bin", DatasetFormat::packed);
  {
    std::fstream f(dir / "ds.bin", std::ios::in | std::ios::out | std::ios::binary);
    const std::size_t rec = 3 * 8 * 8 + 2 + 4;
    f.seekp(15 + 3 * rec + 3 * 8 * 8 + 2);  // shape code of record 3
    f.put(static_cast<char>(42));
  }
  try {
    load(dir / "ds.bin");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos) << e.what();
  }
}

TEST(Data, BadMagicIsRejected) {
  auto dir = temp_dir("magic");
  std::ofstream(dir / "junk.bin") << "NOTADATASET....";
  EXPECT_THROW(load(dir / "junk.bin"), DataError);
}

TEST(Data, SplitHoldsOutEveryFifth) {
  auto ds = generate({50, 8, Factor::hue}, 1);
  auto [train, test] = split(ds, 5);
  EXPECT_EQ(train.size(), 40u);
  EXPECT_EQ(test.size(), 10u);
  EXPECT_EQ(test.samples[0].image, ds.samples[4].image);
}
