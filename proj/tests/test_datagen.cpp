#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "tdsa/datagen.hpp"
#include "tdsa/ops.hpp"

namespace tdsa {
namespace {

namespace fs = std::filesystem;

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.image_size = 32;
  s.train_per_class = 4;
  s.test_per_class = 2;
  s.seed = 11;
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

TEST(SyntheticTest, ZeroNoisePartMatchesCanonicalTexture) {
  SyntheticSpec spec = small_spec();
  spec.noise = 0;
  for (std::size_t t = 0; t < spec.local_vocab; ++t) {
    auto r = synth::render(spec, 1, t, 99);
    const std::size_t s = spec.image_size, plane = s * s, p = spec.patch_size();
    for (const Mask& part : r.parts) {
      std::size_t y0 = s, x0 = s;
      for (std::size_t i = 0; i < plane; ++i) {
        if (part[i]) {
          y0 = std::min(y0, i / s);
          x0 = std::min(x0, i % s);
        }
      }
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) {
          const auto c = synth::texture_color(t, spec.local_vocab, y, x);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            EXPECT_EQ(r.rgb[ch * plane + (y0 + y) * s + x0 + x], to_u8(c[ch]) / 255.0f);
          }
        }
    }
  }
}

TEST(SyntheticTest, SharedArrangementDiffersOnlyInsideParts) {
  SyntheticSpec spec = small_spec();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto a = synth::render(spec, 2, 0, seed);
    auto b = synth::render(spec, 2, 1, seed);
    const std::size_t plane = spec.image_size * spec.image_size;
    ASSERT_EQ(a.region, b.region);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < 3 * plane; ++i) {
      if (a.rgb[i] == b.rgb[i]) continue;
      ++differing;
      const std::size_t p = i % plane;
      EXPECT_TRUE(a.parts[0][p] || a.parts[1][p]) << "pixel " << p;
    }
    EXPECT_GT(differing, 0u);
  }
}

TEST(SyntheticTest, PartsLieStrictlyInsideRegion) {
  SyntheticSpec spec = small_spec();
  auto d = generate_split(spec, 5, 0);
  const std::size_t s = spec.image_size;
  for (std::size_t i = 0; i < d.size(); ++i) {
    ASSERT_EQ(d.parts[i].size(), 2u);
    for (const Mask& part : d.parts[i])
      for (std::size_t p = 0; p < part.size(); ++p) {
        if (!part[p]) continue;
        const std::size_t y = p / s, x = p % s;
        // Every 4-neighbour of a part pixel is still inside the region.
        EXPECT_TRUE(d.region[i][p]);
        EXPECT_TRUE(d.region[i][(y - 1) * s + x] && d.region[i][(y + 1) * s + x]);
        EXPECT_TRUE(d.region[i][y * s + x - 1] && d.region[i][y * s + x + 1]);
      }
  }
}

TEST(SyntheticTest, ClassBalancedAndDeterministic) {
  SyntheticSpec spec = small_spec();
  auto a = generate(spec);
  auto b = generate(spec);
  EXPECT_EQ(a.train.size(), 4u * 8);
  EXPECT_EQ(a.test.size(), 2u * 8);
  std::vector<std::size_t> counts(8, 0);
  for (int y : a.train.labels) ++counts[static_cast<std::size_t>(y)];
  EXPECT_EQ(counts, std::vector<std::size_t>(8, 4));
  EXPECT_EQ(a.train.images.data(), b.train.images.data());
  EXPECT_EQ(a.test.region, b.test.region);
  for (float v : a.train.images.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  spec.seed = 12;
  EXPECT_NE(generate(spec).train.images.data(), a.train.images.data());
}

TEST(SyntheticTest, SpecValidation) {
  SyntheticSpec spec = small_spec();
  spec.num_classes = 9;
  EXPECT_THROW(spec.validate(), ContractError);  // > 4 x 2 combinations
  spec = small_spec();
  spec.local_vocab = 1;
  EXPECT_THROW(spec.validate(), ContractError);
  spec = small_spec();
  spec.num_classes = 7;
  EXPECT_THROW(spec.validate(), ContractError);  // last arrangement would be unshared
  spec = small_spec();
  spec.num_classes = 6;
  EXPECT_NO_THROW(spec.validate());
}

using Features = std::vector<std::vector<double>>;

// Softmax regression on fixed features (full-batch gradient descent, features
// standardized with training statistics); returns held-out accuracy.
double probe_accuracy(Features train, const std::vector<int>& train_y, Features test, const std::vector<int>& test_y,
                      std::size_t classes) {
  const std::size_t f = train[0].size();
  for (std::size_t k = 0; k < f; ++k) {
    double m = 0, v = 0;
    for (const auto& row : train) m += row[k];
    m /= static_cast<double>(train.size());
    for (const auto& row : train) v += (row[k] - m) * (row[k] - m);
    const double sd = std::sqrt(v / static_cast<double>(train.size())) + 1e-9;
    for (Features* set : {&train, &test})
      for (auto& row : *set) row[k] = (row[k] - m) / sd;
  }
  std::vector<double> w(classes * (f + 1), 0.0);
  auto scores = [&](const std::vector<double>& row) {
    std::vector<double> z(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      z[c] = w[c * (f + 1) + f];
      for (std::size_t k = 0; k < f; ++k) z[c] += w[c * (f + 1) + k] * row[k];
    }
    return z;
  };
  const double n = static_cast<double>(train.size());
  for (int it = 0; it < 300; ++it) {
    std::vector<double> grad(w.size(), 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      auto z = scores(train[i]);
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0;
      for (double& v : z) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < classes; ++c) {
        const double d = z[c] / sum - (static_cast<int>(c) == train_y[i] ? 1.0 : 0.0);
        for (std::size_t k = 0; k < f; ++k) grad[c * (f + 1) + k] += d * train[i][k] / n;
        grad[c * (f + 1) + f] += d / n;
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= 0.5 * grad[j];
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto z = scores(test[i]);
    hit += static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) == test_y[i];
  }
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

// 4x4 cell averages per channel, and plain per-channel means.
std::pair<Features, Features> probe_features(const Dataset& d) {
  const std::size_t s = d.height, cell = s / 4;
  Features spatial, gap;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<double> fs(48, 0.0), fg(3, 0.0);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double v = d.images.at(i, ch, y, x);
          fs[ch * 16 + (y / cell) * 4 + x / cell] += v / static_cast<double>(cell * cell);
          fg[ch] += v / static_cast<double>(s * s);
        }
    spatial.push_back(fs);
    gap.push_back(fg);
  }
  return {spatial, gap};
}

// With the local patches ablated (mean texture), a linear probe on coarse
// spatial averages can find the global arrangement but not the class: held-out
// accuracy stays near 1/L = 0.5. A GAP probe sees almost nothing.
TEST(SyntheticTest, GlobalCuesAloneAreNotEnough) {
  SyntheticSpec spec = small_spec();
  const Dataset train = generate_split(spec, 60, 0, /*ablate=*/true);
  const Dataset test = generate_split(spec, 30, 1, /*ablate=*/true);
  auto [train_sp, train_gap] = probe_features(train);
  auto [test_sp, test_gap] = probe_features(test);
  EXPECT_LE(probe_accuracy(train_sp, train.labels, test_sp, test.labels, 8), 0.5 + 0.05);
  EXPECT_LE(probe_accuracy(train_gap, train.labels, test_gap, test.labels, 8), 0.25);
  // The same probe does separate the arrangements themselves.
  auto arrangement = [](const std::vector<int>& y) {
    std::vector<int> a;
    for (int v : y) a.push_back(v / 2);
    return a;
  };
  EXPECT_GE(probe_accuracy(train_sp, arrangement(train.labels), test_sp, arrangement(test.labels), 4), 0.9);
}

TEST(NetPbmTest, RoundTripAndErrors) {
  const fs::path dir = fresh_dir("tdsa_test_pnm");
  fs::create_directories(dir);
  PnmImage img{3, 2, 3, {}};
  for (int i = 0; i < 18; ++i) img.data.push_back(static_cast<std::uint8_t>(i * 13));
  write_pnm(dir / "a.ppm", img);
  PnmImage back = read_pnm(dir / "a.ppm");
  EXPECT_EQ(back.channels, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.data, img.data);
  std::ofstream(dir / "comment.pgm", std::ios::binary) << "P5\n# made by hand\n2 1\n255\n\x10\x20";
  PnmImage g = read_pnm(dir / "comment.pgm");
  EXPECT_EQ(g.data, (std::vector<std::uint8_t>{0x10, 0x20}));
  std::ofstream(dir / "bad.ppm", std::ios::binary) << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(read_pnm(dir / "bad.ppm"), IoError);
  std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n2 2\n255\nabc";
  EXPECT_THROW(read_pnm(dir / "short.ppm"), IoError);
  fs::remove_all(dir);
}

TEST(LoadDirTest, SaveThenLoadRoundTrip) {
  SyntheticSpec spec = small_spec();
  auto d = generate_split(spec, 2, 1);
  const fs::path root = fresh_dir("tdsa_test_loaddir");
  save_split(root, "test", d);
  EXPECT_TRUE(fs::exists(root / "test" / "class_03" / "000003.ppm"));
  EXPECT_TRUE(fs::exists(root / "test" / "class_03" / "000003.region.pgm"));
  EXPECT_TRUE(fs::exists(root / "test" / "class_03" / "000003.part1.pgm"));
  Dataset l = load_dir(root / "test", 32, 32);
  ASSERT_EQ(l.size(), d.size());
  EXPECT_EQ(l.class_names, d.class_names);
  ASSERT_TRUE(l.has_regions());
  // Files are read class by class; match samples by label then order.
  std::vector<std::size_t> order;
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.labels[i] == static_cast<int>(c)) order.push_back(i);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    EXPECT_EQ(l.labels[k], d.labels[i]);
    EXPECT_EQ(l.region[k], d.region[i]);
    EXPECT_EQ(l.parts[k], d.parts[i]);
    for (std::size_t p = 0; p < 3 * 32 * 32; ++p) {
      ASSERT_EQ(l.images.data()[k * 3 * 32 * 32 + p], d.images.data()[i * 3 * 32 * 32 + p]);
    }
  }
  Dataset again = load_dir(root / "test", 32, 32);
  EXPECT_EQ(again.labels, l.labels);
  Dataset small = load_dir(root / "test", 16, 16);
  EXPECT_EQ(small.images.shape(), (Shape{16, 3, 16, 16}));
  fs::remove_all(root);
}

TEST(LoadDirTest, TwoDirsThreeImages) {
  const fs::path root = fresh_dir("tdsa_test_loaddir_small");
  for (const char* cls : {"b_second", "a_first"}) {
    fs::create_directories(root / cls);
    for (int i = 0; i < 3; ++i) {
      write_pnm(root / cls / ("img" + std::to_string(i) + ".ppm"), PnmImage{3, 4, 4, std::vector<std::uint8_t>(48, 7)});
    }
  }
  Dataset d = load_dir(root, 4, 4);
  EXPECT_EQ(d.size(), 6u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"a_first", "b_second"}));
  EXPECT_FALSE(d.has_regions());
  fs::remove_all(root);
}

TEST(LoadDirTest, ErrorsNameOffendingPaths) {
  const fs::path root = fresh_dir("tdsa_test_loaddir_bad");
  fs::create_directories(root / "empty_class");
  fs::create_directories(root / "ok");
  write_pnm(root / "ok" / "x.ppm", PnmImage{3, 2, 2, std::vector<std::uint8_t>(12, 1)});
  std::ofstream(root / "ok" / "broken.ppm") << "not an image";
  try {
    load_dir(root, 2, 2);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("empty_class"), std::string::npos) << msg;
    EXPECT_NE(msg.find("broken.ppm"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_dir(root / "missing", 2, 2), IoError);
  fs::remove_all(root);
}

}  // namespace
}  // namespace tdsa
