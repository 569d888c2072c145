#ifndef TDSA_DATAGEN_HPP_
#define TDSA_DATAGEN_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/error.hpp"
#include "tdsa/resample.hpp"
#include "tdsa/tensor.hpp"

namespace tdsa {

using Mask = std::vector<std::uint8_t>;  // h*w, 0 or 1

// Labeled image set. Images are N x 3 x h x w in [0, 1]; regions/parts are
// empty when the source carries no ground truth.
struct Dataset {
  std::size_t height = 0, width = 0;
  std::vector<std::string> class_names;
  Tensor4<float> images;
  std::vector<int> labels;
  std::vector<Mask> region;
  std::vector<std::vector<Mask>> parts;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  bool has_regions() const { return !region.empty(); }

  Tensor4<float> gather(std::span<const std::size_t> idx) const {
    const std::size_t per = 3 * height * width;
    Tensor4<float> out(Shape{idx.size(), 3, height, width});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[k] * per), per,
                  out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
    }
    return out;
  }
  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// NetPBM (binary P5 grayscale / P6 RGB, maxval <= 255).

struct PnmImage {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> data;  // interleaved rows
};

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("write_pnm: channels must be 1 or 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string() + ": cannot open");
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  const std::string magic = token();
  PnmImage img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw IoError(path.string() + ": not a binary PPM/PGM (magic '" + magic + "')");
  }
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval == 0 || maxval > 255) throw IoError(path.string() + ": unsupported maxval " + std::to_string(maxval));
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed header");
  }
  if (img.width == 0 || img.height == 0) throw IoError(path.string() + ": empty image");
  img.data.resize(img.channels * img.width * img.height);
  if (!is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  return img;
}

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained benchmark.
//
// Class c = (arrangement c / L, texture c % L). An arrangement places two
// rectangular global parts in two of the four image quadrants (with jitter);
// the class texture is stamped as a small oriented-stripe patch strictly
// inside each global part. Decoy patches with random textures sit in the
// background, so texture alone does not identify the class: only the patches
// inside the global parts do.

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t image_size = 64;
  std::size_t global_vocab = 4;
  std::size_t local_vocab = 2;
  double noise = 0.08;
  double contrast = 1.0;  // texture amplitude relative to the canonical hi/lo colors
  std::size_t decoys = 2;
  std::uint64_t seed = 0;

  std::size_t patch_size() const { return std::max<std::size_t>(3, image_size / 8); }
  std::size_t part_size() const { return image_size * 3 / 8; }

  void validate() const {
    if (global_vocab < 2 || local_vocab < 2) throw ContractError("SyntheticSpec: vocabulary sizes must be >= 2");
    if (global_vocab > 6) throw ContractError("SyntheticSpec: at most 6 global arrangements (quadrant pairs)");
    if (num_classes < 2) throw ContractError("SyntheticSpec: need at least two classes");
    if (num_classes > global_vocab * local_vocab) {
      throw ContractError("SyntheticSpec: " + std::to_string(num_classes) + " classes exceed " +
                          std::to_string(global_vocab) + " x " + std::to_string(local_vocab) + " combinations");
    }
    if (num_classes % local_vocab == 1) {
      throw ContractError("SyntheticSpec: every global arrangement must be shared by at least two classes");
    }
    if (image_size < 16) throw ContractError("SyntheticSpec: image_size must be >= 16");
    if (!(noise >= 0.0)) throw ContractError("SyntheticSpec: noise must be >= 0");
    if (!(contrast > 0.0 && contrast <= 1.0)) throw ContractError("SyntheticSpec: contrast must be in (0, 1]");
  }
};

namespace synth {

inline constexpr std::array<float, 3> kBackground{0.50f, 0.50f, 0.50f};
inline constexpr std::array<float, 3> kPartColor{0.28f, 0.35f, 0.62f};
inline constexpr std::array<float, 3> kTextureHi{0.86f, 0.75f, 0.27f};
inline constexpr std::array<float, 3> kTextureLo{0.16f, 0.16f, 0.16f};

// Quadrant pairs: {TL,BR}, {TR,BL}, {TL,TR}, {BL,BR}, {TL,BL}, {TR,BR}.
inline constexpr std::array<std::array<int, 2>, 6> kArrangements{
    {{0, 3}, {1, 2}, {0, 1}, {2, 3}, {0, 2}, {1, 3}}};

struct Rect {
  std::size_t y0, x0, h, w;
  bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; }
  bool overlaps(const Rect& o) const {
    return y0 < o.y0 + o.h && o.y0 < y0 + h && x0 < o.x0 + o.w && o.x0 < x0 + w;
  }
};

// Canonical texture value (1 = hi, 0 = lo) of texture t at patch offset (y, x).
inline bool texture_bit(std::size_t t, std::size_t vocab, std::size_t y, std::size_t x) {
  const double theta = 3.14159265358979323846 * static_cast<double>(t) / static_cast<double>(vocab);
  const double phase = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
  return std::cos(3.14159265358979323846 * phase) >= 0.0;
}

inline std::array<float, 3> texture_mean() {
  std::array<float, 3> m{};
  for (std::size_t ch = 0; ch < 3; ++ch) m[ch] = 0.5f * (kTextureHi[ch] + kTextureLo[ch]);
  return m;
}

inline std::array<float, 3> texture_color(std::size_t t, std::size_t vocab, std::size_t y, std::size_t x,
                                          double contrast = 1.0) {
  const std::array<float, 3> m = texture_mean();
  const std::array<float, 3>& e = texture_bit(t, vocab, y, x) ? kTextureHi : kTextureLo;
  std::array<float, 3> c{};
  for (std::size_t ch = 0; ch < 3; ++ch) c[ch] = m[ch] + static_cast<float>(contrast) * (e[ch] - m[ch]);
  return c;
}

struct Rendered {
  std::vector<float> rgb;  // 3 x h x w planar, quantized to 8-bit levels
  Mask region;
  std::vector<Mask> parts;
};

inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint64_t, 1> out{};
  std::array<std::uint32_t, 2> raw{};
  seq.generate(raw.begin(), raw.end());
  out[0] = (std::uint64_t(raw[0]) << 32) | raw[1];
  return out[0];
}

// Draws from `rng` never depend on `texture`, so two renders with the same
// seed and arrangement differ only inside the part masks. When `ablate` is
// set, part patches are filled with the mean texture color instead.
inline Rendered render(const SyntheticSpec& spec, std::size_t arrangement, std::size_t texture, std::uint64_t seed,
                       bool ablate = false) {
  const std::size_t s = spec.image_size, p = spec.patch_size(), ps = spec.part_size();
  const std::size_t plane = s * s;
  std::mt19937_64 rng(seed);
  Rendered r;
  r.rgb.assign(3 * plane, 0.0f);
  r.region.assign(plane, 0);
  auto put = [&](std::size_t y, std::size_t x, const std::array<float, 3>& c) {
    for (std::size_t ch = 0; ch < 3; ++ch) r.rgb[ch * plane + y * s + x] = c[ch];
  };
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) put(y, x, kBackground);

  const std::size_t jitter = s / 16;
  std::uniform_int_distribution<std::size_t> jit(0, 2 * jitter);
  std::vector<Rect> parts_rect;
  for (int q : kArrangements[arrangement]) {
    const std::size_t cy = (q / 2) * (s / 2) + s / 4, cx = (q % 2) * (s / 2) + s / 4;
    const std::size_t y0 = cy - ps / 2 - jitter + jit(rng);
    const std::size_t x0 = cx - ps / 2 - jitter + jit(rng);
    parts_rect.push_back({y0, x0, ps, ps});
  }
  for (const Rect& g : parts_rect) {
    for (std::size_t y = g.y0; y < g.y0 + g.h; ++y)
      for (std::size_t x = g.x0; x < g.x0 + g.w; ++x) {
        put(y, x, kPartColor);
        r.region[y * s + x] = 1;
      }
  }
  // One local patch strictly inside each global part.
  for (const Rect& g : parts_rect) {
    std::uniform_int_distribution<std::size_t> py(g.y0 + 1, g.y0 + g.h - 1 - p);
    std::uniform_int_distribution<std::size_t> px(g.x0 + 1, g.x0 + g.w - 1 - p);
    const Rect patch{py(rng), px(rng), p, p};
    Mask m(plane, 0);
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x) {
        const auto c = ablate ? texture_mean() : texture_color(texture, spec.local_vocab, y, x, spec.contrast);
        put(patch.y0 + y, patch.x0 + x, c);
        m[(patch.y0 + y) * s + patch.x0 + x] = 1;
      }
    r.parts.push_back(std::move(m));
  }
  // Decoys: random textures in the background, clear of the global parts.
  std::uniform_int_distribution<std::size_t> pos(0, s - p);
  std::uniform_int_distribution<std::size_t> tex(0, spec.local_vocab - 1);
  for (std::size_t d = 0; d < spec.decoys; ++d) {
    const std::size_t t = tex(rng);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const Rect cand{pos(rng), pos(rng), p, p};
      const Rect grown{cand.y0 > 0 ? cand.y0 - 1 : 0, cand.x0 > 0 ? cand.x0 - 1 : 0, p + 2, p + 2};
      if (std::any_of(parts_rect.begin(), parts_rect.end(), [&](const Rect& g) { return g.overlaps(grown); })) {
        continue;
      }
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) put(cand.y0 + y, cand.x0 + x, texture_color(t, spec.local_vocab, y, x, spec.contrast));
      break;
    }
  }
  if (spec.noise > 0) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(spec.noise));
    for (float& v : r.rgb) v += n(rng);
  }
  for (float& v : r.rgb) v = static_cast<float>(to_u8(v)) / 255.0f;
  return r;
}

inline std::string class_name(std::size_t c, std::size_t num_classes) {
  std::ostringstream os;
  const int digits = std::max(2, static_cast<int>(std::to_string(num_classes - 1).size()));
  os << "class_" << std::setw(digits) << std::setfill('0') << c;
  return os.str();
}

}  // namespace synth

struct SyntheticData {
  Dataset train;
  Dataset test;
};

// Class-balanced split: sample i of a split has label i % S.
inline Dataset generate_split(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t split,
                              bool ablate = false) {
  spec.validate();
  const std::size_t s = spec.image_size;
  Dataset d;
  d.height = d.width = s;
  for (std::size_t c = 0; c < spec.num_classes; ++c) d.class_names.push_back(synth::class_name(c, spec.num_classes));
  const std::size_t n = per_class * spec.num_classes;
  d.images = Tensor4<float>(Shape{n, 3, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.num_classes;
    auto r = synth::render(spec, c / spec.local_vocab, c % spec.local_vocab, synth::sample_seed(spec.seed, split, i),
                           ablate);
    std::copy(r.rgb.begin(), r.rgb.end(), d.images.data().begin() + static_cast<std::ptrdiff_t>(i * 3 * s * s));
    d.labels.push_back(static_cast<int>(c));
    d.region.push_back(std::move(r.region));
    d.parts.push_back(std::move(r.parts));
  }
  return d;
}

inline SyntheticData generate(const SyntheticSpec& spec) {
  return {generate_split(spec, spec.train_per_class, 0), generate_split(spec, spec.test_per_class, 1)};
}

// ---------------------------------------------------------------------------
// On-disk layout: root/<split>/<class_name>/<id>.ppm, with <id>.region.pgm
// and <id>.part<k>.pgm siblings.

inline void save_split(const std::filesystem::path& root, const std::string& split, const Dataset& d) {
  namespace fs = std::filesystem;
  const std::size_t h = d.height, w = d.width, plane = h * w;
  auto mask_img = [&](const Mask& m) {
    PnmImage g{1, h, w, {}};
    g.data.reserve(plane);
    for (std::uint8_t v : m) g.data.push_back(v ? 255 : 0);
    return g;
  };
  for (const auto& name : d.class_names) fs::create_directories(root / split / name);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::ostringstream id;
    id << std::setw(6) << std::setfill('0') << i;
    const fs::path dir = root / split / d.class_names[static_cast<std::size_t>(d.labels[i])];
    PnmImage img{3, h, w, {}};
    img.data.reserve(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch) img.data.push_back(to_u8(d.images.data()[(i * 3 + ch) * plane + p]));
    write_pnm(dir / (id.str() + ".ppm"), img);
    if (d.has_regions()) {
      write_pnm(dir / (id.str() + ".region.pgm"), mask_img(d.region[i]));
      for (std::size_t k = 0; k < d.parts[i].size(); ++k) {
        write_pnm(dir / (id.str() + ".part" + std::to_string(k) + ".pgm"), mask_img(d.parts[i][k]));
      }
    }
  }
}

namespace load_detail {

inline std::vector<float> planar(const PnmImage& img) {
  const std::size_t plane = img.height * img.width;
  std::vector<float> out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const std::uint8_t v = img.channels == 3 ? img.data[p * 3 + ch] : img.data[p];
      out[ch * plane + p] = static_cast<float>(v) / 255.0f;
    }
  return out;
}

inline Mask load_mask(const std::filesystem::path& path, std::size_t h, std::size_t w) {
  PnmImage g = read_pnm(path);
  if (g.channels != 1) throw IoError(path.string() + ": mask must be a PGM");
  Mask m(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = std::min(g.height - 1, y * g.height / h);
      const std::size_t sx = std::min(g.width - 1, x * g.width / w);
      m[y * w + x] = g.data[sy * g.width + sx] >= 128 ? 1 : 0;
    }
  return m;
}

}  // namespace load_detail

// Directory-per-class loader. Labels follow sorted class-directory order;
// images (*.ppm) are resized bilinearly to h x w. Region / part masks are
// picked up when every image has them. All unreadable files are reported
// together.
inline Dataset load_dir(const std::filesystem::path& root, std::size_t h, std::size_t w) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError(root.string() + ": no class directories");

  Dataset d;
  d.height = h;
  d.width = w;
  std::vector<std::string> problems;
  std::vector<std::vector<float>> pixels;
  bool all_regions = true;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    d.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      problems.push_back(class_dirs[c].string() + ": empty class directory");
      continue;
    }
    for (const fs::path& f : files) {
      try {
        PnmImage img = read_pnm(f);
        if (img.channels != 3) throw IoError(f.string() + ": expected a P6 image");
        Tensor4<float> t(Shape{1, 3, img.height, img.width}, load_detail::planar(img));
        if (img.height != h || img.width != w) t = resize(t, UpsampleMethod::kBilinear, h, w);
        pixels.push_back(std::move(t.data()));
        d.labels.push_back(static_cast<int>(c));
        const fs::path stem = f.parent_path() / f.stem();
        const fs::path region = stem.string() + ".region.pgm";
        if (all_regions && fs::exists(region)) {
          d.region.push_back(load_detail::load_mask(region, h, w));
          std::vector<Mask> parts;
          for (std::size_t k = 0;; ++k) {
            const fs::path part = stem.string() + ".part" + std::to_string(k) + ".pgm";
            if (!fs::exists(part)) break;
            parts.push_back(load_detail::load_mask(part, h, w));
          }
          d.parts.push_back(std::move(parts));
        } else {
          all_regions = false;
        }
      } catch (const IoError& e) {
        problems.push_back(e.what());
      }
    }
  }
  if (!problems.empty()) {
    std::string msg = "load_dir " + root.string() + ": " + std::to_string(problems.size()) + " problem(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IoError(msg);
  }
  if (!all_regions) {
    d.region.clear();
    d.parts.clear();
  }
  d.images = Tensor4<float>(Shape{pixels.size(), 3, h, w});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    std::copy(pixels[i].begin(), pixels[i].end(), d.images.data().begin() + static_cast<std::ptrdiff_t>(i * 3 * h * w));
  }
  return d;
}

}  // namespace tdsa

#endif  // TDSA_DATAGEN_HPP_
