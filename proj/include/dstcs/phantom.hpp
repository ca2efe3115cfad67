#pragma once

// Synthetic two-structure phantom: a large near-circular ellipse (FH, class 2)
// and a small elongated ellipse (PS, class 1), degraded by an intensity ramp,
// Gaussian blur and multiplicative speckle.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dstcs/core.hpp"
#include "dstcs/rng.hpp"

namespace dstcs {

class GeometryError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

struct PhantomSpec {
  int image_size = 128;
  // Semi-axis range of the FH ellipse, as a fraction of image_size.
  double fh_radius_min = 0.16;
  double fh_radius_max = 0.26;
  // Semi-major axis range of the PS ellipse, as a fraction of image_size.
  double ps_size_min = 0.07;
  double ps_size_max = 0.12;
  double ps_aspect = 0.35;  // minor / major
  // Gap between the two structures, as a fraction of image_size.
  double gap_min = 0.02;
  double gap_max = 0.08;
  double speckle_sigma = 0.25;
  double blur_sigma = 1.0;
  double intensity_gradient = 0.25;
  // Structure/background intensity contrast range; low values make boundaries ambiguous.
  double contrast_min = 0.12;
  double contrast_max = 0.35;
  std::uint64_t seed = 0;

  /// One-line key=value rendering used by corpus manifests.
  std::string to_string() const {
    std::ostringstream os;
    os << std::setprecision(17) << "image_size=" << image_size << " fh_radius_min=" << fh_radius_min
       << " fh_radius_max=" << fh_radius_max << " ps_size_min=" << ps_size_min
       << " ps_size_max=" << ps_size_max << " ps_aspect=" << ps_aspect << " gap_min=" << gap_min
       << " gap_max=" << gap_max << " speckle_sigma=" << speckle_sigma << " blur_sigma=" << blur_sigma
       << " intensity_gradient=" << intensity_gradient << " contrast_min=" << contrast_min
       << " contrast_max=" << contrast_max << " seed=" << seed;
    return os.str();
  }

  static PhantomSpec parse(const std::string& line) {
    PhantomSpec s;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed phantom spec token '" + tok + "'");
      s.set(tok.substr(0, eq), tok.substr(eq + 1));
    }
    return s;
  }

  void set(const std::string& key, const std::string& value) {
    try {
      if (key == "image_size") image_size = std::stoi(value);
      else if (key == "fh_radius_min") fh_radius_min = std::stod(value);
      else if (key == "fh_radius_max") fh_radius_max = std::stod(value);
      else if (key == "ps_size_min") ps_size_min = std::stod(value);
      else if (key == "ps_size_max") ps_size_max = std::stod(value);
      else if (key == "ps_aspect") ps_aspect = std::stod(value);
      else if (key == "gap_min") gap_min = std::stod(value);
      else if (key == "gap_max") gap_max = std::stod(value);
      else if (key == "speckle_sigma") speckle_sigma = std::stod(value);
      else if (key == "blur_sigma") blur_sigma = std::stod(value);
      else if (key == "intensity_gradient") intensity_gradient = std::stod(value);
      else if (key == "contrast_min") contrast_min = std::stod(value);
      else if (key == "contrast_max") contrast_max = std::stod(value);
      else if (key == "seed") seed = std::stoull(value);
      else throw ConfigError("unknown phantom key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("invalid value '" + value + "' for phantom key '" + key + "'");
    }
  }

  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

namespace detail {

struct Ellipse {
  double cy, cx, a, b, theta;  // centre, semi-major, semi-minor, orientation

  bool contains(double y, double x) const noexcept {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

inline void gaussian_blur(Image& img, double sigma) {
  if (sigma <= 0.0 || img.empty()) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) norm += (kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& k : kernel) k /= norm;

  const int rows = img.rows(), cols = img.cols();
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Image tmp(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img(r, reflect(c + k, cols));
      tmp(r, c) = static_cast<float>(acc);
    }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp(reflect(r + k, rows), c);
      img(r, c) = static_cast<float>(acc);
    }
}

inline void validate(const PhantomSpec& s) {
  auto fail = [](const std::string& m) { throw GeometryError("infeasible phantom geometry: " + m); };
  if (s.image_size < 8) fail("image_size must be at least 8");
  if (!(s.fh_radius_min > 0 && s.fh_radius_min <= s.fh_radius_max)) fail("fh_radius range must satisfy 0 < min <= max");
  if (!(s.ps_size_min > 0 && s.ps_size_min <= s.ps_size_max)) fail("ps_size range must satisfy 0 < min <= max");
  if (!(s.ps_aspect > 0 && s.ps_aspect <= 1)) fail("ps_aspect must lie in (0, 1]");
  if (!(s.gap_min >= 0 && s.gap_min <= s.gap_max)) fail("gap range must satisfy 0 <= min <= max");
  if (!(s.contrast_min >= 0 && s.contrast_min <= s.contrast_max)) fail("contrast range must satisfy 0 <= min <= max");
  if (s.speckle_sigma < 0 || s.blur_sigma < 0 || s.intensity_gradient < 0)
    fail("degradation parameters must be non-negative");
  if (2.0 * s.ps_size_min * s.image_size > s.image_size - 2)
    fail("PS ellipse (ps_size_min) cannot fit inside the image");
  if (2.0 * s.fh_radius_min * s.image_size > s.image_size - 2)
    fail("FH ellipse (fh_radius_min) cannot fit inside the image");
  if (2.0 * (s.fh_radius_min + s.ps_size_min + s.gap_min) * s.image_size > std::sqrt(2.0) * (s.image_size - 2))
    fail("FH + gap + PS extent exceeds the image diagonal");
  if (s.ps_size_min * s.ps_size_min * s.ps_aspect * 0.85 >= s.fh_radius_max * s.fh_radius_max * 0.98)
    fail("PS area cannot stay below FH area (ps_size_min too large relative to fh_radius_max)");
}

}  // namespace detail

/// Pure function of (spec, id).
inline MaskPair generate_phantom(const PhantomSpec& spec, std::int64_t id) {
  if (id < 0) throw Error("phantom id must be non-negative");
  detail::validate(spec);
  const int n = spec.image_size;
  const double pi = 3.141592653589793;
  Rng rng = make_rng(spec.seed, {0x70686e74ULL, static_cast<std::uint64_t>(id)});

  for (int attempt = 0; attempt < 200; ++attempt) {
    detail::Ellipse fh{};
    fh.a = uniform(rng, spec.fh_radius_min, spec.fh_radius_max) * n;
    fh.b = fh.a * uniform(rng, 0.82, 0.98);
    fh.theta = uniform(rng, 0.0, pi);
    fh.cy = uniform(rng, fh.a + 1, n - 1 - fh.a);
    fh.cx = uniform(rng, fh.a + 1, n - 1 - fh.a);

    detail::Ellipse ps{};
    ps.a = uniform(rng, spec.ps_size_min, spec.ps_size_max) * n;
    ps.b = std::max(1.0, ps.a * spec.ps_aspect * uniform(rng, 0.85, 1.15));
    const double gap = uniform(rng, spec.gap_min, spec.gap_max) * n;
    const double dir = uniform(rng, 0.0, 2.0 * pi);
    const double dist = fh.a + gap + ps.b;
    ps.cy = fh.cy + dist * std::sin(dir);
    ps.cx = fh.cx + dist * std::cos(dir);
    // PS long axis roughly tangent to the FH contour.
    ps.theta = dir + pi / 2 + uniform(rng, -0.4, 0.4);
    if (ps.cy - ps.a < 1 || ps.cy + ps.a > n - 2 || ps.cx - ps.a < 1 || ps.cx + ps.a > n - 2) continue;

    MaskPair out{Image(n, n), LabelMask(n, n, kBackground)};
    std::array<std::size_t, kNumClasses> counts{};
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const double y = r + 0.5, x = c + 0.5;
        std::uint8_t label = kBackground;
        // PS takes priority over FH.
        if (ps.contains(y, x)) label = kPS;
        else if (fh.contains(y, x)) label = kFH;
        out.mask(r, c) = label;
        ++counts[label];
      }
    if (counts[kPS] == 0 || counts[kFH] <= counts[kPS] || counts[kBackground] == 0) continue;

    const double background = uniform(rng, 0.25, 0.4);
    const double fh_level = background + uniform(rng, spec.contrast_min, spec.contrast_max);
    const double ps_level = background + uniform(rng, spec.contrast_min, spec.contrast_max) + 0.1;
    const double ramp = uniform(rng, 0.0, spec.intensity_gradient);
    const double ramp_dir = uniform(rng, 0.0, 2.0 * pi);
    const double ry = std::sin(ramp_dir), rx = std::cos(ramp_dir);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        double v = out.mask(r, c) == kPS ? ps_level : out.mask(r, c) == kFH ? fh_level : background;
        v += ramp * ((ry * (r - n / 2.0) + rx * (c - n / 2.0)) / n);
        out.image(r, c) = static_cast<float>(v);
      }
    detail::gaussian_blur(out.image, spec.blur_sigma);
    for (std::size_t i = 0; i < out.image.size(); ++i) {
      const double speckled = out.image[i] * (1.0 + spec.speckle_sigma * normal01(rng));
      out.image[i] = static_cast<float>(std::clamp(speckled, 0.0, 1.0));
    }
    return out;
  }
  throw GeometryError("infeasible phantom geometry: could not place PS and FH inside the image after 200 attempts");
}

struct DatasetSplit {
  std::vector<int> labeled_ids;
  std::vector<int> unlabeled_ids;
  std::vector<int> val_ids;
  std::vector<int> test_ids;
  double labeled_ratio = 1.0;

  std::size_t train_size() const noexcept { return labeled_ids.size() + unlabeled_ids.size(); }
  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// 70/10/20 train/val/test split. The labeled pool is a prefix of a fixed
/// permutation of the training ids, so pools are nested across ratios.
inline DatasetSplit make_split(int corpus_size, double labeled_ratio, std::uint64_t seed) {
  if (corpus_size < 10) throw Error("corpus too small for a train/val/test split (need at least 10 items, got " + std::to_string(corpus_size) + ")");
  if (!(labeled_ratio > 0.0 && labeled_ratio <= 1.0)) throw ConfigError("labeled_ratio must lie in (0, 1]");

  std::vector<int> ids(corpus_size);
  for (int i = 0; i < corpus_size; ++i) ids[i] = i;
  Rng rng = make_rng(seed, {0x73706c74ULL});
  shuffle(ids, rng);

  const int n_train = static_cast<int>(std::lround(0.7 * corpus_size));
  const int n_val = static_cast<int>(std::lround(0.1 * corpus_size));
  const int n_test = corpus_size - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1) throw Error("corpus too small for nonempty splits");

  std::vector<int> train(ids.begin(), ids.begin() + n_train);
  DatasetSplit split;
  split.labeled_ratio = labeled_ratio;
  split.val_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test_ids.assign(ids.begin() + n_train + n_val, ids.end());

  const int n_labeled = static_cast<int>(std::lround(labeled_ratio * n_train));
  if (n_labeled < 1) throw ConfigError("labeled_ratio too small: labeled pool would be empty");
  split.labeled_ids.assign(train.begin(), train.begin() + n_labeled);
  split.unlabeled_ids.assign(train.begin() + n_labeled, train.end());

  for (auto* v : {&split.labeled_ids, &split.unlabeled_ids, &split.val_ids, &split.test_ids})
    std::sort(v->begin(), v->end());
  return split;
}

// ---------------------------------------------------------------------------
// Corpus persistence

struct CorpusItem {
  int id = 0;
  MaskPair pair;
  bool labeled = false;
};

struct Corpus {
  PhantomSpec spec;
  std::vector<CorpusItem> items;

  int rows() const { return items.empty() ? spec.image_size : items.front().pair.image.rows(); }
  int cols() const { return items.empty() ? spec.image_size : items.front().pair.image.cols(); }

  const CorpusItem& at(int id) const {
    if (id >= 0 && static_cast<std::size_t>(id) < items.size() && items[id].id == id) return items[id];
    for (const auto& it : items)
      if (it.id == id) return it;
    throw Error("corpus has no item with id " + std::to_string(id));
  }
};

/// Generates ids [0, count) and flags the labeled pool of make_split when the corpus is large enough.
inline Corpus generate_corpus(const PhantomSpec& spec, int count, double labeled_ratio = 0.2,
                              std::uint64_t split_seed = 0) {
  Corpus corpus{spec, {}};
  corpus.items.reserve(count);
  std::set<int> labeled;
  if (count >= 10) {
    const auto split = make_split(count, labeled_ratio, split_seed);
    labeled.insert(split.labeled_ids.begin(), split.labeled_ids.end());
  }
  for (int id = 0; id < count; ++id)
    corpus.items.push_back({id, generate_phantom(spec, id), labeled.contains(id)});
  return corpus;
}

inline std::uint32_t item_checksum(const MaskPair& p) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(p.image.data()), static_cast<uInt>(p.image.size() * sizeof(float)));
  crc = crc32(crc, reinterpret_cast<const Bytef*>(p.mask.data()), static_cast<uInt>(p.mask.size()));
  return static_cast<std::uint32_t>(crc);
}

struct ManifestEntry {
  int id = 0;
  std::uint32_t checksum = 0;
  bool labeled = false;
};

namespace detail {

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptionError("missing corpus file '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Writes manifest.txt, images/<id>.bin (float32 raster) and masks/<id>.bin (uint8 labels).
inline std::vector<ManifestEntry> save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::vector<ManifestEntry> manifest;
  std::ostringstream os;
  os << "# dstcs-corpus v1\n"
     << "rows " << corpus.rows() << "\n"
     << "cols " << corpus.cols() << "\n"
     << "count " << corpus.items.size() << "\n"
     << "spec " << corpus.spec.to_string() << "\n";
  for (const auto& item : corpus.items) {
    const auto& p = item.pair;
    if (p.image.rows() != corpus.rows() || p.image.cols() != corpus.cols() || !p.mask.same_shape(p.image))
      throw ShapeError("corpus item " + std::to_string(item.id) + " has inconsistent dimensions");
    const auto name = std::to_string(item.id) + ".bin";
    detail::write_bytes(dir / "images" / name, p.image.data(), p.image.size() * sizeof(float));
    detail::write_bytes(dir / "masks" / name, p.mask.data(), p.mask.size());
    ManifestEntry e{item.id, item_checksum(p), item.labeled};
    os << e.id << ' ' << detail::hex32(e.checksum) << ' ' << (e.labeled ? 1 : 0) << '\n';
    manifest.push_back(e);
  }
  std::ofstream out(dir / "manifest.txt", std::ios::trunc);
  if (!out) throw Error("cannot write manifest in '" + dir.string() + "'");
  out << os.str();
  return manifest;
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw Error("no corpus manifest at '" + (dir / "manifest.txt").string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "# dstcs-corpus v1")
    throw CorruptionError("unrecognized manifest header in '" + dir.string() + "'");

  int rows = -1, cols = -1;
  long count = -1;
  Corpus corpus;
  for (int i = 0; i < 4 && std::getline(in, line); ++i) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "rows") ls >> rows;
    else if (key == "cols") ls >> cols;
    else if (key == "count") ls >> count;
    else if (key == "spec") {
      std::string rest;
      std::getline(ls, rest);
      corpus.spec = PhantomSpec::parse(rest);
    } else throw CorruptionError("unexpected manifest header line '" + line + "'");
  }
  if (rows < 0 || cols < 0 || count < 0) throw CorruptionError("incomplete manifest header");

  const auto n_pix = static_cast<std::size_t>(rows) * cols;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int id = -1, flag = 0;
    std::string hex;
    if (!(ls >> id >> hex >> flag)) throw CorruptionError("malformed manifest line '" + line + "'");
    const auto name = std::to_string(id) + ".bin";
    const auto img_bytes = detail::read_bytes(dir / "images" / name);
    const auto mask_bytes = detail::read_bytes(dir / "masks" / name);
    if (img_bytes.size() != n_pix * sizeof(float) || mask_bytes.size() != n_pix)
      throw CorruptionError("corpus item " + std::to_string(id) + " has wrong file size");
    CorpusItem item{id, {Image(rows, cols), LabelMask(rows, cols)}, flag != 0};
    std::memcpy(item.pair.image.data(), img_bytes.data(), img_bytes.size());
    std::memcpy(item.pair.mask.data(), mask_bytes.data(), mask_bytes.size());
    if (detail::hex32(item_checksum(item.pair)) != hex)
      throw CorruptionError("checksum mismatch for corpus item " + std::to_string(id));
    corpus.items.push_back(std::move(item));
  }
  if (static_cast<long>(corpus.items.size()) != count)
    throw CorruptionError("manifest lists " + std::to_string(corpus.items.size()) + " items but header says " + std::to_string(count));
  std::sort(corpus.items.begin(), corpus.items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return corpus;
}

/// Pixel counts per class over a set of masks.
inline std::array<std::size_t, kNumClasses> class_histogram(const Corpus& corpus) {
  std::array<std::size_t, kNumClasses> h{};
  for (const auto& it : corpus.items)
    for (auto v : it.pair.mask.values()) ++h[v];
  return h;
}

}  // namespace dstcs
