#pragma once

// Labeled image records, stratified split assignment, augmentation and the
// synthetic planted-square corpus.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlora/errors.hpp"
#include "fedlora/rng.hpp"
#include "fedlora/tensor.hpp"

namespace fedlora {

struct LabeledExample {
  Tensor image;  // C×H×W, values in [0,1] before normalization
  std::size_t class_id = 0;
  std::string source_id;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalization identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
  bool operator==(const Normalization&) const = default;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::map<std::string, Split> splits;        // source_id -> split
  std::map<std::string, std::size_t> labels;  // source_id -> class id
  Normalization normalization;

  std::size_t num_classes() const { return class_names.size(); }

  std::vector<std::size_t> counts(Split s) const {
    std::vector<std::size_t> c(class_names.size(), 0);
    for (const auto& [id, sp] : splits)
      if (sp == s) ++c.at(labels.at(id));
    return c;
  }

  // Source ids assigned to `s`, in key order.
  std::vector<std::string> ids(Split s) const {
    std::vector<std::string> out;
    for (const auto& [id, sp] : splits)
      if (sp == s) out.push_back(id);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["class_names"] = class_names;
    nlohmann::json sp = nlohmann::json::object(), lb = nlohmann::json::object();
    for (const auto& [id, s] : splits) sp[id] = split_name(s);
    for (const auto& [id, c] : labels) lb[id] = c;
    j["splits"] = sp;
    j["labels"] = lb;
    j["normalization"] = {{"mean", normalization.mean}, {"std", normalization.std}};
    nlohmann::json counts_j = nlohmann::json::object();
    for (Split s : {Split::train, Split::val, Split::test}) counts_j[split_name(s)] = counts(s);
    j["counts"] = counts_j;
    return j;
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
      m.class_names = j.at("class_names").get<std::vector<std::string>>();
      for (const auto& [id, s] : j.at("splits").items()) m.splits[id] = parse_split(s.get<std::string>());
      for (const auto& [id, c] : j.at("labels").items()) m.labels[id] = c.get<std::size_t>();
      m.normalization.mean = j.at("normalization").at("mean").get<std::vector<double>>();
      m.normalization.std = j.at("normalization").at("std").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("manifest: ") + e.what());
    }
    for (const auto& [id, s] : m.splits)
      if (!m.labels.count(id) || m.labels.at(id) >= m.class_names.size())
        throw DataError("manifest: source id '" + id + "' has no valid label");
    return m;
  }

  // UTF-8 JSON, keys sorted, doubles printed round-trip exact.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read manifest " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("manifest " + path.string() + ": " + e.what());
    }
  }

  bool operator==(const DatasetManifest&) const = default;
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Splits n items by largest remainder. Ties go to train, then val, then test.
inline std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitFractions& f) {
  const std::array<double, 3> exact = {n * f.train, n * f.val, n * f.test};
  std::array<std::size_t, 3> out{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    out[i] = static_cast<std::size_t>(std::floor(exact[i] + 1e-9));
    rem[i] = exact[i] - static_cast<double>(out[i]);
    used += out[i];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b] + 1e-9; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[order[k % 3]];
  return out;
}

inline Normalization channel_stats(const std::vector<const LabeledExample*>& items) {
  if (items.empty()) throw DataError("cannot compute normalization over an empty split");
  const std::size_t c = items.front()->image.dim(0);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  std::vector<std::size_t> n(c, 0);
  for (const auto* e : items) {
    const std::size_t plane = e->image.numel() / c;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = e->image[ch * plane + i];
        sum[ch] += v;
        sq[ch] += v * v;
        ++n[ch];
      }
  }
  Normalization out;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double m = sum[ch] / static_cast<double>(n[ch]);
    const double var = std::max(sq[ch] / static_cast<double>(n[ch]) - m * m, 0.0);
    out.mean.push_back(m);
    out.std.push_back(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return out;
}

// Per-class shuffled largest-remainder split; normalization is computed over
// the train split.
inline DatasetManifest stratified_split(const std::vector<LabeledExample>& examples,
                                        const std::vector<std::string>& class_names, SplitFractions fractions,
                                        std::uint64_t seed) {
  if (!(fractions.train > 0 && fractions.val > 0 && fractions.test > 0) ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be positive and sum to 1");
  std::vector<std::vector<const LabeledExample*>> by_class(class_names.size());
  for (const auto& e : examples) {
    if (e.class_id >= class_names.size())
      throw DataError("example '" + e.source_id + "' has class id " + std::to_string(e.class_id) + " outside " +
                      std::to_string(class_names.size()) + " classes");
    by_class[e.class_id].push_back(&e);
  }
  DatasetManifest m;
  m.class_names = class_names;
  std::vector<const LabeledExample*> train;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    auto& items = by_class[c];
    if (items.empty()) throw ConfigError("class '" + class_names[c] + "' has no examples");
    std::sort(items.begin(), items.end(), [](auto* a, auto* b) { return a->source_id < b->source_id; });
    Rng rng = stream(seed, "split/" + class_names[c]);
    std::shuffle(items.begin(), items.end(), rng);
    const auto n = largest_remainder(items.size(), fractions);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Split s = i < n[0] ? Split::train : (i < n[0] + n[1] ? Split::val : Split::test);
      if (!m.splits.emplace(items[i]->source_id, s).second)
        throw DataError("duplicate source id '" + items[i]->source_id + "'");
      m.labels[items[i]->source_id] = c;
      if (s == Split::train) train.push_back(items[i]);
    }
  }
  m.normalization = channel_stats(train);
  return m;
}

struct AugmentConfig {
  std::size_t image_size = 224;
  double flip_prob = 0.5;
  double rotation_deg = 15.0;
  Normalization normalization = Normalization::identity(3);
};

namespace imageops {

// Bilinear resize with pixel-center alignment; same-size resize is exact.
inline Tensor resize(const Tensor& img, std::size_t size) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == size && w == size) return img.detach();
  std::vector<double> out(c * size * size);
  const double sy = static_cast<double>(h) / size, sx = static_cast<double>(w) / size;
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = img.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * size + y) * size + x] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return Tensor({c, size, size}, std::move(out));
}

inline Tensor hflip(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> out(img.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
  return Tensor(img.shape(), std::move(out));
}

// Rotation about the image center, nearest-neighbor sampling, zero padding.
inline Tensor rotate(const Tensor& img, double degrees) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  std::vector<double> out(img.numel(), 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      // inverse map: source = R(-θ)·dest
      const double syf = cs * dy - sn * dx + cy, sxf = sn * dy + cs * dx + cx;
      const long sy = std::lround(syf), sx = std::lround(sxf);
      if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(ch * h + y) * w + x] = img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
    }
  return Tensor(img.shape(), std::move(out));
}

inline Tensor normalize(const Tensor& img, const Normalization& n) {
  const std::size_t c = img.dim(0), plane = img.numel() / c;
  if (n.mean.size() != c || n.std.size() != c)
    throw DataError("normalization has " + std::to_string(n.mean.size()) + " channels, image has " +
                    std::to_string(c));
  std::vector<double> out(img.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = (img[ch * plane + i] - n.mean[ch]) / n.std[ch];
  return Tensor(img.shape(), std::move(out));
}

}  // namespace imageops

inline void check_image(const LabeledExample& e) {
  if (!e.image.defined() || e.image.rank() != 3)
    throw DataError("example '" + e.source_id + "': image must be C×H×W");
}

// Resize, random horizontal flip, random rotation, then per-channel normalization.
inline LabeledExample augment(const LabeledExample& e, const AugmentConfig& cfg, Rng& rng) {
  check_image(e);
  Tensor img = imageops::resize(e.image, cfg.image_size);
  if (cfg.flip_prob > 0.0 && std::bernoulli_distribution(cfg.flip_prob)(rng)) img = imageops::hflip(img);
  if (cfg.rotation_deg > 0.0) {
    const double deg = std::uniform_real_distribution<double>(-cfg.rotation_deg, cfg.rotation_deg)(rng);
    img = imageops::rotate(img, deg);
  }
  return {imageops::normalize(img, cfg.normalization), e.class_id, e.source_id};
}

// Deterministic evaluation-time transform: resize and normalize only.
inline LabeledExample preprocess(const LabeledExample& e, const AugmentConfig& cfg) {
  check_image(e);
  return {imageops::normalize(imageops::resize(e.image, cfg.image_size), cfg.normalization), e.class_id,
          e.source_id};
}

// Planted-square layout: the image is an 8×8 grid of cells; class c owns one
// cell in the left half and its horizontal mirror, so flips keep the label.
struct SquareLayout {
  std::size_t image_size = 32;
  std::size_t cell() const { return image_size / 8; }
  static constexpr std::size_t kCapacity = 9;

  // (row, col) of the left cell for class c.
  static std::pair<std::size_t, std::size_t> left_cell(std::size_t c) { return {1 + (c % 3) * 2, 1 + c / 3}; }

  // Pixel rectangles [y0, y1) × [x0, x1) of both squares.
  std::array<std::array<std::size_t, 4>, 2> squares(std::size_t c) const {
    auto [r, col] = left_cell(c);
    const std::size_t s = cell();
    return {{{r * s, (r + 1) * s, col * s, (col + 1) * s}, {r * s, (r + 1) * s, (7 - col) * s, (8 - col) * s}}};
  }
};

// Class-c images: dim noisy background with two bright squares at the class's
// mirrored cell pair. Deterministic per seed.
inline std::pair<std::vector<LabeledExample>, DatasetManifest> synth_dataset(std::size_t num_classes,
                                                                             std::size_t per_class,
                                                                             std::size_t image_size,
                                                                             std::uint64_t seed,
                                                                             SplitFractions fractions = {}) {
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (num_classes > SquareLayout::kCapacity)
    throw ConfigError("synthetic layout supports at most " + std::to_string(SquareLayout::kCapacity) + " classes");
  if (image_size < 16 || image_size % 8 != 0)
    throw ConfigError("synthetic image_size must be a multiple of 8 and at least 16, got " +
                      std::to_string(image_size));
  if (per_class == 0) throw ConfigError("synthetic dataset needs at least one example per class");
  const SquareLayout layout{image_size};
  const std::size_t channels = 3, plane = image_size * image_size;
  std::vector<LabeledExample> examples;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes; ++c) names.push_back("class_" + std::to_string(c));
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::string id = "synth/" + names[c] + "/" + std::to_string(k);
      Rng rng = stream(seed, "synth/" + id);
      std::normal_distribution<double> noise(0.0, 0.05);
      std::uniform_real_distribution<double> bright(0.75, 0.95);
      std::vector<double> px(channels * plane);
      for (auto& v : px) v = std::clamp(0.2 + noise(rng), 0.0, 1.0);
      const double level = bright(rng);
      for (const auto& sq : layout.squares(c))
        for (std::size_t y = sq[0]; y < sq[1]; ++y)
          for (std::size_t x = sq[2]; x < sq[3]; ++x)
            for (std::size_t ch = 0; ch < channels; ++ch)
              px[ch * plane + y * image_size + x] = std::clamp(level + noise(rng), 0.0, 1.0);
      examples.push_back({Tensor({channels, image_size, image_size}, std::move(px)), c, id});
    }
  }
  auto manifest = stratified_split(examples, names, fractions, seed);
  return {std::move(examples), std::move(manifest)};
}

// Examples of `split`, in manifest key order.
inline std::vector<LabeledExample> select(const std::vector<LabeledExample>& all, const DatasetManifest& m,
                                          Split split) {
  std::map<std::string, const LabeledExample*> by_id;
  for (const auto& e : all) by_id[e.source_id] = &e;
  std::vector<LabeledExample> out;
  for (const auto& id : m.ids(split)) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("manifest references missing example '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace fedlora
