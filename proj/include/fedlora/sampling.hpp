#pragma once

// Inverse-class-frequency weighted sampling with replacement.
//
//   w_c = N / (C · N_c),   P_i = w_{y_i} / Σ_j w_{y_j}
//
// Every class therefore carries total selection mass 1/C.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fedlora/dataset.hpp"
#include "fedlora/errors.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

struct SamplerSpec {
  std::vector<std::size_t> class_counts;  // N_c
  std::size_t total = 0;                  // N
  std::size_t num_classes = 0;            // C
  std::vector<double> class_weights;      // w_c
  std::vector<std::size_t> labels;        // y_i
  std::vector<double> sample_weights;     // w_{y_i}
  std::vector<double> selection_probs;    // P_i

  // Walker alias table over selection_probs.
  std::vector<double> alias_prob;
  std::vector<std::size_t> alias_index;

  std::size_t size() const { return labels.size(); }
};

namespace detail {

inline void build_alias(SamplerSpec& s) {
  const std::size_t n = s.selection_probs.size();
  s.alias_prob.assign(n, 0.0);
  s.alias_index.assign(n, 0);
  std::vector<double> scaled(n);
  std::vector<std::size_t> small, large;
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = s.selection_probs[i] * static_cast<double>(n);
    (scaled[i] < 1.0 ? small : large).push_back(i);
  }
  while (!small.empty() && !large.empty()) {
    const std::size_t l = small.back(), g = large.back();
    small.pop_back();
    s.alias_prob[l] = scaled[l];
    s.alias_index[l] = g;
    scaled[g] = (scaled[g] + scaled[l]) - 1.0;
    if (scaled[g] < 1.0) {
      large.pop_back();
      small.push_back(g);
    }
  }
  for (std::size_t i : large) s.alias_prob[i] = 1.0;
  for (std::size_t i : small) s.alias_prob[i] = 1.0;
}

}  // namespace detail

// Builds the sampler over a split given each example's class label.
// `class_names` only decorates error messages.
inline SamplerSpec build_sampler(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                 const std::vector<std::string>& class_names = {}) {
  if (labels.empty()) throw ConfigError("sampler: split is empty");
  SamplerSpec s;
  s.num_classes = num_classes;
  s.total = labels.size();
  s.labels = labels;
  s.class_counts.assign(num_classes, 0);
  for (auto y : labels) {
    if (y >= num_classes) throw DataError("sampler: label " + std::to_string(y) + " outside class range");
    ++s.class_counts[y];
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    if (s.class_counts[c] == 0)
      throw ConfigError("sampler: class '" + (c < class_names.size() ? class_names[c] : std::to_string(c)) +
                        "' has no examples in this split");
  for (std::size_t c = 0; c < num_classes; ++c)
    s.class_weights.push_back(static_cast<double>(s.total) /
                              (static_cast<double>(num_classes) * static_cast<double>(s.class_counts[c])));
  // per-class sums keep the normalizer within a few ulp of N
  double z = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) z += static_cast<double>(s.class_counts[c]) * s.class_weights[c];
  for (auto y : labels) s.sample_weights.push_back(s.class_weights[y]);
  for (double w : s.sample_weights) s.selection_probs.push_back(w / z);
  detail::build_alias(s);
  return s;
}

// Sampler over one split of a manifest, examples in manifest key order.
inline SamplerSpec build_sampler(const DatasetManifest& manifest, Split split) {
  std::vector<std::size_t> labels;
  for (const auto& id : manifest.ids(split)) labels.push_back(manifest.labels.at(id));
  if (labels.empty()) throw ConfigError(std::string("sampler: split '") + split_name(split) + "' is empty");
  return build_sampler(labels, manifest.num_classes(), manifest.class_names);
}

// batch_size i.i.d. draws with replacement, O(1) each.
inline std::vector<std::size_t> draw_batch(const SamplerSpec& spec, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("draw_batch: batch_size must be >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, spec.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<std::size_t> out(batch_size);
  for (auto& i : out) {
    const std::size_t k = pick(rng);
    i = coin(rng) < spec.alias_prob[k] ? k : spec.alias_index[k];
  }
  return out;
}

// Batches per epoch under weighted sampling: ⌈N / batch_size⌉.
inline std::size_t batches_per_epoch(const SamplerSpec& spec, std::size_t batch_size) {
  return (spec.size() + batch_size - 1) / batch_size;
}

}  // namespace fedlora
