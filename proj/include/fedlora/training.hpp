#pragma once

// Training and evaluation loops shared by clients, the server and the teacher.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedlora/dataset.hpp"
#include "fedlora/distill.hpp"
#include "fedlora/metrics.hpp"
#include "fedlora/model.hpp"
#include "fedlora/optim.hpp"
#include "fedlora/sampling.hpp"

namespace fedlora {

struct TrainConfig {
  std::size_t batch_size = 8;
  AdamConfig adam;
  DistillConfig distill;
  bool weighted_sampling = true;
  AugmentConfig augment;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(adam.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(augment.flip_prob >= 0.0 && augment.flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
    if (!(augment.rotation_deg >= 0.0)) throw ConfigError("rotation_deg must be non-negative");
    distill.validate();
  }
};

struct EpochStats {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

// Random sources for one training run, all derived from named streams.
struct TrainStreams {
  Rng sampler;
  Rng augment;
  Rng dropout;

  static TrainStreams derive(std::uint64_t seed, const std::string& scope) {
    return {stream(seed, "sampler/" + scope), stream(seed, "augment/" + scope), stream(seed, "dropout/" + scope)};
  }
};

inline std::vector<double> softmax_row(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= s;
  return p;
}

// Eval-mode class probabilities for each example after deterministic preprocessing.
inline std::vector<std::vector<double>> predict_probs(const MsDeit& model, const std::vector<LabeledExample>& examples,
                                                      const AugmentConfig& aug) {
  NoGradScope nograd;
  ForwardContext ctx;
  std::vector<std::vector<double>> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    Tensor z = model.forward(preprocess(e, aug).image, ctx);
    out.push_back(softmax_row(z.data()));
  }
  return out;
}

inline MetricsReport evaluate_model(const MsDeit& model, const std::vector<LabeledExample>& examples,
                                    const AugmentConfig& aug) {
  std::vector<std::size_t> labels;
  for (const auto& e : examples) labels.push_back(e.class_id);
  return evaluate(predict_probs(model, examples, aug), labels);
}

// Example order for one epoch: ⌈N/b⌉ weighted draws with replacement, or a
// plain shuffle when weighted sampling is off.
inline std::vector<std::vector<std::size_t>> epoch_batches(const SamplerSpec& spec, std::size_t batch, bool weighted,
                                                           Rng& rng) {
  std::vector<std::vector<std::size_t>> out;
  const std::size_t nb = batches_per_epoch(spec, batch);
  if (weighted) {
    for (std::size_t b = 0; b < nb; ++b) out.push_back(draw_batch(spec, batch, rng));
    return out;
  }
  std::vector<std::size_t> perm(spec.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t b = 0; b < nb; ++b)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b * batch),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min((b + 1) * batch, perm.size())));
  return out;
}

// One epoch of optimizer steps on `params`. Without a teacher the loss is
// plain cross-entropy.
inline EpochStats train_epoch(MsDeit& model, Adam& opt, const std::vector<LabeledExample>& train,
                              const SamplerSpec& spec, const TrainConfig& cfg, const TeacherHandle* teacher,
                              TrainStreams& rs) {
  EpochStats st;
  std::size_t seen = 0, correct = 0;
  double loss_sum = 0.0;
  for (const auto& idx : epoch_batches(spec, cfg.batch_size, cfg.weighted_sampling, rs.sampler)) {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    for (auto i : idx) {
      auto a = augment(train[i], cfg.augment, rs.augment);
      images.push_back(std::move(a.image));
      labels.push_back(a.class_id);
    }
    Tape tape;
    Tensor loss, zs;
    {
      TapeScope scope(tape);
      ForwardContext ctx;
      ctx.training = true;
      ctx.dropout_rng = &rs.dropout;
      zs = model.forward_batch(images, ctx);
      if (teacher) {
        Tensor zt = (*teacher)(images);
        loss = total_loss(zs, zt, labels, cfg.distill).total;
      } else {
        loss = cross_entropy(zs, labels);
      }
      tape.backward(loss);
    }
    opt.step();
    opt.zero_grad();
    loss_sum += loss.item() * static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = zs.data().subspan(r * zs.dim(1), zs.dim(1));
      correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[r];
    }
    seen += idx.size();
  }
  st.train_loss = loss_sum / static_cast<double>(seen);
  st.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  return st;
}

inline std::vector<std::size_t> labels_of(const std::vector<LabeledExample>& xs) {
  std::vector<std::size_t> out;
  for (const auto& e : xs) out.push_back(e.class_id);
  return out;
}

struct TeacherConfig {
  ModelConfig model;
  std::size_t epochs = 15;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  AugmentConfig augment;
  std::uint64_t seed = 0;
};

// Trains every parameter of a fresh network with cross-entropy, then freezes
// it. The result is only ever read.
inline std::shared_ptr<const MsDeit> pretrain_teacher(const TeacherConfig& tc,
                                                      const std::vector<LabeledExample>& data) {
  auto m = std::make_shared<MsDeit>(MsDeit::create(tc.model, tc.seed));
  Adam opt(m->unfreeze_all(), AdamConfig{tc.lr, 0.9, 0.999, 1e-8, 0.0});
  TrainConfig cfg;
  cfg.batch_size = tc.batch_size;
  cfg.augment = tc.augment;
  const auto spec = build_sampler(labels_of(data), tc.model.num_classes);
  TrainStreams rs = TrainStreams::derive(tc.seed, "teacher");
  for (std::size_t e = 0; e < tc.epochs; ++e) train_epoch(*m, opt, data, spec, cfg, nullptr, rs);
  m->freeze_all();
  return m;
}

inline TeacherHandle make_teacher(std::shared_ptr<const MsDeit> model, std::string name) {
  return {std::move(name), [model](const std::vector<Tensor>& images) {
            ForwardContext ctx;
            return model->forward_batch(images, ctx);
          }};
}

}  // namespace fedlora
