#pragma once

// Cross-entropy, temperature-scaled KL distillation and their α-blend.

#include <functional>
#include <string>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/ops.hpp"

namespace fedlora {

struct DistillConfig {
  double temperature = 2.0;
  double alpha = 0.25;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill: alpha must lie in [0, 1]");
  }
};

// Frozen logits source. Never participates in a tape.
struct TeacherHandle {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> logits;  // images -> [B×C]

  Tensor operator()(const std::vector<Tensor>& images) const {
    NoGradScope nograd;
    return logits(images).detach();
  }
};

// -(1/B) Σ log softmax(zs)_{y_i}
inline Tensor cross_entropy(const Tensor& zs, const std::vector<std::size_t>& labels) {
  if (zs.rank() != 2) throw DimensionError("cross_entropy: logits must be B×C, got " + shape_str(zs.shape()));
  for (auto y : labels)
    if (y >= zs.dim(1))
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside " + std::to_string(zs.dim(1)) +
                      " classes");
  return ops::scale(ops::mean(ops::pick(ops::log_softmax_lastdim(zs, 1.0), labels)), -1.0);
}

// T² · mean_b Σ_i q_i (log q_i − log p̂_i), q = softmax(zt/T), p̂ = softmax(zs/T).
// Teacher logits are treated as constants.
inline Tensor kd_loss(const Tensor& zs, const Tensor& zt, double temperature) {
  if (zs.shape() != zt.shape())
    throw ContractError("kd_loss: student " + shape_str(zs.shape()) + " and teacher " + shape_str(zt.shape()) +
                        " logits differ in shape");
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
  Tensor q, logq;
  {
    NoGradScope nograd;
    logq = ops::log_softmax_lastdim(zt.detach(), temperature);
    q = ops::softmax_lastdim(zt.detach(), temperature);
  }
  const std::size_t rows = zs.rank() == 2 ? zs.dim(0) : 1;
  Tensor logp = ops::log_softmax_lastdim(zs, temperature);
  Tensor per = ops::mul(q, ops::sub(logq, logp));
  return ops::scale(ops::sum(per), temperature * temperature / static_cast<double>(rows));
}

struct LossBreakdown {
  Tensor total;
  double cross_entropy = 0.0;
  double distillation = 0.0;
};

// α·CE + (1−α)·KD
inline LossBreakdown total_loss(const Tensor& zs, const Tensor& zt, const std::vector<std::size_t>& labels,
                                const DistillConfig& cfg) {
  cfg.validate();
  Tensor ce = cross_entropy(zs, labels);
  Tensor kd = kd_loss(zs, zt, cfg.temperature);
  Tensor total = ops::add(ops::scale(ce, cfg.alpha), ops::scale(kd, 1.0 - cfg.alpha));
  return {total, ce.item(), kd.item()};
}

}  // namespace fedlora
