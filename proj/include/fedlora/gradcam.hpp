#pragma once

// Grad-CAM++ over the P1 patch grid.
//
// With F the g²×E patch-token activations of the chosen layer and G = ∂y_c/∂F:
//   a_ij = G² / (2G² + Σ_ij F·G³)         (0 where G = 0)
//   w_k  = Σ_ij relu(G_ijk) · a_ijk
//   cam  = relu(Σ_k w_k F_k), divided by its maximum
// The second and third order terms use powers of G, the usual closed form for
// an exponential score.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "fedlora/image_io.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

struct SaliencyMap {
  Tensor grid;  // g×g in [0,1]
  std::size_t target_class = 0;
  std::string layer;
  bool zero_gradient = false;  // warning: no gradient reached the layer

  // Nearest-neighbor upsampling to size×size.
  Tensor upsample(std::size_t size) const {
    const std::size_t g = grid.dim(0);
    std::vector<double> out(size * size);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[y * size + x] = grid.at(y * g / size, x * g / size);
    return Tensor({size, size}, std::move(out));
  }

  // (row, col) of the largest cell; ties resolve to the first in row-major order.
  std::pair<std::size_t, std::size_t> argmax() const {
    auto d = grid.data();
    const auto i = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    return {i / grid.dim(1), i % grid.dim(1)};
  }
};

// features, grads: [g²×E] (patch tokens only).
inline SaliencyMap gradcam_pp_from(const Tensor& features, const Tensor& grads, std::size_t grid) {
  if (features.shape() != grads.shape() || features.rank() != 2 || features.dim(0) != grid * grid)
    throw DimensionError("gradcam: features " + shape_str(features.shape()) + " and gradients " +
                         shape_str(grads.shape()) + " must both be " + std::to_string(grid * grid) + "×E");
  const std::size_t n = features.dim(0), e = features.dim(1);
  SaliencyMap m;
  m.zero_gradient = std::all_of(grads.data().begin(), grads.data().end(), [](double v) { return v == 0.0; });
  std::vector<double> cam(n, 0.0);
  if (!m.zero_gradient) {
    for (std::size_t k = 0; k < e; ++k) {
      double fsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) fsum += features.at(i, k);
      double w = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double g = grads.at(i, k);
        if (g == 0.0) continue;
        const double g2 = g * g, denom = 2.0 * g2 + fsum * g2 * g;
        const double a = denom != 0.0 ? g2 / denom : 0.0;
        w += std::max(g, 0.0) * a;
      }
      for (std::size_t i = 0; i < n; ++i) cam[i] += w * features.at(i, k);
    }
  }
  double mx = 0.0;
  for (auto& v : cam) mx = std::max(mx, v = std::max(v, 0.0));
  if (mx > 0.0)
    for (auto& v : cam) v /= mx;
  m.grid = Tensor({grid, grid}, std::move(cam));
  return m;
}

// `image` is model-ready (preprocessed). `block` indexes the P1 encoder
// branch; -1 selects the local-window attention output.
inline SaliencyMap gradcam_pp(const MsDeit& model, const Tensor& image, std::size_t target_class, int block) {
  if (target_class >= model.config.num_classes)
    throw ConfigError("gradcam: target class " + std::to_string(target_class) + " outside [0, " +
                      std::to_string(model.config.num_classes) + ")");
  if (block < kCaptureLwa || block >= static_cast<int>(model.branch1.size()))
    throw ConfigError("gradcam: layer index " + std::to_string(block) + " outside the P1 branch");
  // private frozen adapters keep the caller's tensors free of gradients
  MsDeit local = model.clone_with_private_adapters();
  for (auto& t : local.trainable_tensors()) t.set_requires_grad(false);
  Tape tape;
  ForwardContext ctx;
  ctx.capture_block = block;
  Tensor logits;
  {
    TapeScope scope(tape);
    logits = local.forward(image, ctx);
    tape.backward(ops::pick(ops::reshape(logits, {1, logits.numel()}), {target_class}));
  }
  const Tensor& f = ctx.captured;
  const std::size_t g = model.config.grid1();
  Tensor feats = ops::slice_rows(f.detach(), 2, f.dim(0));
  Tensor grads = f.has_grad()
                     ? ops::slice_rows(Tensor(f.shape(), {f.grad().begin(), f.grad().end()}), 2, f.dim(0))
                     : Tensor::zeros(feats.shape());
  SaliencyMap m = gradcam_pp_from(feats, grads, g);
  m.target_class = target_class;
  m.layer = block == kCaptureLwa ? "p1/lwa" : "p1/block" + std::to_string(block);
  return m;
}

inline int default_gradcam_layer(const MsDeit& model) { return static_cast<int>(model.branch1.size()) - 1; }

// Blue (0) to red (1).
inline std::array<double, 3> colormap(double v) { return {v, 0.0, 1.0 - v}; }

// Half-and-half blend of the colormapped saliency over the image (C×H×W, [0,1]).
inline RgbImage render_overlay(const SaliencyMap& map, const Tensor& image) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2))
    throw DimensionError("overlay: image must be square C×H×W, got " + shape_str(image.shape()));
  const std::size_t size = image.dim(1);
  RgbImage base = from_tensor(image);
  const Tensor up = map.upsample(size);
  for (std::size_t i = 0; i < size * size; ++i) {
    const auto c = colormap(up[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = 0.5 * (base.pixels[i * 3 + ch] / 255.0) + 0.5 * c[ch];
      base.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return base;
}

inline void export_overlay(const SaliencyMap& map, const Tensor& image, const std::filesystem::path& path) {
  write_png(path, render_overlay(map, image));
}

}  // namespace fedlora
