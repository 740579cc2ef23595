#pragma once

// Central-difference gradient verification.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "fedlora/tensor.hpp"

namespace fedlora {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of loss() w.r.t. every tensor in `inputs`
// against central differences. `max_entries_per_tensor` > 0 samples that many
// entries per tensor (deterministically from `seed`); 0 checks every entry.
// Inputs are temporarily flagged requires_grad and restored afterwards.
inline GradCheckResult grad_check_many(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double eps,
                                       std::size_t max_entries_per_tensor = 0, unsigned seed = 0) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-4]");
  std::vector<bool> saved;
  for (auto& t : inputs) {
    saved.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  struct Restore {
    std::vector<Tensor>& ts;
    std::vector<bool>& flags;
    ~Restore() {
      for (std::size_t i = 0; i < ts.size(); ++i) {
        ts[i].set_requires_grad(flags[i]);
        ts[i].zero_grad();
      }
    }
  } restore{inputs, saved};

  FiniteCheckScope finite;
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor l = loss();
    if (l.requires_grad()) tape.backward(l);
    for (auto& t : inputs)
      analytic.push_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                      : std::vector<double>(t.numel(), 0.0));
  }

  auto eval = [&] {
    NoGradScope nograd;
    return loss().item();
  };

  GradCheckResult res;
  std::mt19937 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_entries_per_tensor > 0 && idx.size() > max_entries_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries_per_tensor);
    }
    auto data = t.mutable_data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = eval();
      data[i] = orig - eps;
      const double down = eval();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      ++res.entries_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

// Max relative error between analytic and central-difference gradients of f at x.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-6) {
  return grad_check_many([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace fedlora
