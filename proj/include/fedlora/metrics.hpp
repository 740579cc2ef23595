#pragma once

// Multiclass evaluation: macro one-vs-rest AUC, macro F1/precision/recall,
// top-5 accuracy, mean cross-entropy, confusion matrix and ROC curves.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlora/errors.hpp"
#include "fedlora/tensor.hpp"

namespace fedlora {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct MetricsReport {
  double auc_macro = 0.0;
  double f1_macro = 0.0;
  double precision_macro = 0.0;
  double recall_macro = 0.0;
  double top5_accuracy = 0.0;
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::vector<double> auc_per_class;  // NaN where a class lacks positives or negatives
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::vector<std::vector<RocPoint>> roc;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["auc_macro"] = auc_macro;
    j["f1_macro"] = f1_macro;
    j["precision_macro"] = precision_macro;
    j["recall_macro"] = recall_macro;
    j["top5_accuracy"] = top5_accuracy;
    j["accuracy"] = accuracy;
    j["mean_loss"] = mean_loss;
    nlohmann::json per = nlohmann::json::array();
    for (double a : auc_per_class) per.push_back(std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a));
    j["auc_per_class"] = per;
    j["confusion"] = confusion;
    nlohmann::json roc_j = nlohmann::json::array();
    for (const auto& curve : roc) {
      nlohmann::json c = nlohmann::json::array();
      for (const auto& p : curve) c.push_back({p.fpr, p.tpr});
      roc_j.push_back(c);
    }
    j["roc"] = roc_j;
    return j;
  }

  // class,fpr,tpr rows for plotting.
  std::string roc_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "class,fpr,tpr\n";
    for (std::size_t c = 0; c < roc.size(); ++c)
      for (const auto& p : roc[c]) os << c << ',' << p.fpr << ',' << p.tpr << '\n';
    return os.str();
  }
};

inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<std::size_t>& preds,
                                                              const std::vector<std::size_t>& labels,
                                                              std::size_t num_classes) {
  if (preds.size() != labels.size()) throw DataError("confusion_matrix: prediction/label count mismatch");
  std::vector<std::vector<std::size_t>> m(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= num_classes || labels[i] >= num_classes)
      throw DataError("confusion_matrix: class index outside [0, " + std::to_string(num_classes) + ")");
    ++m[labels[i]][preds[i]];
  }
  return m;
}

// One-vs-rest ROC for scores where positive[i] marks the class. Equal scores
// form one threshold step. Empty when either side has no samples.
inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  const std::size_t p = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t q = n - p;
  if (p == 0 || q == 0) return {};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (positive[order[j]]) ++tp;
      else ++fp;
      ++j;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(q), static_cast<double>(tp) / static_cast<double>(p)});
    i = j;
  }
  return pts;
}

inline double trapezoid_auc(const std::vector<RocPoint>& pts) {
  if (pts.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double a = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    a += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return a;
}

// probs: B rows of C class probabilities, each summing to 1 within 1e-9.
inline MetricsReport evaluate(const std::vector<std::vector<double>>& probs, const std::vector<std::size_t>& labels) {
  if (probs.size() != labels.size()) throw DataError("evaluate: probability/label count mismatch");
  if (probs.empty()) throw DataError("evaluate: no samples");
  const std::size_t b = probs.size(), c = probs.front().size();
  for (std::size_t i = 0; i < b; ++i) {
    if (probs[i].size() != c) throw DataError("evaluate: ragged probability rows");
    const double s = std::accumulate(probs[i].begin(), probs[i].end(), 0.0);
    if (std::abs(s - 1.0) > 1e-9)
      throw ContractError("evaluate: probability row " + std::to_string(i) + " sums to " + std::to_string(s));
    if (labels[i] >= c) throw DataError("evaluate: label " + std::to_string(labels[i]) + " outside class range");
  }

  MetricsReport r;
  std::vector<std::size_t> preds(b);
  double loss = 0.0;
  std::size_t top5 = 0, correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& row = probs[i];
    preds[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += preds[i] == labels[i];
    loss -= std::log(std::max(row[labels[i]], 1e-300));
    // rank of the true class: number of classes scoring strictly higher
    std::size_t higher = 0;
    for (std::size_t k = 0; k < c; ++k) higher += row[k] > row[labels[i]];
    top5 += higher < 5;
  }
  r.mean_loss = loss / static_cast<double>(b);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  r.top5_accuracy = static_cast<double>(top5) / static_cast<double>(b);
  r.confusion = confusion_matrix(preds, labels, c);

  double f1 = 0.0, prec = 0.0, rec = 0.0, auc = 0.0;
  std::size_t auc_n = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t tp = r.confusion[k][k], fp = 0, fn = 0;
    for (std::size_t o = 0; o < c; ++o) {
      if (o == k) continue;
      fp += r.confusion[o][k];
      fn += r.confusion[k][o];
    }
    const double pk = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double rk = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    prec += pk;
    rec += rk;
    f1 += pk + rk > 0.0 ? 2.0 * pk * rk / (pk + rk) : 0.0;

    std::vector<double> scores(b);
    std::vector<bool> pos(b);
    for (std::size_t i = 0; i < b; ++i) {
      scores[i] = probs[i][k];
      pos[i] = labels[i] == k;
    }
    r.roc.push_back(roc_curve(scores, pos));
    r.auc_per_class.push_back(trapezoid_auc(r.roc.back()));
    if (!std::isnan(r.auc_per_class.back())) {
      auc += r.auc_per_class.back();
      ++auc_n;
    }
  }
  const double cd = static_cast<double>(c);
  r.f1_macro = f1 / cd;
  r.precision_macro = prec / cd;
  r.recall_macro = rec / cd;
  r.auc_macro = auc_n ? auc / static_cast<double>(auc_n) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

inline MetricsReport evaluate(const Tensor& probs, const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2) throw DimensionError("evaluate: probabilities must be B×C");
  std::vector<std::vector<double>> rows(probs.dim(0));
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows[i].assign(probs.data().begin() + static_cast<std::ptrdiff_t>(i * probs.dim(1)),
                   probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * probs.dim(1)));
  return evaluate(rows, labels);
}

}  // namespace fedlora
