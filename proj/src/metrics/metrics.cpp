#include "pomni/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pomni {

namespace {

void check_pairs(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a) + " predictions vs " +
                                std::to_string(b) + " labels");
  }
  if (a == 0) throw std::invalid_argument(std::string(what) + ": no samples");
}

struct Confusion {
  int classes = 0;
  Eigen::MatrixXd m;  // rows: label, cols: prediction

  Confusion(const std::vector<int>& preds, const std::vector<int>& labels) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] < 0 || labels[i] < 0) throw std::invalid_argument("metrics: negative class index");
      classes = std::max({classes, preds[i] + 1, labels[i] + 1});
    }
    m = Eigen::MatrixXd::Zero(classes, classes);
    for (std::size_t i = 0; i < preds.size(); ++i) m(labels[i], preds[i]) += 1.0;
  }
};

// Cumulative (tp, fp) after each distinct threshold, scores descending.
std::vector<std::pair<double, double>> threshold_counts(const std::vector<double>& scores,
                                                        const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::pair<double, double>> out;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (labels[order[i]] != 0 && labels[order[i]] != 1) throw std::invalid_argument("metrics: binary labels must be 0/1");
    if (!std::isfinite(scores[order[i]])) throw std::invalid_argument("metrics: non-finite score");
    (labels[order[i]] == 1 ? tp : fp) += 1.0;
    if (i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]]) out.emplace_back(tp, fp);
  }
  return out;
}

template <typename F>
double per_output_mean(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets, const char* what, F f) {
  if (preds.rows() != targets.rows() || preds.cols() != targets.cols()) {
    throw std::invalid_argument(std::string(what) + ": prediction and target shapes differ");
  }
  if (preds.rows() == 0 || preds.cols() == 0) throw std::invalid_argument(std::string(what) + ": no samples");
  double total = 0.0;
  for (Eigen::Index c = 0; c < preds.cols(); ++c) total += f(preds.col(c), targets.col(c));
  return total / static_cast<double>(preds.cols());
}

}  // namespace

double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_pairs(preds.size(), labels.size(), "balanced_accuracy");
  const Confusion c(preds, labels);
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < c.classes; ++k) {
    const double support = c.m.row(k).sum();
    if (support == 0.0) continue;
    sum += c.m(k, k) / support;
    ++present;
  }
  return sum / present;
}

double cohens_kappa(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_pairs(preds.size(), labels.size(), "cohens_kappa");
  const Confusion c(preds, labels);
  const double n = c.m.sum();
  const double po = c.m.trace() / n;
  const double pe = c.m.rowwise().sum().dot(c.m.colwise().sum().transpose()) / (n * n);
  if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

double weighted_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_pairs(preds.size(), labels.size(), "weighted_f1");
  const Confusion c(preds, labels);
  double total = 0.0;
  for (int k = 0; k < c.classes; ++k) {
    const double support = c.m.row(k).sum();
    if (support == 0.0) continue;
    const double predicted = c.m.col(k).sum();
    const double tp = c.m(k, k);
    const double precision = predicted > 0.0 ? tp / predicted : 0.0;
    const double recall = tp / support;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    total += support * f1;
  }
  return total / c.m.sum();
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_pairs(scores.size(), labels.size(), "auroc");
  const auto pts = threshold_counts(scores, labels);
  const double pos = pts.back().first, neg = pts.back().second;
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("auroc: both classes must be present");
  double area = 0.0, tp0 = 0.0, fp0 = 0.0;
  for (const auto& [tp, fp] : pts) {
    area += (fp - fp0) * (tp + tp0) / 2.0;
    tp0 = tp;
    fp0 = fp;
  }
  return area / (pos * neg);
}

double auc_pr(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_pairs(scores.size(), labels.size(), "auc_pr");
  const auto pts = threshold_counts(scores, labels);
  const double pos = pts.back().first;
  if (pos == 0.0) throw std::invalid_argument("auc_pr: no positive labels");
  double area = 0.0, recall0 = 0.0;
  for (const auto& [tp, fp] : pts) {
    const double recall = tp / pos;
    area += (recall - recall0) * tp / (tp + fp);
    recall0 = recall;
  }
  return area;
}

double rmse(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets) {
  return per_output_mean(preds, targets, "rmse", [](const auto& p, const auto& t) {
    return std::sqrt((p - t).squaredNorm() / static_cast<double>(p.size()));
  });
}

double pearson(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets) {
  return per_output_mean(preds, targets, "pearson", [](const auto& p, const auto& t) {
    const Eigen::VectorXd a = p.array() - p.mean();
    const Eigen::VectorXd b = t.array() - t.mean();
    const double den = a.norm() * b.norm();
    return den > 0.0 ? a.dot(b) / den : 0.0;
  });
}

double r_squared(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets) {
  return per_output_mean(preds, targets, "r_squared", [](const auto& p, const auto& t) {
    const double res = (p - t).squaredNorm();
    const double tot = (t.array() - t.mean()).matrix().squaredNorm();
    if (tot == 0.0) return res == 0.0 ? 1.0 : 0.0;
    return 1.0 - res / tot;
  });
}

const char* MetricsReport::monitor_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Binary:
      return "auroc";
    case TaskKind::MultiClass:
      return "kappa";
    case TaskKind::Regression:
      return "r2";
  }
  return "";
}

double MetricsReport::monitor() const { return values.at(monitor_name(kind)); }

std::string MetricsReport::text() const {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  for (const auto& [k, v] : values) os << k << " = " << v << "\n";
  return os.str();
}

MetricsReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels) {
  MetricsReport r;
  r.kind = TaskKind::Binary;
  std::vector<int> preds(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= 0.5 ? 1 : 0;
  r.values["balanced_accuracy"] = balanced_accuracy(preds, labels);
  r.values["auroc"] = auroc(scores, labels);
  r.values["auc_pr"] = auc_pr(scores, labels);
  return r;
}

MetricsReport multiclass_report(const std::vector<int>& preds, const std::vector<int>& labels) {
  MetricsReport r;
  r.kind = TaskKind::MultiClass;
  r.values["balanced_accuracy"] = balanced_accuracy(preds, labels);
  r.values["kappa"] = cohens_kappa(preds, labels);
  r.values["weighted_f1"] = weighted_f1(preds, labels);
  return r;
}

MetricsReport regression_report(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets) {
  MetricsReport r;
  r.kind = TaskKind::Regression;
  r.values["rmse"] = rmse(preds, targets);
  r.values["pearson"] = pearson(preds, targets);
  r.values["r2"] = r_squared(preds, targets);
  return r;
}

}  // namespace pomni
