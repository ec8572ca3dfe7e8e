#pragma once

// Classification and regression scores. Pure functions over plain vectors.

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

namespace pomni {

/// Mean recall over the classes present in `labels`.
double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

/// (p_o - p_e) / (1 - p_e), expected agreement from the marginals.
/// Returns 1 when p_e == 1 and the predictions agree, 0 otherwise.
double cohens_kappa(const std::vector<int>& preds, const std::vector<int>& labels);

/// Per-class F1 weighted by label support. 0/0 precision or recall counts as 0.
double weighted_f1(const std::vector<int>& preds, const std::vector<int>& labels);

/// Area under the ROC curve by the trapezoid rule, tied scores grouped into
/// one threshold. labels are 0/1; both classes must be present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Step-wise precision-recall area: sum over thresholds of
/// (R_i - R_{i-1}) P_i, tied scores grouped. Positives must be present.
double auc_pr(const std::vector<double>& scores, const std::vector<int>& labels);

/// Rows are samples, columns are outputs; each metric is averaged over outputs.
double rmse(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets);
/// 0 for an output where either side has zero variance.
double pearson(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets);
/// 1 - SS_res / SS_tot per output. A constant target gives 1 if matched exactly, else 0.
double r_squared(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets);

enum class TaskKind { Binary, MultiClass, Regression };

struct MetricsReport {
  TaskKind kind = TaskKind::MultiClass;
  std::map<std::string, double> values;

  /// Monitor metric for model selection: AUROC, kappa or R^2.
  double monitor() const;
  static const char* monitor_name(TaskKind kind);
  /// "key = value" lines in key order.
  std::string text() const;
};

/// Binary: `scores` is the positive-class probability per sample.
MetricsReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels);
MetricsReport multiclass_report(const std::vector<int>& preds, const std::vector<int>& labels);
MetricsReport regression_report(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& targets);

}  // namespace pomni
