#pragma once

#include <vector>

#include "mixcaps/tensor.hpp"

namespace mixcaps {

struct Metrics {
    double accuracy = 0.0;
    double sensitivity = 0.0;  // TP / (TP + FN), malignant class
    double specificity = 0.0;  // TN / (TN + FP), benign class
    double auc = 0.0;
};

struct RocPoint {
    double threshold = 0.0;  // score >= threshold predicts malignant
    double fpr = 0.0;
    double tpr = 0.0;
};

// ROC of a malignancy score: one point per distinct score value plus the
// (0,0) endpoint, thresholds descending. Requires both classes present.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels);

// Trapezoidal area under the ROC; ties contribute half, so it equals the
// pairwise concordance probability.
double auc_trapezoid(const std::vector<double>& scores, const std::vector<int>& labels);

// Confusion metrics at `threshold` (score >= threshold predicts malignant)
// plus the trapezoid AUC.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                        double threshold = 0.5);

// Accuracy of the ROC operating point whose threshold equals `threshold`.
double roc_accuracy_at(const std::vector<RocPoint>& roc, double threshold, int positives,
                       int negatives, int total);

// Linear-interpolated quantile of a sample (q in [0, 1]).
double percentile(std::vector<double> values, double q);

struct Pearson {
    double r = 0.0;
    bool defined = false;  // false when either side has zero variance
    int n = 0;
};

Pearson pearson_correlation(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace mixcaps
