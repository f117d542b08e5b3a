#include "mixcaps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mixcaps/errors.hpp"

namespace mixcaps {

namespace {

void validate_scores(const std::vector<double>& scores, const std::vector<int>& labels, int& pos,
                     int& neg) {
    if (scores.size() != labels.size()) {
        throw DimensionError("scores/labels length mismatch: " + std::to_string(scores.size()) +
                             " vs " + std::to_string(labels.size()));
    }
    if (scores.empty()) throw ContractError("metrics need at least one sample");
    pos = neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ContractError("labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw NumericError("scores must be finite");
        labels[i] == 1 ? ++pos : ++neg;
    }
    if (pos == 0) throw ContractError("test set contains no malignant samples");
    if (neg == 0) throw ContractError("test set contains no benign samples");
}

}  // namespace

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    int pos = 0, neg = 0;
    validate_scores(scores, labels, pos, neg);

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });

    std::vector<RocPoint> roc;
    roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    int tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        // Consume the whole tie group before emitting a point, so ties move
        // diagonally and earn half credit in the trapezoid.
        while (i < order.size() && scores[order[i]] == s) {
            labels[order[i]] == 1 ? ++tp : ++fp;
            ++i;
        }
        roc.push_back({s, static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
    }
    return roc;
}

double auc_trapezoid(const std::vector<double>& scores, const std::vector<int>& labels) {
    const std::vector<RocPoint> roc = roc_curve(scores, labels);
    double area = 0.0;
    for (std::size_t i = 1; i < roc.size(); ++i) {
        area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
    }
    return area;
}

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                        double threshold) {
    int pos = 0, neg = 0;
    validate_scores(scores, labels, pos, neg);
    int tp = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted_malignant = scores[i] >= threshold;
        if (labels[i] == 1 && predicted_malignant) ++tp;
        if (labels[i] == 0 && !predicted_malignant) ++tn;
    }
    Metrics m;
    m.sensitivity = static_cast<double>(tp) / pos;
    m.specificity = static_cast<double>(tn) / neg;
    m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    m.auc = auc_trapezoid(scores, labels);
    return m;
}

double roc_accuracy_at(const std::vector<RocPoint>& roc, double threshold, int positives,
                       int negatives, int total) {
    // The operating point of `score >= threshold` is the deepest curve point
    // whose threshold is still >= it.
    const RocPoint* op = &roc.front();
    for (const RocPoint& p : roc) {
        if (p.threshold >= threshold) op = &p;
    }
    return (op->tpr * positives + (1.0 - op->fpr) * negatives) / total;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("percentile of empty sample");
    if (q < 0.0 || q > 1.0) throw ContractError("percentile q must be in [0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

Pearson pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) {
        throw DimensionError("pearson_correlation length mismatch: " + std::to_string(x.size()) +
                             " vs " + std::to_string(y.size()));
    }
    Pearson p;
    p.n = static_cast<int>(x.size());
    if (p.n < 2) return p;
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < p.n; ++i) {
        mx += x[static_cast<std::size_t>(i)];
        my += y[static_cast<std::size_t>(i)];
    }
    mx /= p.n;
    my /= p.n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i < p.n; ++i) {
        const double dx = x[static_cast<std::size_t>(i)] - mx;
        const double dy = y[static_cast<std::size_t>(i)] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return p;  // undefined-correlation flag stays false
    p.defined = true;
    p.r = sxy / std::sqrt(sxx * syy);
    return p;
}

}  // namespace mixcaps
