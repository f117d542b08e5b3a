#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixcaps/errors.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

struct BlockCheck {
    std::string name;
    std::int64_t entries_checked = 0;
    std::int64_t refined_entries = 0;  // rescued by shrinking h (kink straddles)
    std::int64_t worst_index = -1;
    double worst_rel_err = 0.0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<BlockCheck> blocks;
    double h = 0.0;
    double tol = 0.0;

    bool pass() const {
        for (const auto& b : blocks) {
            if (!b.pass) return false;
        }
        return true;
    }

    std::int64_t refined_entries() const {
        std::int64_t n = 0;
        for (const auto& b : blocks) n += b.refined_entries;
        return n;
    }

    std::string summary() const {
        std::ostringstream os;
        for (const auto& b : blocks) {
            os << (b.pass ? "ok   " : "FAIL ") << b.name << "  worst_rel_err=" << b.worst_rel_err
               << " (analytic=" << b.analytic_at_worst << ", numeric=" << b.numeric_at_worst
               << ", entry=" << b.worst_index << ", checked=" << b.entries_checked;
            if (b.refined_entries > 0) os << ", refined=" << b.refined_entries;
            os << ")\n";
        }
        return os.str();
    }
};

// Central-difference check of analytic gradients.
//   loss_fn  — recomputes the scalar loss for the current parameter values.
//   grad_fn  — recomputes analytic gradients, one tensor per block, aligned
//              with `params`.
//   params   — named parameter blocks, mutated in place during probing and
//              restored afterwards.
// Entries per block can be capped (deterministic even subsample); pass -1 to
// check every entry. Relative error uses a 1e-6 floor so exact-zero
// gradients compare cleanly.
//
// An entry whose probe window [theta-h, theta+h] straddles a hinge (relu,
// margin) makes the central difference meaningless there. Entries that fail
// at h are therefore re-probed at h/4, h/16 and h/64; a kink artifact
// converges onto the analytic value, a genuinely wrong gradient never does.
// Rescued entries are counted per block as refined_entries.
inline GradCheckReport check_gradients(
    const std::function<double()>& loss_fn, const std::function<std::vector<Tensor>()>& grad_fn,
    const std::vector<std::pair<std::string, Tensor*>>& params, double h, double tol,
    std::int64_t max_entries_per_block = -1) {
    if (h <= 0.0) throw ContractError("check_gradients: h must be positive");
    GradCheckReport report;
    report.h = h;
    report.tol = tol;
    const std::vector<Tensor> analytic = grad_fn();
    if (analytic.size() != params.size()) {
        throw ContractError("check_gradients: grad_fn returned " +
                            std::to_string(analytic.size()) + " blocks for " +
                            std::to_string(params.size()) + " parameters");
    }
    const auto central_fd = [&](Tensor& theta, std::int64_t idx, double step) {
        const double saved = theta[idx];
        theta[idx] = saved + step;
        const double lp = loss_fn();
        theta[idx] = saved - step;
        const double lm = loss_fn();
        theta[idx] = saved;
        return (lp - lm) / (2.0 * step);
    };
    const auto rel_err = [](double a, double numeric) {
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        return std::abs(a - numeric) / denom;
    };
    for (std::size_t bi = 0; bi < params.size(); ++bi) {
        Tensor& theta = *params[bi].second;
        const Tensor& ga = analytic[bi];
        if (!ga.same_shape(theta)) {
            throw DimensionError("check_gradients: gradient for " + params[bi].first +
                                 " has shape " + ga.shape_str() + ", parameter has " +
                                 theta.shape_str());
        }
        BlockCheck check;
        check.name = params[bi].first;
        const std::int64_t n = theta.size();
        const std::int64_t todo =
            (max_entries_per_block > 0 && max_entries_per_block < n) ? max_entries_per_block : n;
        for (std::int64_t k = 0; k < todo; ++k) {
            const std::int64_t idx = (todo == n) ? k : (k * n) / todo;
            const double a = ga[idx];
            double numeric = central_fd(theta, idx, h);
            double rel = rel_err(a, numeric);
            if (rel >= tol) {
                for (const double shrink : {4.0, 16.0, 64.0}) {
                    const double refined = central_fd(theta, idx, h / shrink);
                    if (rel_err(a, refined) < tol) {
                        numeric = refined;
                        rel = rel_err(a, refined);
                        ++check.refined_entries;
                        break;
                    }
                }
            }
            if (rel > check.worst_rel_err || check.worst_index < 0) {
                check.worst_rel_err = rel;
                check.worst_index = idx;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
            ++check.entries_checked;
        }
        check.pass = check.worst_rel_err < tol;
        report.blocks.push_back(std::move(check));
    }
    return report;
}

}  // namespace mixcaps
