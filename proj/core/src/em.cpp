#include "mixcaps/em.hpp"

#include <cmath>
#include <ostream>

#include "mixcaps/ops.hpp"

#include <json.hpp>

namespace mixcaps {

namespace {

void validate_likelihoods(const Tensor& l) {
    if (l.rank() != 1) throw DimensionError("likelihoods must be a vector, got " + l.shape_str());
    for (std::int64_t i = 0; i < l.size(); ++i) {
        if (!(l[i] >= 0.0)) throw ContractError("likelihoods must be nonnegative and finite");
    }
}

void validate_simplex(const Tensor& g, const char* what) {
    if (g.rank() != 1) {
        throw DimensionError(std::string(what) + " must be a vector, got " + g.shape_str());
    }
    double sum = 0.0;
    for (std::int64_t i = 0; i < g.size(); ++i) {
        if (!(g[i] >= 0.0)) throw ContractError(std::string(what) + " must be nonnegative");
        sum += g[i];
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw ContractError(std::string(what) + " must sum to 1, got " + std::to_string(sum));
    }
}

Tensor normalized_product(const Tensor& prior, const Tensor& likelihoods) {
    if (!prior.same_shape(likelihoods)) {
        throw DimensionError("prior " + prior.shape_str() + " vs likelihoods " +
                             likelihoods.shape_str());
    }
    Tensor out(prior.shape());
    double denom = 0.0;
    for (std::int64_t i = 0; i < prior.size(); ++i) {
        out[i] = prior[i] * likelihoods[i];
        denom += out[i];
    }
    if (denom <= 0.0) {
        throw DegenerateLikelihoodError("all prior-weighted likelihoods are zero");
    }
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] /= denom;
    return out;
}

}  // namespace

Tensor em_posterior(const Tensor& g, const Tensor& likelihoods) {
    validate_simplex(g, "gate prior");
    validate_likelihoods(likelihoods);
    return normalized_product(g, likelihoods);
}

MMState mm_update(const MMState& state, const Tensor& likelihoods) {
    validate_simplex(state.weights, "model weights");
    validate_likelihoods(likelihoods);
    MMState next;
    next.weights = normalized_product(state.weights, likelihoods);
    next.step = state.step + 1;
    return next;
}

ResponsibilityRecord responsibility(int sample_id, int label, const Tensor& g,
                                    const std::vector<Tensor>& expert_lengths,
                                    LikelihoodMode mode) {
    const int m = static_cast<int>(expert_lengths.size());
    if (g.rank() != 1 || g.dim(0) != m) {
        throw DimensionError("gate weights " + g.shape_str() + " for " + std::to_string(m) +
                             " experts");
    }
    ResponsibilityRecord rec;
    rec.sample_id = sample_id;
    rec.label = label;
    rec.g = g;
    rec.likelihoods = Tensor({m});
    const int cls = (mode == LikelihoodMode::class_matched) ? label : 1;
    for (int i = 0; i < m; ++i) {
        const Tensor& o = expert_lengths[static_cast<std::size_t>(i)];
        if (cls < 0 || cls >= o.dim(0)) {
            throw ContractError("responsibility: class index " + std::to_string(cls) +
                                " out of range");
        }
        rec.likelihoods[i] = o[cls];
    }
    rec.posterior = em_posterior(g, rec.likelihoods);
    return rec;
}

MoeCorrespondenceReport routing_as_moe_report(const RoutingState& state) {
    MoeCorrespondenceReport report;
    const Tensor* prev_b = nullptr;
    const Tensor* prev_a = nullptr;
    for (std::size_t r = 0; r < state.rounds.size(); ++r) {
        const RoutingRound& round = state.rounds[r];
        RoutingRoundCheck check;
        check.round = static_cast<int>(r) + 1;

        const int n = round.couplings.dim(0), m = round.couplings.dim(1);
        for (int i = 0; i < n; ++i) {
            double sum = 0.0;
            for (int j = 0; j < m; ++j) sum += round.couplings(i, j);
            check.row_sum_dev = std::max(check.row_sum_dev, std::abs(sum - 1.0));
        }
        check.normalized = check.row_sum_dev < 1e-9;

        if (prev_b != nullptr) {
            Tensor replay_logits = *prev_b;
            for (std::int64_t k = 0; k < replay_logits.size(); ++k) {
                replay_logits[k] += (*prev_a)[k];
            }
            const Tensor replay = softmax(replay_logits, 1);
            check.replay_dev = max_abs_diff(replay, round.couplings);
            check.replay_ok = check.replay_dev < 1e-9;
        }
        report.pass = report.pass && check.normalized && check.replay_ok;
        report.rounds.push_back(check);
        prev_b = &round.b_start;
        prev_a = round.agreements.empty() ? nullptr : &round.agreements;
    }
    return report;
}

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
    nlohmann::json j = nlohmann::json::array();
    for (std::int64_t i = 0; i < t.size(); ++i) j.push_back(t[i]);
    return j;
}

}  // namespace

void write_report(std::ostream& os, int sample_id, const MoeCorrespondenceReport& report,
                  const RoutingState& state) {
    for (std::size_t r = 0; r < report.rounds.size(); ++r) {
        const RoutingRoundCheck& check = report.rounds[r];
        nlohmann::json j;
        j["record"] = "routing_round";
        j["sample"] = sample_id;
        j["round"] = check.round;
        j["row_sum_dev"] = check.row_sum_dev;
        j["replay_dev"] = check.replay_dev;
        j["normalized"] = check.normalized;
        j["replay_ok"] = check.replay_ok;
        j["couplings"] = tensor_to_json(state.rounds[r].couplings);
        os << j.dump() << '\n';
    }
}

void write_record(std::ostream& os, const ResponsibilityRecord& record) {
    nlohmann::json j;
    j["record"] = "responsibility";
    j["sample"] = record.sample_id;
    j["label"] = record.label;
    j["g"] = tensor_to_json(record.g);
    j["likelihoods"] = tensor_to_json(record.likelihoods);
    j["posterior"] = tensor_to_json(record.posterior);
    os << j.dump() << '\n';
}

}  // namespace mixcaps
