#include <doctest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "mixcaps/em.hpp"

#include "test_util.hpp"

using namespace mixcaps;

namespace {

Tensor random_simplex(int m, Rng& rng) {
    Tensor g({m});
    double sum = 0.0;
    for (int i = 0; i < m; ++i) {
        g[i] = rng.uniform(0.01, 1.0);
        sum += g[i];
    }
    for (int i = 0; i < m; ++i) g[i] /= sum;
    return g;
}

}  // namespace

TEST_CASE("uniform prior and uniform likelihood give a uniform posterior") {
    const Tensor g = Tensor::full({4}, 0.25);
    const Tensor l = Tensor::full({4}, 0.7);
    const Tensor p = em_posterior(g, l);
    for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("a degenerate prior forces a degenerate posterior") {
    const Tensor g({2}, {1.0, 0.0});
    const Tensor l({2}, {0.4, 0.9});
    const Tensor p = em_posterior(g, l);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == 0.0);
}

TEST_CASE("three-expert posterior matches explicit normalization") {
    Rng rng(61);
    const Tensor g = random_simplex(3, rng);
    const Tensor l({3}, {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)});
    const Tensor p = em_posterior(g, l);
    const double denom = g[0] * l[0] + g[1] * l[1] + g[2] * l[2];
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(g[i] * l[i] / denom).epsilon(1e-14));
}

TEST_CASE("posterior is scale invariant in the likelihoods") {
    Rng rng(62);
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_index(4));
        const Tensor g = random_simplex(m, rng);
        Tensor l({m});
        for (int i = 0; i < m; ++i) l[i] = rng.uniform(0.01, 1.0);
        const double t = rng.uniform(0.1, 50.0);
        Tensor lt = l;
        for (int i = 0; i < m; ++i) lt[i] *= t;
        CHECK(max_abs_diff(em_posterior(g, l), em_posterior(g, lt)) < 1e-12);
    }
}

TEST_CASE("posterior components form a probability vector") {
    Rng rng(63);
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_index(5));
        const Tensor g = random_simplex(m, rng);
        Tensor l({m});
        for (int i = 0; i < m; ++i) l[i] = rng.uniform(0.0, 1.0) * rng.bernoulli(0.9);
        double weighted = 0.0;
        for (int i = 0; i < m; ++i) weighted += g[i] * l[i];
        if (weighted == 0.0) continue;
        const Tensor p = em_posterior(g, l);
        double sum = 0.0;
        for (int i = 0; i < m; ++i) {
            CHECK(p[i] >= 0.0);
            sum += p[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("em_posterior rejects bad inputs") {
    CHECK_THROWS_AS(em_posterior(Tensor({2}, {0.9, 0.3}), Tensor({2}, {1.0, 1.0})),
                    ContractError);
    CHECK_THROWS_AS(em_posterior(Tensor({2}, {0.5, 0.5}), Tensor({2}, {-0.1, 0.5})),
                    ContractError);
    CHECK_THROWS_AS(em_posterior(Tensor({2}, {0.5, 0.5}), Tensor({2}, {0.0, 0.0})),
                    DegenerateLikelihoodError);
    CHECK_THROWS_AS(em_posterior(Tensor({2}, {1.0, 0.0}), Tensor({2}, {0.0, 0.7})),
                    DegenerateLikelihoodError);
}

TEST_CASE("equal likelihoods leave multiple-model weights unchanged") {
    MMState st{Tensor::full({3}, 1.0 / 3), 0};
    const MMState next = mm_update(st, Tensor::full({3}, 0.42));
    for (int i = 0; i < 3; ++i) CHECK(next.weights[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(next.step == 1);
}

TEST_CASE("constant evidence drives the favored weight monotonically to one") {
    MMState st{Tensor({2}, {0.5, 0.5}), 0};
    const Tensor l({2}, {0.9, 0.1});
    double prev = 0.5;
    for (int k = 0; k < 12; ++k) {
        st = mm_update(st, l);
        CHECK(st.weights[0] > prev);
        prev = st.weights[0];
    }
    CHECK(prev > 0.999);
    CHECK(st.step == 12);
}

TEST_CASE("sequential updates equal the single-shot product-form posterior") {
    Rng rng(64);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 3;
        const int steps = 1 + static_cast<int>(rng.uniform_index(20));
        const Tensor prior = random_simplex(m, rng);
        MMState st{prior, 0};
        std::vector<double> log_product(m, 0.0);
        for (int k = 0; k < steps; ++k) {
            Tensor l({m});
            for (int i = 0; i < m; ++i) l[i] = rng.uniform(0.05, 1.0);
            st = mm_update(st, l);
            for (int i = 0; i < m; ++i) log_product[i] += std::log(l[i]);
        }
        // Closed form: w_i proportional to prior_i * prod_k L_i^k.
        Tensor expectation({m});
        double denom = 0.0;
        for (int i = 0; i < m; ++i) {
            expectation[i] = prior[i] * std::exp(log_product[i]);
            denom += expectation[i];
        }
        for (int i = 0; i < m; ++i) expectation[i] /= denom;
        CHECK(max_abs_diff(st.weights, expectation) < 1e-10);
        CHECK(st.step == steps);
    }
}

TEST_CASE("responsibility picks the class-matched or malignant likelihood") {
    const Tensor g({2}, {0.5, 0.5});
    const std::vector<Tensor> lengths = {Tensor({2}, {0.7, 0.2}), Tensor({2}, {0.1, 0.8})};
    const auto matched = responsibility(0, 0, g, lengths, LikelihoodMode::class_matched);
    CHECK(matched.likelihoods[0] == 0.7);
    CHECK(matched.likelihoods[1] == 0.1);
    const auto malignant = responsibility(0, 0, g, lengths, LikelihoodMode::malignant_output);
    CHECK(malignant.likelihoods[0] == 0.2);
    CHECK(malignant.likelihoods[1] == 0.8);
    double sum = 0.0;
    for (int i = 0; i < 2; ++i) sum += matched.posterior[i];
    CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("routing reports verify normalization and prior-to-posterior replay") {
    Rng rng(65);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(3));
        const int m = 2 + static_cast<int>(rng.uniform_index(3));
        const Tensor u_hat = testutil::random_tensor({n, m, 3}, rng, -1.5, 1.5);
        const RoutingState st = route(u_hat, 3);
        const MoeCorrespondenceReport report = routing_as_moe_report(st);
        CHECK(report.pass);
        REQUIRE(report.rounds.size() == 3);
        for (const RoutingRoundCheck& check : report.rounds) {
            CHECK(check.row_sum_dev < 1e-9);
            CHECK(check.replay_dev < 1e-12);
        }
    }
}

TEST_CASE("one-round routing couplings are the zero-logit softmax") {
    Rng rng(66);
    const Tensor u_hat = testutil::random_tensor({3, 4, 2}, rng);
    const RoutingState st = route(u_hat, 1);
    const MoeCorrespondenceReport report = routing_as_moe_report(st);
    CHECK(report.pass);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(st.couplings(i, j) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("analysis records serialize as parseable JSON lines") {
    Rng rng(67);
    const Tensor u_hat = testutil::random_tensor({2, 2, 2}, rng);
    const RoutingState st = route(u_hat, 2);
    std::ostringstream os;
    write_report(os, 7, routing_as_moe_report(st), st);
    const auto rec = responsibility(7, 1, Tensor({2}, {0.6, 0.4}),
                                    {Tensor({2}, {0.7, 0.2}), Tensor({2}, {0.1, 0.8})});
    write_record(os, rec);
    std::istringstream is(os.str());
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("record"));
        CHECK(j.contains("sample"));
        ++lines;
    }
    CHECK(lines == 3);  // two rounds plus one responsibility record
}
