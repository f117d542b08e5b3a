#include <doctest.h>

#include <cmath>

#include "mixcaps/gate.hpp"

#include "test_util.hpp"

using namespace mixcaps;

namespace {

GateConfig tiny_gate(int experts = 2) {
    GateConfig c;
    c.input_hw = 12;
    c.conv_filters = 2;
    c.kernel = 3;
    c.stride = 3;
    c.fc1_units = 4;
    c.num_experts = experts;
    return c;
}

ExpertConfig tiny_expert() {
    ExpertConfig c;
    c.input_hw = 12;
    c.conv1_filters = 4;
    c.conv2_filters = 8;
    c.kernel = 3;
    c.stride1 = 2;
    c.stride2 = 2;
    c.primary_capsule_dim = 4;
    c.class_capsule_dim = 6;
    return c;
}

}  // namespace

TEST_CASE("fresh gates are exactly uniform") {
    Rng rng(41);
    GateNetwork gate(tiny_gate(3), rng);  // fc2 zero-initialized
    Tape tape;
    const auto staged = gate.stage(tape);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    const auto out = gate.forward(tape, staged, patch);
    for (int i = 0; i < 3; ++i) CHECK(out.g.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(out.pre_activations.value()[0] == 0.0);
}

TEST_CASE("gate weights are positive and sum to one for any parameters") {
    Rng rng(42);
    for (int trial = 0; trial < 10; ++trial) {
        GateNetwork gate(tiny_gate(), rng);
        fill_uniform(gate.fc2_w, rng, -1.0, 1.0);
        fill_uniform(gate.fc2_b, rng, -1.0, 1.0);
        Tape tape;
        const auto staged = gate.stage(tape);
        const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
        const auto out = gate.forward(tape, staged, patch);
        double sum = 0.0;
        for (int i = 0; i < 2; ++i) {
            CHECK(out.g.value()[i] > 0.0);
            sum += out.g.value()[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("gate forward is deterministic for a fixed seed") {
    Rng pa(43), pb(43), pr(99);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, pr, 0.0, 1.0);
    GateNetwork ga(tiny_gate(), pa), gb(tiny_gate(), pb);
    fill_uniform(ga.fc2_w, pa, -1.0, 1.0);
    fill_uniform(gb.fc2_w, pb, -1.0, 1.0);
    Tape ta, tb;
    const auto oa = ga.forward(ta, ga.stage(ta), patch);
    const auto ob = gb.forward(tb, gb.stage(tb), patch);
    for (int i = 0; i < 2; ++i) CHECK(oa.g.value()[i] == ob.g.value()[i]);
}

TEST_CASE("mix with a one-hot gate returns that expert exactly") {
    const std::vector<Tensor> outputs = {Tensor({2}, {0.3, 0.8}), Tensor({2}, {0.5, 0.1})};
    const Tensor g({2}, {1.0, 0.0});
    const Tensor o = mix(outputs, g);
    CHECK(o[0] == 0.3);
    CHECK(o[1] == 0.8);
}

TEST_CASE("mix of identical outputs is that output for any gate") {
    Rng rng(44);
    const Tensor v({2}, {0.4, 0.6});
    for (int trial = 0; trial < 10; ++trial) {
        const double g1 = rng.uniform(0.0, 1.0);
        const Tensor g({2}, {g1, 1.0 - g1});
        const Tensor o = mix({v, v}, g);
        CHECK(o[0] == doctest::Approx(0.4).epsilon(1e-15));
        CHECK(o[1] == doctest::Approx(0.6).epsilon(1e-15));
    }
}

TEST_CASE("mixed output stays in the componentwise convex hull") {
    Rng rng(45);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_index(3));
        std::vector<Tensor> outputs;
        for (int i = 0; i < m; ++i) outputs.push_back(testutil::random_tensor({2}, rng, 0.0, 1.0));
        Tensor logits = testutil::random_tensor({m}, rng, -2.0, 2.0);
        const Tensor g = softmax(logits, 0);
        const Tensor o = mix(outputs, g);
        for (int k = 0; k < 2; ++k) {
            double lo = 1e9, hi = -1e9;
            for (int i = 0; i < m; ++i) {
                lo = std::min(lo, outputs[i][k]);
                hi = std::max(hi, outputs[i][k]);
            }
            CHECK(o[k] >= lo - 1e-12);
            CHECK(o[k] <= hi + 1e-12);
        }
    }
}

TEST_CASE("mix is linear in each expert output for a fixed gate") {
    Rng rng(46);
    const Tensor g = softmax(testutil::random_tensor({2}, rng), 0);
    const Tensor a = testutil::random_tensor({2}, rng, 0.0, 1.0);
    const Tensor b = testutil::random_tensor({2}, rng, 0.0, 1.0);
    const Tensor o2 = testutil::random_tensor({2}, rng, 0.0, 1.0);
    for (const double alpha : {0.0, 0.25, 0.5, 0.9, 1.0}) {
        Tensor blend_in({2});
        for (int k = 0; k < 2; ++k) blend_in[k] = alpha * a[k] + (1.0 - alpha) * b[k];
        const Tensor lhs = mix({blend_in, o2}, g);
        const Tensor ma = mix({a, o2}, g);
        const Tensor mb = mix({b, o2}, g);
        for (int k = 0; k < 2; ++k) {
            CHECK(std::abs(lhs[k] - (alpha * ma[k] + (1.0 - alpha) * mb[k])) < 1e-15);
        }
    }
}

TEST_CASE("mix validates shape agreement") {
    CHECK_THROWS_AS(mix({Tensor({2}), Tensor({2})}, Tensor({3})), DimensionError);
    CHECK_THROWS_AS(mix({Tensor({2}), Tensor({3})}, Tensor({2}, {0.5, 0.5})), DimensionError);
}

TEST_CASE("a single-expert mixture degenerates to that expert") {
    Rng rng(47);
    MixcapsModel model(tiny_expert(), tiny_gate(1), 7);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    const auto inf = model.infer(patch);
    CHECK(inf.g[0] == doctest::Approx(1.0).epsilon(1e-15));

    const CapsuleExpert expert = model.expert(0);
    Tape tape;
    const auto out = expert.forward(tape, expert.stage(tape), patch);
    for (int k = 0; k < 2; ++k) CHECK(std::abs(inf.o[k] - out.lengths.value()[k]) < 1e-12);
}

TEST_CASE("identical experts make the blend gate-independent") {
    Rng rng(48);
    MixcapsModel model(tiny_expert(), tiny_gate(2), 11);
    model.expert(1) = model.expert(0);
    fill_uniform(model.gate().fc2_w, rng, -1.0, 1.0);  // non-uniform gate
    model.gate().fc2_b = Tensor({2}, {0.4, -0.3});
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    const auto inf = model.infer(patch);
    for (int k = 0; k < 2; ++k) {
        CHECK(std::abs(inf.o[k] - inf.expert_lengths[0][k]) < 1e-12);
    }
    CHECK(std::abs(inf.g[0] - 0.5) > 1e-6);  // the gate really was non-trivial
}

TEST_CASE("blended output stays in [0,1) and matches mixing by hand") {
    Rng rng(49);
    MixcapsModel model(tiny_expert(), tiny_gate(2), 13);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    const auto inf = model.infer(patch);
    for (int k = 0; k < 2; ++k) {
        CHECK(inf.o[k] >= 0.0);
        CHECK(inf.o[k] < 1.0);
        const double by_hand =
            inf.g[0] * inf.expert_lengths[0][k] + inf.g[1] * inf.expert_lengths[1][k];
        CHECK(std::abs(inf.o[k] - by_hand) < 1e-12);
    }
}

TEST_CASE("end-to-end mixture forward is reproducible") {
    Rng rng(50);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    MixcapsModel a(tiny_expert(), tiny_gate(2), 99);
    MixcapsModel b(tiny_expert(), tiny_gate(2), 99);
    const auto ia = a.infer(patch);
    const auto ib = b.infer(patch);
    for (int k = 0; k < 2; ++k) CHECK(ia.o[k] == ib.o[k]);
    for (int i = 0; i < 2; ++i) CHECK(ia.g[i] == ib.g[i]);
}

TEST_CASE("one-hot gate reduces the mixture loss to that expert's margin loss") {
    const Tensor o1({2}, {0.3, 0.8});
    const Tensor o2({2}, {0.6, 0.2});
    const Tensor target({2}, {0.0, 1.0});
    const Tensor g({2}, {1.0, 0.0});
    CHECK(margin_loss(mix({o1, o2}, g), target) == margin_loss(o1, target));
}

TEST_CASE("loss gradient w.r.t. gate parameters matches finite differences") {
    Rng rng(51);
    GateNetwork gate(tiny_gate(), rng);
    fill_uniform(gate.fc2_w, rng, -0.5, 0.5);
    fill_uniform(gate.fc2_b, rng, -0.2, 0.2);
    const Tensor patch = testutil::random_tensor({12, 12, 3}, rng, 0.0, 1.0);
    const Tensor o1({2}, {0.35, 0.75});
    const Tensor o2({2}, {0.6, 0.25});
    const Tensor target({2}, {1.0, 0.0});

    auto params = gate.parameters();
    std::vector<Tensor*> blocks;
    for (auto& [name, t] : params) blocks.push_back(t);
    auto report = testutil::fd_check(blocks, [&](Tape& t, const std::vector<Var>& p) {
        GateNetwork::Staged staged{p[0], p[1], p[2], p[3], p[4], p[5]};
        const auto out = gate.forward(t, staged, patch);
        Var e1 = t.leaf(o1);
        Var e2 = t.leaf(o2);
        return margin_loss(mix({e1, e2}, out.g), target);
    });
    CHECK_MESSAGE(report.pass(), report.summary());
}

TEST_CASE("gate config validation") {
    GateConfig c = tiny_gate();
    c.num_experts = 1;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c.validate(true);  // degenerate allowed for baselines
    c = tiny_gate();
    c.kernel = 20;
    CHECK_THROWS_AS(c.validate(), DimensionError);
}
