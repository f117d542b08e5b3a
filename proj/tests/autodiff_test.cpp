#include <doctest.h>

#include <cmath>
#include <limits>

#include "mixcaps/ops.hpp"
#include "mixcaps/tape.hpp"

#include "test_util.hpp"

using namespace mixcaps;

TEST_CASE("gradient of sum is all ones") {
    Tape tape;
    Rng rng(1);
    Var p = tape.leaf(testutil::random_tensor({3, 2}, rng));
    Var loss = sum_all(p);
    tape.backward(loss);
    const Tensor g = tape.gradient(p);
    for (int i = 0; i < g.size(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("parameters disconnected from the loss get exact zeros") {
    Tape tape;
    Rng rng(2);
    Var used = tape.leaf(testutil::random_tensor({4}, rng));
    Var unused = tape.leaf(testutil::random_tensor({5}, rng));
    Var loss = sum_all(used);
    tape.backward(loss);
    const Tensor g = tape.gradient(unused);
    CHECK(g.size() == 5);
    for (int i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward requires a scalar loss on this tape") {
    Tape tape;
    Var v = tape.leaf(Tensor({3}));
    CHECK_THROWS_AS(tape.backward(v), ContractError);

    Tape other;
    Var w = other.leaf(Tensor::scalar(1.0));
    CHECK_THROWS_AS(tape.backward(w), ContractError);
    CHECK_THROWS_AS(tape.gradient(v), ContractError);  // no sweep ran
}

TEST_CASE("non-finite op results are rejected at emission") {
    Tape tape;
    Var v = tape.leaf(Tensor({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(scale(v, std::numeric_limits<double>::infinity()), NumericError);
}

// Finite differences against every taped operation, random small shapes.
TEST_CASE("op gradients match central finite differences") {
    Rng rng(42);

    SUBCASE("matmul") {
        Tensor a = testutil::random_tensor({3, 4}, rng);
        Tensor b = testutil::random_tensor({4, 2}, rng);
        const Tensor w = testutil::random_tensor({3, 2}, rng);
        auto report = testutil::fd_check({&a, &b}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(matmul(p[0], p[1]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("conv2d") {
        Tensor in = testutil::random_tensor({6, 6, 2}, rng);
        Tensor f = testutil::random_tensor({3, 3, 2, 3}, rng);
        const Tensor w = testutil::random_tensor({2, 2, 3}, rng);
        auto report = testutil::fd_check({&in, &f}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(conv2d(p[0], p[1], 2), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("softmax") {
        Tensor x = testutil::random_tensor({3, 4}, rng, -2.0, 2.0);
        const Tensor w = testutil::random_tensor({3, 4}, rng);
        for (int axis = 0; axis < 2; ++axis) {
            auto report = testutil::fd_check({&x}, [&](Tape& t, const std::vector<Var>& p) {
                return inner(softmax(p[0], axis), w);
            });
            CHECK_MESSAGE(report.pass(), report.summary());
        }
    }

    SUBCASE("relu away from the kink") {
        Tensor x({6}, {0.5, -0.75, 1.25, -0.3, 2.0, -1.5});
        const Tensor w = testutil::random_tensor({6}, rng);
        auto report = testutil::fd_check({&x}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(relu(p[0]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("bias_add") {
        Tensor x = testutil::random_tensor({3, 2, 4}, rng);
        Tensor b = testutil::random_tensor({4}, rng);
        const Tensor w = testutil::random_tensor({3, 2, 4}, rng);
        auto report = testutil::fd_check({&x, &b}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(bias_add(p[0], p[1]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("linear") {
        Tensor x = testutil::random_tensor({5}, rng);
        Tensor wgt = testutil::random_tensor({5, 3}, rng);
        Tensor b = testutil::random_tensor({3}, rng);
        const Tensor w = testutil::random_tensor({3}, rng);
        auto report = testutil::fd_check({&x, &wgt, &b}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(linear(p[0], p[1], p[2]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("reshape and add and scale") {
        Tensor a = testutil::random_tensor({2, 6}, rng);
        Tensor b = testutil::random_tensor({3, 4}, rng);
        const Tensor w = testutil::random_tensor({3, 4}, rng);
        auto report = testutil::fd_check({&a, &b}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(add(scale(reshape(p[0], {3, 4}), 1.7), p[1]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("row_norms") {
        Tensor x = testutil::random_tensor({4, 3}, rng, 0.2, 1.0);
        const Tensor w = testutil::random_tensor({4}, rng);
        auto report = testutil::fd_check({&x}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(row_norms(p[0]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("squash") {
        Tensor x = testutil::random_tensor({3, 4}, rng, 0.3, 1.5);
        const Tensor w = testutil::random_tensor({3, 4}, rng);
        auto report = testutil::fd_check({&x}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(squash(p[0]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }

    SUBCASE("append_row_features") {
        Tensor m = testutil::random_tensor({3, 4}, rng);
        Tensor v = testutil::random_tensor({2}, rng);
        const Tensor w = testutil::random_tensor({3, 6}, rng);
        auto report = testutil::fd_check({&m, &v}, [&](Tape& t, const std::vector<Var>& p) {
            return inner(append_row_features(p[0], p[1]), w);
        });
        CHECK_MESSAGE(report.pass(), report.summary());
    }
}

TEST_CASE("a corrupted analytic gradient fails with the block named") {
    Rng rng(3);
    Tensor a = testutil::random_tensor({3, 3}, rng);
    const Tensor w = testutil::random_tensor({3, 3}, rng);
    const auto loss_fn = [&]() {
        Tape tape;
        Var p = tape.leaf(a);
        return inner(softmax(p, 1), w).value()[0];
    };
    const auto grad_fn = [&]() {
        Tape tape;
        Var p = tape.leaf(a);
        Var loss = inner(softmax(p, 1), w);
        tape.backward(loss);
        Tensor g = tape.gradient(p);
        for (int i = 0; i < g.size(); ++i) g[i] *= 1.01;  // deliberate corruption
        return std::vector<Tensor>{g};
    };
    const auto report =
        check_gradients(loss_fn, grad_fn, {{"corrupted_block", &a}}, 1e-6, 1e-4);
    CHECK_FALSE(report.pass());
    REQUIRE(report.blocks.size() == 1);
    CHECK(report.blocks[0].name == "corrupted_block");
    CHECK_FALSE(report.blocks[0].pass);
}
