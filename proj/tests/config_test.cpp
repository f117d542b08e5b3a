#include <doctest.h>

#include "mixcaps/config.hpp"

using namespace mixcaps;

TEST_CASE("key=value parsing with comments and blanks") {
    const auto kv = KeyValueConfig::from_text(
        "# a comment\n"
        "epochs = 3\n"
        "\n"
        "learning_rate=0.01  # trailing comment\n"
        "preset = paper\n");
    CHECK(kv.get_int("epochs", 0) == 3);
    CHECK(kv.get_double("learning_rate", 0.0) == 0.01);
    CHECK(kv.get_string("preset", "") == "paper");
    kv.ensure_fully_consumed();
}

TEST_CASE("malformed lines and duplicate keys are rejected") {
    CHECK_THROWS_AS(KeyValueConfig::from_text("no equals sign here\n"), FormatError);
    CHECK_THROWS_AS(KeyValueConfig::from_text("a=1\na=2\n"), FormatError);
    CHECK_THROWS_AS(KeyValueConfig::from_text("=1\n"), FormatError);
}

TEST_CASE("typed getters validate values and name the key") {
    const auto kv = KeyValueConfig::from_text("epochs = banana\nfrac = 0.5\n");
    try {
        kv.get_int("epochs", 0);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("epochs") != std::string::npos);
    }
    CHECK_THROWS_AS(kv.get_int("frac", 0), FormatError);  // non-integral
}

TEST_CASE("unconsumed keys are reported") {
    const auto kv = KeyValueConfig::from_text("epochs = 3\nmispelled_knob = 1\n");
    TrainConfig cfg = TrainConfig::make(Preset::desk);
    apply_config(kv, cfg);
    CHECK(cfg.epochs == 3);
    try {
        kv.ensure_fully_consumed();
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("mispelled_knob") != std::string::npos);
    }
}

TEST_CASE("train config keys apply over preset defaults") {
    const auto kv = KeyValueConfig::from_text(
        "preset = desk\n"
        "batch_size = 8\n"
        "seed = 42\n"
        "learning_rate = 0.002\n"
        "num_experts = 3\n"
        "bootstrap_iterations = 5\n");
    TrainConfig cfg = TrainConfig::make(Preset::desk);
    apply_config(kv, cfg);
    kv.ensure_fully_consumed();
    CHECK(cfg.batch_size == 8);
    CHECK(cfg.seed == 42);
    CHECK(cfg.adam.learning_rate == 0.002);
    CHECK(cfg.num_experts == 3);
    CHECK(cfg.bootstrap_iterations == 5);
    CHECK(cfg.epochs == 10);  // untouched default
    cfg.validate();
}

TEST_CASE("generator params apply from config text") {
    const auto kv = KeyValueConfig::from_text(
        "p_large = 0.25\n"
        "small_diameter_lo = 6\n"
        "small_diameter_hi = 14\n"
        "texture_threshold = 0.04\n");
    GenParams params;
    apply_config(kv, params);
    kv.ensure_fully_consumed();
    CHECK(params.p_large == 0.25);
    CHECK(params.small_diameter.lo == 6.0);
    CHECK(params.small_diameter.hi == 14.0);
    CHECK(params.texture_threshold == 0.04);
    params.validate();
}

TEST_CASE("train config invariants") {
    TrainConfig cfg = TrainConfig::make(Preset::desk);
    cfg.validation_fraction = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = TrainConfig::make(Preset::desk);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = TrainConfig::make(Preset::desk);
    cfg.num_experts = 1;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg.validate(true);  // single expert allowed for baselines
    CHECK(TrainConfig::make(Preset::paper).bootstrap_iterations == 200);
    CHECK(TrainConfig::make(Preset::desk).bootstrap_iterations == 20);
}
