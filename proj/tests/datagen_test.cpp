#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mixcaps/datagen.hpp"
#include "mixcaps/metrics.hpp"

#include "test_util.hpp"

using namespace mixcaps;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

// Test-side extent measurement: max bounding-box dimension of the
// foreground on the center slice.
double measured_extent(const Tensor& patch) {
    int min_x = 1 << 20, max_x = -1, min_y = 1 << 20, max_y = -1;
    for (int y = 0; y < kPatchHW; ++y)
        for (int x = 0; x < kPatchHW; ++x)
            if (patch(y, x, 1) > kForegroundThreshold) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
    if (max_x < 0) return 0.0;
    return std::max(max_x - min_x + 1, max_y - min_y + 1);
}

}  // namespace

TEST_CASE("pad_patch leaves full-size input unchanged") {
    Rng rng(71);
    const Tensor full = testutil::random_tensor({80, 80, 3}, rng, 0.0, 1.0);
    CHECK(max_abs_diff(pad_patch(full), full) == 0.0);
}

TEST_CASE("pad_patch centers a single pixel in a sea of exact zeros") {
    Tensor tiny({1, 1, 3});
    tiny(0, 0, 0) = 0.7;
    tiny(0, 0, 1) = 0.8;
    tiny(0, 0, 2) = 0.9;
    const Tensor out = pad_patch(tiny);
    CHECK(out(39, 39, 0) == 0.7);
    CHECK(out(39, 39, 1) == 0.8);
    CHECK(out(39, 39, 2) == 0.9);
    int nonzero = 0;
    for (int i = 0; i < out.size(); ++i) nonzero += out[i] != 0.0;
    CHECK(nonzero == 3);
}

TEST_CASE("pad_patch conserves mass and rejects oversize input") {
    Rng rng(72);
    const Tensor crop = testutil::random_tensor({13, 17, 3}, rng, 0.0, 1.0);
    double before = 0.0, after = 0.0;
    const Tensor padded = pad_patch(crop);
    for (int i = 0; i < crop.size(); ++i) before += crop[i];
    for (int i = 0; i < padded.size(); ++i) after += padded[i];
    CHECK(before == after);
    CHECK_THROWS_AS(pad_patch(Tensor({81, 10, 3})), DimensionError);
}

TEST_CASE("zero-std noise is the identity") {
    Rng rng(73);
    const Tensor patch = testutil::random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    Rng noise_rng(1);
    CHECK(max_abs_diff(add_noise(patch, 0.0, noise_rng), patch) == 0.0);
    CHECK_THROWS_AS(add_noise(patch, -0.1, noise_rng), ContractError);
}

TEST_CASE("noise is zero-mean before clamping and clamped after") {
    // Mid-gray input avoids clamping at std 0.1, so output-input is the raw
    // noise.
    const Tensor patch = Tensor::full({60, 60, 3}, 0.5);
    Rng noise_rng(99);
    const Tensor noisy = add_noise(patch, 0.1, noise_rng);
    double mean = 0.0;
    for (int i = 0; i < patch.size(); ++i) {
        CHECK(noisy[i] >= 0.0);
        CHECK(noisy[i] <= 1.0);
        mean += noisy[i] - patch[i];
    }
    mean /= static_cast<double>(patch.size());
    CHECK(std::abs(mean) < 0.005);

    Rng rng2(100);
    const Tensor hard = add_noise(patch, 5.0, rng2);
    for (int i = 0; i < hard.size(); ++i) {
        CHECK(hard[i] >= 0.0);
        CHECK(hard[i] <= 1.0);
    }
}

TEST_CASE("generation is deterministic per seed") {
    const GenParams params;
    const auto a = generate_dataset(1234, 3, params);
    const auto b = generate_dataset(1234, 3, params);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].volume == b[i].volume);
        CHECK(a[i].diameter == b[i].diameter);
        CHECK(max_abs_diff(a[i].patch, b[i].patch) == 0.0);
    }
}

TEST_CASE("samples satisfy the record invariants") {
    const auto records = generate_dataset(7, 40, GenParams{});
    for (const SampleRecord& rec : records) {
        CHECK(rec.volume > 0.0);
        CHECK(rec.diameter >= 1.0);
        for (int i = 0; i < rec.patch.size(); ++i) {
            CHECK(rec.patch[i] >= 0.0);
            CHECK(rec.patch[i] <= 1.0);
        }
        // Zero border from the padding.
        for (int k = 0; k < kPatchHW; ++k) {
            for (int c = 0; c < 3; ++c) {
                CHECK(rec.patch(0, k, c) == 0.0);
                CHECK(rec.patch(k, 0, c) == 0.0);
            }
        }
    }
}

TEST_CASE("pinned diameter renders within tolerance of the request") {
    GenParams params;
    params.p_large = 0.0;
    params.small_diameter = {10.0, 10.0};
    params.eccentricity = {1.0, 1.0};
    params.wobble_low = {0.0, 0.0};
    params.wobble_high = {0.0, 0.0};
    params.center_jitter = 0.0;
    const auto records = generate_dataset(8, 30, params);
    for (const SampleRecord& rec : records) {
        CHECK(rec.diameter >= 7.0);
        CHECK(rec.diameter <= 12.0);
    }
}

TEST_CASE("zero texture amplitude makes every small-regime sample benign") {
    GenParams params;
    params.p_large = 0.0;
    params.texture_amp_low = {0.0, 0.0};
    params.texture_amp_high = {0.0, 0.0};
    const auto records = generate_dataset(9, 50, params);
    for (const SampleRecord& rec : records) {
        CHECK(rec.regime == SampleRecord::Regime::small);
        CHECK(rec.label == 0);
    }
}

TEST_CASE("default mix keeps labels and regimes balanced") {
    const auto records = generate_dataset(10, 1000, GenParams{});
    int malignant = 0, large = 0;
    for (const SampleRecord& rec : records) {
        malignant += rec.label;
        large += rec.regime == SampleRecord::Regime::large;
    }
    const double label_rate = malignant / 1000.0;
    const double regime_rate = large / 1000.0;
    CHECK(label_rate >= 0.4);
    CHECK(label_rate <= 0.6);
    CHECK(regime_rate >= 0.45);
    CHECK(regime_rate <= 0.55);
}

TEST_CASE("stored diameter tracks the re-measured blob extent") {
    const auto records = generate_dataset(11, 500, GenParams{});
    std::vector<double> stored, measured;
    for (const SampleRecord& rec : records) {
        stored.push_back(rec.diameter);
        measured.push_back(measured_extent(rec.patch));
    }
    const Pearson p = pearson_correlation(stored, measured);
    REQUIRE(p.defined);
    CHECK(p.r > 0.95);
}

TEST_CASE("size alone cannot beat chance by much: labels balanced per regime") {
    const auto records = generate_dataset(12, 1000, GenParams{});

    // Labels are balanced inside each regime, so no size cut carries signal.
    int n_small = 0, pos_small = 0, n_large = 0, pos_large = 0;
    for (const SampleRecord& rec : records) {
        if (rec.regime == SampleRecord::Regime::small) {
            ++n_small;
            pos_small += rec.label;
        } else {
            ++n_large;
            pos_large += rec.label;
        }
    }
    const double small_rate = static_cast<double>(pos_small) / n_small;
    const double large_rate = static_cast<double>(pos_large) / n_large;
    CHECK(small_rate >= 0.4);
    CHECK(small_rate <= 0.6);
    CHECK(large_rate >= 0.4);
    CHECK(large_rate <= 0.6);

    // Fit the best diameter threshold (either polarity) on one half, score it
    // on the other: out-of-sample it sits at chance.
    std::vector<std::pair<double, int>> fit, hold;
    for (std::size_t i = 0; i < records.size(); ++i) {
        (i % 2 == 0 ? fit : hold).emplace_back(records[i].diameter, records[i].label);
    }
    std::sort(fit.begin(), fit.end());
    const int n = static_cast<int>(fit.size());
    int positives = 0;
    for (const auto& [d, l] : fit) positives += l;
    double best_threshold = 0.0;
    bool best_forward = true;
    int best = -1;
    int pos_below = 0;
    for (int cut = 0; cut <= n; ++cut) {
        // predict malignant iff diameter >= threshold
        const int correct_fwd = (positives - pos_below) + (cut - pos_below);
        const double threshold =
            cut < n ? fit[static_cast<std::size_t>(cut)].first : 1e9;
        if (correct_fwd > best) {
            best = correct_fwd;
            best_threshold = threshold;
            best_forward = true;
        }
        if (n - correct_fwd > best) {
            best = n - correct_fwd;
            best_threshold = threshold;
            best_forward = false;
        }
        if (cut < n) pos_below += fit[static_cast<std::size_t>(cut)].second;
    }
    int held_correct = 0;
    for (const auto& [d, l] : hold) {
        const bool malignant = best_forward ? d >= best_threshold : d < best_threshold;
        held_correct += (malignant == (l == 1));
    }
    const double held_acc = static_cast<double>(held_correct) / static_cast<double>(hold.size());
    CHECK(held_acc >= 0.42);
    CHECK(held_acc <= 0.58);
}

TEST_CASE("dataset files round trip bit-exactly") {
    TempFile tmp("mixcaps_roundtrip.mxcp");
    Dataset ds;
    ds.seed = 321;
    ds.records = generate_dataset(321, 100, ds.params);
    write_dataset(ds, tmp.path);
    const Dataset back = read_dataset(tmp.path);
    CHECK(back.seed == ds.seed);
    CHECK(back.params.p_large == ds.params.p_large);
    REQUIRE(back.records.size() == ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        CHECK(back.records[i].label == ds.records[i].label);
        CHECK(back.records[i].volume == ds.records[i].volume);
        CHECK(back.records[i].diameter == ds.records[i].diameter);
        CHECK(back.records[i].regime == ds.records[i].regime);
        CHECK(max_abs_diff(back.records[i].patch, ds.records[i].patch) == 0.0);
    }
}

TEST_CASE("an empty dataset is a header-only file that reads back empty") {
    TempFile tmp("mixcaps_empty.mxcp");
    Dataset ds;
    ds.seed = 5;
    write_dataset(ds, tmp.path);
    const Dataset back = read_dataset(tmp.path);
    CHECK(back.records.empty());
    CHECK(back.seed == 5);
}

TEST_CASE("truncated files fail loudly with no partial records") {
    TempFile tmp("mixcaps_truncated.mxcp");
    Dataset ds;
    ds.records = generate_dataset(6, 3, ds.params);
    write_dataset(ds, tmp.path);
    const auto full_size = std::filesystem::file_size(tmp.path);
    std::filesystem::resize_file(tmp.path, full_size - 1000);
    CHECK_THROWS_AS(read_dataset(tmp.path), FormatError);
}

TEST_CASE("foreign files are rejected by magic") {
    TempFile tmp("mixcaps_bad_magic.mxcp");
    std::ofstream os(tmp.path, std::ios::binary);
    os << "NOPEnope";
    os.close();
    CHECK_THROWS_AS(read_dataset(tmp.path), FormatError);
}

TEST_CASE("future format versions are rejected by name") {
    TempFile tmp("mixcaps_bad_version.mxcp");
    Dataset ds;
    write_dataset(ds, tmp.path);
    std::fstream f(tmp.path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    const char version9[2] = {9, 0};  // little-endian u16 after the magic
    f.write(version9, 2);
    f.close();
    try {
        read_dataset(tmp.path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
}
