#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixcaps/rng.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

// Synthetic nodule-patch generator. Blobs come in two size regimes with
// regime-specific label rules: small nodules are malignant iff their internal
// texture variation exceeds a threshold, large nodules iff their boundary
// irregularity does. The other cue is drawn from the same distribution but
// ignored by the label, so size alone predicts nothing while each regime
// rewards a different feature detector.
struct SampleRecord {
    enum class Regime : int { small = 0, large = 1 };

    Tensor patch;  // [80 x 80 x 3], values in [0, 1], zero border
    int label = 0;  // 0 benign, 1 malignant
    double volume = 0.0;    // foreground pixels (> 0.2) across the 3 slices
    double diameter = 0.0;  // max in-plane extent of the center slice, pixels
    Regime regime = Regime::small;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

struct GenParams {
    double p_large = 0.5;
    Range small_diameter{12.0, 22.0};
    Range large_diameter{30.0, 52.0};
    Range eccentricity{0.7, 0.95};
    // Texture amplitude is bimodal; the measured interior deviation decides
    // the label in the small regime. Frequencies sit where a nodule spans
    // several periods and the wave survives 2x pooling.
    Range texture_amp_low{0.0, 0.04};
    Range texture_amp_high{0.7, 1.0};
    Range texture_freq{0.8, 1.3};  // rad/pixel
    double texture_threshold = 0.09;
    // Boundary wobble is bimodal; its measured strength decides the label in
    // the large regime.
    Range wobble_low{0.01, 0.05};
    Range wobble_high{0.22, 0.35};
    double wobble_threshold = 0.065;
    double center_jitter = 2.0;

    void validate() const;
};

inline constexpr int kPatchHW = 80;
inline constexpr int kPatchSlices = 3;
// Intensity threshold defining foreground for volume/diameter measurements.
inline constexpr double kForegroundThreshold = 0.2;

SampleRecord generate_sample(Rng& rng, const GenParams& params);

// count records, each from its own derived stream, so generation is
// reproducible and order-independent.
std::vector<SampleRecord> generate_dataset(std::uint64_t seed, int count, const GenParams& params);

// Centers `cropped` ([h x w x 3], h,w <= 80) in an exact-zero 80x80x3 patch.
Tensor pad_patch(const Tensor& cropped);

// Additive zero-mean Gaussian noise, clamped to [0, 1]. std == 0 returns the
// patch unchanged without consuming randomness.
Tensor add_noise(const Tensor& patch, double stddev, Rng& rng);

struct Dataset {
    std::uint64_t seed = 0;
    GenParams params;
    std::vector<SampleRecord> records;
};

// Binary dataset file: magic "MXCP", version u16, count u64, shape u16x3,
// seed u64, generator parameters, then fixed-size little-endian f32 records.
// Patch values are quantized to f32 at generation time, so a round trip is
// bit-exact.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace mixcaps
