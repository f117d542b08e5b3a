#include "mixcaps/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mixcaps/serialize.hpp"

namespace mixcaps {

void GenParams::validate() const {
    if (p_large < 0.0 || p_large > 1.0) throw ContractError("p_large must be in [0, 1]");
    for (const Range* r : {&small_diameter, &large_diameter, &eccentricity, &texture_amp_low,
                           &texture_amp_high, &texture_freq, &wobble_low, &wobble_high}) {
        if (r->lo > r->hi || r->lo < 0.0) throw ContractError("generator ranges must be ordered and nonnegative");
    }
    if (eccentricity.hi > 1.0) throw ContractError("eccentricity must be <= 1");
    if (center_jitter < 0.0) throw ContractError("center_jitter must be nonnegative");
}

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kEdgeWidth = 0.18;   // soft boundary width, relative
constexpr double kSliceShrink = 0.82; // neighbor slices are slightly smaller
constexpr int kWobbleHarmonics = 3;   // harmonics m = 3, 4, 5

float q32(double v) { return static_cast<float>(v); }

struct WobbleField {
    double amps[kWobbleHarmonics];
    double phases[kWobbleHarmonics];

    static WobbleField sample(Rng& rng) {
        WobbleField f;
        for (int i = 0; i < kWobbleHarmonics; ++i) {
            f.amps[i] = rng.uniform(0.5, 1.0);
            f.phases[i] = rng.uniform(0.0, 2.0 * kPi);
        }
        // Normalize the peak to 1 so the radial excursion (and with it the
        // rendered extent) is bounded by the wobble strength alone.
        const double peak = f.max_abs();
        for (double& a : f.amps) a /= peak;
        return f;
    }

    double at(double phi) const {
        double v = 0.0;
        for (int i = 0; i < kWobbleHarmonics; ++i) {
            v += amps[i] * std::sin((i + 3) * phi + phases[i]);
        }
        return v;
    }

    double max_abs() const {
        double m = 0.0;
        for (int k = 0; k < 512; ++k) m = std::max(m, std::abs(at(2.0 * kPi * k / 512.0)));
        return m;
    }

    double rms_measured() const {
        double sq = 0.0;
        for (int k = 0; k < 512; ++k) {
            const double v = at(2.0 * kPi * k / 512.0);
            sq += v * v;
        }
        return std::sqrt(sq / 512.0);
    }
};

struct BlobSpec {
    double a = 0.0, b = 0.0;  // semi-axes, pixels
    double theta = 0.0;       // in-plane rotation
    double wobble = 0.0;      // relative boundary modulation strength
    WobbleField field;
    double base = 0.0;        // interior intensity
    double tex_amp = 0.0;
    double fx = 0.0, fy = 0.0, ph1 = 0.0, ph2 = 0.0;  // texture waves
    std::uint64_t grain_seed = 0;
};

constexpr int kGrainBlock = 4;  // speckle tile size, pixels

// Spatially consistent speckle: one uniform value per kGrainBlock-sized tile,
// derived by hashing (tile, slice) so rendering order cannot matter.
double block_grain(std::uint64_t seed, int x, int y, int slice) {
    std::uint64_t h = seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(x / kGrainBlock + 101)) ^
                      (0xbf58476d1ce4e5b9ULL * static_cast<std::uint64_t>(y / kGrainBlock + 211)) ^
                      (0x94d049bb133111ebULL * static_cast<std::uint64_t>(slice + 1));
    return 2.0 * (static_cast<double>(splitmix64(h) >> 11) * 0x1.0p-53) - 1.0;
}

// Renders one slice into `patch` channel `slice`, returning the interior
// pixel values of that slice (profile == 1 region) for texture measurement.
std::vector<double> render_slice(Tensor& patch, int cs, int slice, double cx, double cy,
                                 const BlobSpec& s, double shrink, double phase_shift) {
    std::vector<double> interior;
    const double a = s.a * shrink, b = s.b * shrink;
    const double ct = std::cos(s.theta), st = std::sin(s.theta);
    for (int y = 0; y < cs; ++y) {
        for (int x = 0; x < cs; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double xr = dx * ct + dy * st;
            const double yr = -dx * st + dy * ct;
            const double rho = std::sqrt((xr / a) * (xr / a) + (yr / b) * (yr / b));
            const double phi = std::atan2(yr, xr);
            const double rb = std::max(0.3, 1.0 + s.wobble * s.field.at(phi));
            if (rho >= rb) continue;
            const double u = (rb - rho) / (kEdgeWidth * rb);
            const double t = std::min(1.0, u);
            const double profile = t * t * (3.0 - 2.0 * t);
            // Grain-forward mix: tiled speckle is the robust variance cue,
            // the waves add structure.
            const double g = block_grain(s.grain_seed, x, y, slice);
            const double tex = 0.25 * std::sin(s.fx * xr + s.ph1 + phase_shift) *
                                   std::sin(s.fy * yr + s.ph2 + phase_shift) +
                               0.75 * g;
            double v = profile * (s.base + s.tex_amp * tex);
            v = std::clamp(v, 0.0, 1.0);
            v = static_cast<double>(q32(v));
            patch(y, x, slice) = v;
            if (u >= 1.5) interior.push_back(v);  // fully inside the soft edge
        }
    }
    return interior;
}

double stddev(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double sq = 0.0;
    for (double v : xs) sq += (v - mean) * (v - mean);
    return std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

Tensor pad_patch(const Tensor& cropped) {
    if (cropped.rank() != 3 || cropped.dim(2) != kPatchSlices) {
        throw DimensionError("pad_patch expects [h x w x 3], got " + cropped.shape_str());
    }
    const int h = cropped.dim(0), w = cropped.dim(1);
    if (h > kPatchHW || w > kPatchHW) {
        throw DimensionError("pad_patch input " + cropped.shape_str() + " exceeds " +
                             std::to_string(kPatchHW) + "x" + std::to_string(kPatchHW));
    }
    Tensor out({kPatchHW, kPatchHW, kPatchSlices});
    const int oy = (kPatchHW - h) / 2, ox = (kPatchHW - w) / 2;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < kPatchSlices; ++c) out(oy + y, ox + x, c) = cropped(y, x, c);
        }
    }
    return out;
}

SampleRecord generate_sample(Rng& rng, const GenParams& params) {
    params.validate();
    SampleRecord rec;
    rec.regime = rng.bernoulli(params.p_large) ? SampleRecord::Regime::large
                                               : SampleRecord::Regime::small;
    const bool large = rec.regime == SampleRecord::Regime::large;

    BlobSpec blob;
    double diameter = (large ? params.large_diameter : params.small_diameter).sample(rng);
    blob.a = diameter / 2.0;
    blob.b = blob.a * params.eccentricity.sample(rng);
    blob.theta = rng.uniform(0.0, kPi);
    blob.field = WobbleField::sample(rng);
    // Both cues are always present; only the regime-matched one decides the
    // label.
    blob.wobble = (rng.bernoulli(0.5) ? params.wobble_high : params.wobble_low).sample(rng);
    blob.tex_amp =
        (rng.bernoulli(0.5) ? params.texture_amp_high : params.texture_amp_low).sample(rng);
    blob.base = rng.uniform(0.55, 0.85);
    blob.fx = params.texture_freq.sample(rng);
    blob.fy = params.texture_freq.sample(rng);
    blob.ph1 = rng.uniform(0.0, 2.0 * kPi);
    blob.ph2 = rng.uniform(0.0, 2.0 * kPi);
    const double jx = rng.uniform(-params.center_jitter, params.center_jitter);
    const double jy = rng.uniform(-params.center_jitter, params.center_jitter);

    // Crop must hold the wobbled blob plus jitter; oversize blobs are redrawn
    // with a clipped diameter instead of being cropped silently.
    const double margin = 2.0 + params.center_jitter;
    double extent = blob.a * (1.0 + blob.wobble * blob.field.max_abs());
    if (2.0 * (extent + margin) > kPatchHW) {
        const double scale = (kPatchHW / 2.0 - margin) / extent;
        blob.a *= scale;
        blob.b *= scale;
        extent = blob.a * (1.0 + blob.wobble * blob.field.max_abs());
    }
    const int cs = std::min(kPatchHW, static_cast<int>(std::ceil(2.0 * (extent + margin))));
    const double cx = cs / 2.0 + jx, cy = cs / 2.0 + jy;

    blob.grain_seed = rng.next_u64();
    Tensor crop({cs, cs, kPatchSlices});
    render_slice(crop, cs, 0, cx + rng.uniform(-1.0, 1.0), cy + rng.uniform(-1.0, 1.0), blob,
                 kSliceShrink, 0.7);
    const std::vector<double> interior = render_slice(crop, cs, 1, cx, cy, blob, 1.0, 0.0);
    render_slice(crop, cs, 2, cx + rng.uniform(-1.0, 1.0), cy + rng.uniform(-1.0, 1.0), blob,
                 kSliceShrink, 1.3);
    rec.patch = pad_patch(crop);

    // Volume from the rendered pixels; diameter is the annotated major-axis
    // extent of the base ellipse, which keeps the stored size independent of
    // the (label-bearing) boundary wobble.
    int volume = 0;
    for (std::int64_t i = 0; i < rec.patch.size(); ++i) {
        if (rec.patch[i] > kForegroundThreshold) ++volume;
    }
    rec.volume = static_cast<double>(q32(volume));
    rec.diameter = static_cast<double>(q32(2.0 * blob.a));

    const double texture_measure = stddev(interior);
    const double wobble_measure = blob.wobble * blob.field.rms_measured();
    rec.label = large ? (wobble_measure > params.wobble_threshold ? 1 : 0)
                      : (texture_measure > params.texture_threshold ? 1 : 0);
    return rec;
}

std::vector<SampleRecord> generate_dataset(std::uint64_t seed, int count,
                                           const GenParams& params) {
    if (count < 0) throw ContractError("dataset count must be nonnegative");
    std::vector<SampleRecord> records;
    records.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        records.push_back(generate_sample(rng, params));
    }
    return records;
}

Tensor add_noise(const Tensor& patch, double stddev, Rng& rng) {
    if (stddev < 0.0) throw ContractError("noise std must be nonnegative");
    if (stddev == 0.0) return patch;
    Tensor out(patch.shape());
    for (std::int64_t i = 0; i < patch.size(); ++i) {
        out[i] = std::clamp(patch[i] + rng.normal(0.0, stddev), 0.0, 1.0);
    }
    return out;
}

namespace {

constexpr char kDatasetMagic[5] = "MXCP";
constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::int64_t kPatchValues =
    static_cast<std::int64_t>(kPatchHW) * kPatchHW * kPatchSlices;
constexpr std::int64_t kRecordBytes = 4 * (4 + kPatchValues);

std::vector<double> params_to_values(const GenParams& p) {
    return {p.p_large,
            p.small_diameter.lo,  p.small_diameter.hi,
            p.large_diameter.lo,  p.large_diameter.hi,
            p.eccentricity.lo,    p.eccentricity.hi,
            p.texture_amp_low.lo, p.texture_amp_low.hi,
            p.texture_amp_high.lo, p.texture_amp_high.hi,
            p.texture_freq.lo,    p.texture_freq.hi,
            p.texture_threshold,
            p.wobble_low.lo,      p.wobble_low.hi,
            p.wobble_high.lo,     p.wobble_high.hi,
            p.wobble_threshold,
            p.center_jitter};
}

GenParams params_from_values(const std::vector<double>& v) {
    if (v.size() != 20) {
        throw FormatError("dataset header: expected 20 generator parameters, got " +
                          std::to_string(v.size()));
    }
    GenParams p;
    p.p_large = v[0];
    p.small_diameter = {v[1], v[2]};
    p.large_diameter = {v[3], v[4]};
    p.eccentricity = {v[5], v[6]};
    p.texture_amp_low = {v[7], v[8]};
    p.texture_amp_high = {v[9], v[10]};
    p.texture_freq = {v[11], v[12]};
    p.texture_threshold = v[13];
    p.wobble_low = {v[14], v[15]};
    p.wobble_high = {v[16], v[17]};
    p.wobble_threshold = v[18];
    p.center_jitter = v[19];
    return p;
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write(kDatasetMagic, 4);
    io::write_le<std::uint16_t>(os, kDatasetVersion);
    io::write_le<std::uint64_t>(os, dataset.records.size());
    io::write_le<std::uint16_t>(os, kPatchHW);
    io::write_le<std::uint16_t>(os, kPatchHW);
    io::write_le<std::uint16_t>(os, kPatchSlices);
    io::write_le<std::uint64_t>(os, dataset.seed);
    const std::vector<double> pv = params_to_values(dataset.params);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pv.size()));
    for (const double v : pv) io::write_le<double>(os, v);
    for (const SampleRecord& rec : dataset.records) {
        if (!rec.patch.same_shape(Tensor({kPatchHW, kPatchHW, kPatchSlices}))) {
            throw DimensionError("dataset record patch has shape " + rec.patch.shape_str());
        }
        io::write_le<float>(os, static_cast<float>(rec.label));
        io::write_le<float>(os, static_cast<float>(rec.volume));
        io::write_le<float>(os, static_cast<float>(rec.diameter));
        io::write_le<float>(os, static_cast<float>(static_cast<int>(rec.regime)));
        for (std::int64_t i = 0; i < rec.patch.size(); ++i) {
            io::write_le<float>(os, static_cast<float>(rec.patch[i]));
        }
    }
    if (!os) throw FormatError("short write to " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    io::expect_magic(is, "MXCP", "dataset");
    const auto version = io::read_le<std::uint16_t>(is);
    if (version != kDatasetVersion) {
        throw FormatError("dataset version " + std::to_string(version) + " unsupported (want " +
                          std::to_string(kDatasetVersion) + ")");
    }
    const auto count = io::read_le<std::uint64_t>(is);
    const int h = io::read_le<std::uint16_t>(is);
    const int w = io::read_le<std::uint16_t>(is);
    const int c = io::read_le<std::uint16_t>(is);
    if (h != kPatchHW || w != kPatchHW || c != kPatchSlices) {
        throw FormatError("dataset patch shape " + std::to_string(h) + "x" + std::to_string(w) +
                          "x" + std::to_string(c) + " unsupported");
    }
    Dataset dataset;
    dataset.seed = io::read_le<std::uint64_t>(is);
    const auto n_params = io::read_le<std::uint32_t>(is);
    std::vector<double> pv(n_params);
    for (auto& v : pv) v = io::read_le<double>(is);
    dataset.params = params_from_values(pv);

    const std::uint64_t header_bytes = 4 + 2 + 8 + 6 + 8 + 4 + 8ULL * n_params;
    const std::uint64_t expected = header_bytes + count * static_cast<std::uint64_t>(kRecordBytes);
    const std::uint64_t actual = std::filesystem::file_size(path);
    if (actual != expected) {
        throw FormatError("dataset " + path + ": file has " + std::to_string(actual) +
                          " bytes, header promises " + std::to_string(expected) +
                          " (truncated or count mismatch)");
    }

    dataset.records.reserve(count);
    for (std::uint64_t r = 0; r < count; ++r) {
        SampleRecord rec;
        const float label = io::read_le<float>(is);
        rec.label = static_cast<int>(label);
        rec.volume = io::read_le<float>(is);
        rec.diameter = io::read_le<float>(is);
        const float regime = io::read_le<float>(is);
        rec.regime = static_cast<SampleRecord::Regime>(static_cast<int>(regime));
        if ((label != 0.f && label != 1.f) || (regime != 0.f && regime != 1.f)) {
            throw FormatError("dataset record " + std::to_string(r) + " has corrupt label/regime");
        }
        rec.patch = Tensor({kPatchHW, kPatchHW, kPatchSlices});
        for (std::int64_t i = 0; i < rec.patch.size(); ++i) {
            rec.patch[i] = io::read_le<float>(is);
        }
        dataset.records.push_back(std::move(rec));
    }
    return dataset;
}

}  // namespace mixcaps
