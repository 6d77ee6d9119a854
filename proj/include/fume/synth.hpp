#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fume/common.hpp"
#include "fume/metrics.hpp"
#include "fume/tensor.hpp"

namespace fume {

enum class HealthLabel : int { Healthy = 0, Transitional = 1, Acidotic = 2 };

inline const char* label_name(HealthLabel l) {
    switch (l) {
        case HealthLabel::Healthy: return "Healthy";
        case HealthLabel::Transitional: return "Transitional";
        case HealthLabel::Acidotic: return "Acidotic";
    }
    return "?";
}

inline HealthLabel parse_label(const std::string& s) {
    for (HealthLabel l : {HealthLabel::Healthy, HealthLabel::Transitional, HealthLabel::Acidotic})
        if (s == label_name(l)) return l;
    throw DataError("unknown health label: " + s);
}

// Healthy: pH >= 6.0; Transitional: 5.8 <= pH < 6.0; Acidotic: pH < 5.8.
inline HealthLabel map_ph_to_class(double ph) {
    if (ph < 4.0 || ph > 8.0)
        throw DataError("pH out of physiological range [4, 8]: " + std::to_string(ph));
    if (ph >= 6.0) return HealthLabel::Healthy;
    if (ph >= 5.8) return HealthLabel::Transitional;
    return HealthLabel::Acidotic;
}

using Frame = Tensor<int>;  // H x W intensities in [0, 255]

struct GasFramePair {
    Frame co2_frame, ch4_frame;
    Mask co2_mask, ch4_mask;
    bool has_co2 = true, has_ch4 = true;
    double ph = 7.0;
    HealthLabel label = HealthLabel::Healthy;
};

// ---- 8-bit binary PGM (P5) ----

inline void write_pgm(const std::string& path, const Tensor<int>& img) {
    if (img.shape.size() != 2)
        throw ShapeError("PGM writer expects rank-2 image, got " + shape_str(img.shape));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write PGM: " + path);
    os << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
    std::vector<unsigned char> buf(img.numel());
    for (std::size_t i = 0; i < img.numel(); ++i) {
        if (img[i] < 0 || img[i] > 255)
            throw DataError("PGM value out of range [0,255]: " + std::to_string(img[i]));
        buf[i] = static_cast<unsigned char>(img[i]);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw DataError("PGM write failed: " + path);
}

inline Tensor<int> read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open PGM: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw DataError("not a binary PGM (P5): " + path);
    auto next_int = [&]() {
        int v;
        // skip whitespace and # comments
        for (;;) {
            int ch = is.peek();
            if (ch == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(ch)) {
                is.get();
            } else {
                break;
            }
        }
        if (!(is >> v)) throw DataError("corrupt PGM header: " + path);
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255)
        throw DataError("unsupported PGM geometry in " + path);
    is.get();  // single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("truncated PGM payload: " + path);
    Tensor<int> img({h, w});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = buf[i];
    return img;
}

namespace synth {

constexpr int kLabelBackground = 0;
constexpr int kLabelTube = 1;
constexpr int kLabelGas = 2;

constexpr double kBackgroundMean = 40.0;
constexpr double kBackgroundSigma = 6.0;
constexpr int kSessionFrames = 20;

// Fixed fermentation-tube rectangle, identical for every sample.
inline void tube_bounds(int size, int& r0, int& r1, int& c0, int& c1) {
    r0 = (size * 11) / 16;
    r1 = (size * 15) / 16;
    c0 = (size * 6) / 16;
    c1 = (size * 10) / 16;
}

// Probability that the CH4 modality is missing, linear in pH from 0.1 at 6.5
// down the acidity scale to 0.5 at 5.0.
inline double ch4_absence_probability(double ph) {
    double t = (6.5 - ph) / 1.5;
    return std::clamp(0.1 + 0.4 * t, 0.1, 0.5);
}

struct PlumeStats {
    double amp;        // peak intensity added over background
    double area_frac;  // target gas-pixel fraction of the frame
    double spread = 1.0;  // blob footprint scale: acidotic plumes billow wider
};

// CO2 gets brighter and larger as pH drops; CH4 gets weaker and smaller, with
// heavy class overlap so it carries little label signal on its own.

// Monotone acidity response: flat within each health class, steep across the
// class boundaries near pH 6.0 (t = 0.33) and pH 5.8 (t = 0.47).
inline double acidity_response(double t) {
    const double xs[] = {0.0, 0.2, 0.36, 0.46, 0.8, 1.0};
    const double ys[] = {0.0, 0.02, 0.44, 0.46, 0.98, 1.0};
    for (int i = 0; i < 5; ++i)
        if (t <= xs[i + 1])
            return ys[i] + (ys[i + 1] - ys[i]) * (t - xs[i]) / (xs[i + 1] - xs[i]);
    return 1.0;
}

inline PlumeStats co2_stats(double ph, Rng& rng) {
    double t = std::clamp((6.5 - ph) / 1.5, 0.0, 1.0);
    double s_t = acidity_response(t);
    PlumeStats s;
    s.amp = 52.0 + 100.0 * s_t + rng.uniform(-3.0, 3.0);
    s.area_frac = std::clamp(0.022 + 0.080 * s_t + rng.uniform(-0.003, 0.003), 0.02, 0.099);
    s.spread = 0.75 + 0.6 * s_t;
    return s;
}

inline PlumeStats ch4_stats(double ph, Rng& rng) {
    double t = std::clamp((6.5 - ph) / 1.5, 0.0, 1.0);
    PlumeStats s;
    double s_t = acidity_response(t);
    s.amp = std::max(66.0 - 14.0 * s_t + rng.uniform(-8.0, 8.0), 40.0);
    s.area_frac = std::clamp(0.068 - 0.030 * s_t + rng.uniform(-0.006, 0.006), 0.02, 0.099);
    return s;
}

// Smooth scalar field: 3..6 anisotropic Gaussian blobs drifting upward from
// the tube mouth, with multiplicative value noise.
inline std::vector<double> plume_field(int size, Rng& rng, double spread = 1.0) {
    int r0, r1, c0, c1;
    tube_bounds(size, r0, r1, c0, c1);
    std::vector<double> f(static_cast<std::size_t>(size) * size, 0.0);
    int blobs = 3 + static_cast<int>(rng.below(4));
    double mouth_r = r0;
    double mouth_c = 0.5 * (c0 + c1);
    for (int b = 0; b < blobs; ++b) {
        double rise = rng.uniform(0.10, 0.28) * size * spread;
        double cr = mouth_r - rise;
        double cc = mouth_c + rng.uniform(-0.06, 0.06) * size;
        double sr = rng.uniform(0.12, 0.18) * size * spread;
        double sc = rng.uniform(0.08, 0.13) * size * spread;
        double theta = rng.uniform(-0.4, 0.4);
        double w = rng.uniform(0.7, 1.0);
        double ct = std::cos(theta), st = std::sin(theta);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                double dr = r - cr, dc = c - cc;
                double u = ct * dr - st * dc, v = st * dr + ct * dc;
                f[static_cast<std::size_t>(r) * size + c] +=
                    w * std::exp(-0.5 * (u * u / (sr * sr) + v * v / (sc * sc)));
            }
    }
    for (double& v : f) v *= (1.0 + 0.05 * rng.normal());
    return f;
}

// Threshold such that about `frac` of the whole frame (taken from eligible
// pixels) exceeds it.
inline double quantile_threshold(const std::vector<double>& field,
                                 const std::vector<std::uint8_t>& eligible, double frac) {
    std::vector<double> vals;
    vals.reserve(field.size());
    for (std::size_t i = 0; i < field.size(); ++i)
        if (eligible[i]) vals.push_back(field[i]);
    if (vals.empty()) throw NumericError("plume thresholding found no eligible pixels");
    std::size_t keep =
        static_cast<std::size_t>(std::ceil(frac * static_cast<double>(field.size())));
    keep = std::clamp<std::size_t>(keep, 1, vals.size());
    std::nth_element(vals.begin(), vals.end() - static_cast<std::ptrdiff_t>(keep), vals.end());
    return vals[vals.size() - keep];
}

// Renders one modality: background noise + tube + quantile-thresholded plume.
inline void render_modality(int size, const PlumeStats& ps, Rng& rng, Frame& frame,
                            Mask& mask) {
    frame = Frame::zeros({size, size});
    mask = Mask::zeros({size, size});
    int r0, r1, c0, c1;
    tube_bounds(size, r0, r1, c0, c1);
    std::vector<std::uint8_t> eligible(frame.numel(), 1);
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
            std::size_t i = static_cast<std::size_t>(r) * size + c;
            mask[i] = kLabelTube;
            eligible[i] = 0;
        }
    auto field = plume_field(size, rng, ps.spread);
    double thresh = quantile_threshold(field, eligible, ps.area_frac);
    double fmax = thresh;
    for (std::size_t i = 0; i < field.size(); ++i)
        if (eligible[i]) fmax = std::max(fmax, field[i]);
    double span = std::max(fmax - thresh, 1e-9);

    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            std::size_t i = static_cast<std::size_t>(r) * size + c;
            double v;
            if (mask[i] == kLabelTube) {
                v = 170.0 + 10.0 * rng.normal();
            } else {
                v = kBackgroundMean + kBackgroundSigma * rng.normal();
                if (field[i] >= thresh) {
                    mask[i] = kLabelGas;
                    double rel = (field[i] - thresh) / span;
                    v += ps.amp * (0.65 + 0.35 * rel);
                }
            }
            frame[i] = std::clamp(static_cast<int>(std::lround(v)), 0, 255);
        }

    // keep the frame/mask contract exact: every gas pixel strictly brighter
    // than the empirical background mean + 2 sigma
    double sum = 0, sq = 0;
    std::size_t nbg = 0;
    for (std::size_t i = 0; i < frame.numel(); ++i)
        if (mask[i] == kLabelBackground) {
            sum += frame[i];
            sq += static_cast<double>(frame[i]) * frame[i];
            ++nbg;
        }
    if (nbg) {
        double mean = sum / nbg;
        double sigma = std::sqrt(std::max(sq / nbg - mean * mean, 0.0));
        int floor_v = static_cast<int>(std::ceil(mean + 2.0 * sigma)) + 1;
        for (std::size_t i = 0; i < frame.numel(); ++i)
            if (mask[i] == kLabelGas && frame[i] < floor_v)
                frame[i] = std::min(floor_v, 255);
    }
}

inline GasFramePair synth_pair(double ph, std::uint64_t seed, int size) {
    if (size <= 0 || size % 32)
        throw ConfigError("frame size must be a positive multiple of 32, got " +
                          std::to_string(size));
    GasFramePair p;
    p.ph = ph;
    p.label = map_ph_to_class(ph);
    Rng rng_co2(derive_seed(seed, 0xc02));
    PlumeStats sc = co2_stats(ph, rng_co2);
    render_modality(size, sc, rng_co2, p.co2_frame, p.co2_mask);
    p.has_co2 = true;
    Rng rng_ch4(derive_seed(seed, 0xc44));
    if (rng_ch4.uniform() < ch4_absence_probability(ph)) {
        p.has_ch4 = false;
        p.ch4_frame = Frame::zeros({size, size});
        p.ch4_mask = Mask::zeros({size, size});
    } else {
        p.has_ch4 = true;
        PlumeStats sm = ch4_stats(ph, rng_ch4);
        render_modality(size, sm, rng_ch4, p.ch4_frame, p.ch4_mask);
    }
    return p;
}

// ---- augmentation ----

struct AugmentParams {
    bool flip = false;
    double angle_deg = 0.0;    // rotation in [-15, 15]
    double gain = 1.0;         // intensity scale in [0.9, 1.1]
    double shift = 0.0;        // intensity shift in [-10, 10]
};

inline AugmentParams draw_augment(Rng& rng) {
    AugmentParams a;
    a.flip = rng.uniform() < 0.5;
    a.angle_deg = rng.uniform(-15.0, 15.0);
    a.gain = rng.uniform(0.9, 1.1);
    a.shift = rng.uniform(-10.0, 10.0);
    return a;
}

namespace detail {

// Source coordinates for output pixel (r, c) under flip-then-rotate.
inline void src_coords(const AugmentParams& a, int H, int W, int r, int c, double& sr,
                       double& sc) {
    double cr = 0.5 * (H - 1), cc = 0.5 * (W - 1);
    double rad = a.angle_deg * 3.14159265358979323846 / 180.0;
    double ct = std::cos(rad), st = std::sin(rad);
    double dr = r - cr, dc = c - cc;
    // inverse rotation
    sr = cr + ct * dr + st * dc;
    sc = cc - st * dr + ct * dc;
    if (a.flip) sc = (W - 1) - sc;
}

inline void warp_pair(const AugmentParams& a, const Frame& frame, const Mask& mask,
                      Frame& out_frame, Mask& out_mask) {
    int H = frame.shape[0], W = frame.shape[1];
    out_frame = Frame::zeros(frame.shape);
    out_mask = Mask::zeros(mask.shape);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double sr, sc;
            src_coords(a, H, W, r, c, sr, sc);
            std::size_t o = static_cast<std::size_t>(r) * W + c;
            // nearest-neighbor labels; out-of-frame becomes background
            int nr = static_cast<int>(std::lround(sr)), nc = static_cast<int>(std::lround(sc));
            if (nr >= 0 && nr < H && nc >= 0 && nc < W)
                out_mask[o] = mask[static_cast<std::size_t>(nr) * W + nc];
            // bilinear intensities with edge clamp
            double cr2 = std::clamp(sr, 0.0, static_cast<double>(H - 1));
            double cc2 = std::clamp(sc, 0.0, static_cast<double>(W - 1));
            int r0 = static_cast<int>(std::floor(cr2)), c0 = static_cast<int>(std::floor(cc2));
            int r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
            double fr = cr2 - r0, fc = cc2 - c0;
            auto px = [&](int rr, int cc3) {
                return static_cast<double>(frame[static_cast<std::size_t>(rr) * W + cc3]);
            };
            double v = (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c1)) +
                       fr * ((1 - fc) * px(r1, c0) + fc * px(r1, c1));
            v = v * a.gain + a.shift;
            out_frame[o] = std::clamp(static_cast<int>(std::lround(v)), 0, 255);
        }
}

}  // namespace detail

// Shared geometric transform and intensity jitter over the present modalities.
inline GasFramePair augment_with(const GasFramePair& p, const AugmentParams& a) {
    GasFramePair out = p;
    if (p.has_co2) detail::warp_pair(a, p.co2_frame, p.co2_mask, out.co2_frame, out.co2_mask);
    if (p.has_ch4) detail::warp_pair(a, p.ch4_frame, p.ch4_mask, out.ch4_frame, out.ch4_mask);
    return out;
}

inline GasFramePair augment(const GasFramePair& p, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xa46));
    return augment_with(p, draw_augment(rng));
}

// ---- dataset building ----

struct ManifestRow {
    std::uint64_t id = 0;
    std::string split;
    double ph = 0;
    HealthLabel label = HealthLabel::Healthy;
    std::string co2_frame, ch4_frame, co2_mask, ch4_mask;
    bool has_co2 = true, has_ch4 = true;
};

struct DatasetManifest {
    std::vector<ManifestRow> rows;

    static constexpr const char* kHeader =
        "id,split,ph,label,co2_frame,ch4_frame,co2_mask,ch4_mask,has_co2,has_ch4";

    std::vector<const ManifestRow*> split(const std::string& name) const {
        std::vector<const ManifestRow*> out;
        for (const auto& r : rows)
            if (r.split == name) out.push_back(&r);
        return out;
    }
};

inline std::string format_ph(double ph) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << ph;
    return os.str();
}

// round-half-up at one-sample resolution
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Per-pH 70/15/15 split sizes: round-half-up train and val, remainder test.
inline std::array<int, 3> split_sizes(int n) {
    int tr = round_half_up(0.70 * n);
    int va = round_half_up(0.15 * n);
    if (tr + va > n) va = n - tr;
    return {tr, va, n - tr - va};
}

struct PhCount {
    double ph;
    int count;
};

inline std::vector<PhCount> default_ph_counts(int per_ph) {
    std::vector<PhCount> out;
    for (double ph : {6.5, 6.2, 5.9, 5.85, 5.3, 5.0}) out.push_back({ph, per_ph});
    return out;
}

inline DatasetManifest plan_dataset(const std::vector<PhCount>& counts) {
    DatasetManifest m;
    std::uint64_t id = 0;
    for (const auto& pc : counts) {
        if (pc.count < 10)
            throw ConfigError("need at least 10 samples per pH level, got " +
                              std::to_string(pc.count));
        auto sizes = split_sizes(pc.count);
        const char* names[3] = {"train", "val", "test"};
        for (int s = 0, local = 0; s < 3; ++s)
            for (int k = 0; k < sizes[s]; ++k, ++local, ++id) {
                ManifestRow r;
                r.id = id;
                r.split = names[s];
                r.ph = pc.ph;
                r.label = map_ph_to_class(pc.ph);
                m.rows.push_back(r);
            }
    }
    return m;
}

inline std::string sample_stem(std::uint64_t id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(id));
    return buf;
}

inline DatasetManifest build_dataset(const std::vector<PhCount>& counts, std::uint64_t seed,
                                     const std::string& out_dir, int size) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "frames", ec);
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (!fs::is_directory(fs::path(out_dir) / "frames") ||
        !fs::is_directory(fs::path(out_dir) / "masks"))
        throw DataError("cannot create dataset directories under " + out_dir);

    DatasetManifest m = plan_dataset(counts);
    for (auto& r : m.rows) {
        GasFramePair p = synth_pair(r.ph, derive_seed(seed, r.id), size);
        std::string stem = sample_stem(r.id);
        r.co2_frame = "frames/" + stem + "_co2.pgm";
        r.ch4_frame = "frames/" + stem + "_ch4.pgm";
        r.co2_mask = "masks/" + stem + "_co2.pgm";
        r.ch4_mask = "masks/" + stem + "_ch4.pgm";
        r.has_co2 = p.has_co2;
        r.has_ch4 = p.has_ch4;
        write_pgm(out_dir + "/" + r.co2_frame, p.co2_frame);
        write_pgm(out_dir + "/" + r.ch4_frame, p.ch4_frame);
        write_pgm(out_dir + "/" + r.co2_mask, p.co2_mask);
        write_pgm(out_dir + "/" + r.ch4_mask, p.ch4_mask);
    }
    std::ofstream os(out_dir + "/manifest.csv", std::ios::binary);
    if (!os) throw DataError("cannot write manifest under " + out_dir);
    os << DatasetManifest::kHeader << "\n";
    for (const auto& r : m.rows)
        os << r.id << "," << r.split << "," << format_ph(r.ph) << "," << label_name(r.label)
           << "," << r.co2_frame << "," << r.ch4_frame << "," << r.co2_mask << ","
           << r.ch4_mask << "," << (r.has_co2 ? 1 : 0) << "," << (r.has_ch4 ? 1 : 0) << "\n";
    if (!os) throw DataError("manifest write failed under " + out_dir);
    return m;
}

inline DatasetManifest load_manifest(const std::string& dataset_dir) {
    std::ifstream is(dataset_dir + "/manifest.csv");
    if (!is) throw DataError("cannot open manifest: " + dataset_dir + "/manifest.csv");
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty manifest in " + dataset_dir);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != DatasetManifest::kHeader)
        throw DataError("unexpected manifest header: " + line);
    DatasetManifest m;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) f.push_back(tok);
        if (f.size() != 10) throw DataError("malformed manifest row: " + line);
        ManifestRow r;
        r.id = std::stoull(f[0]);
        r.split = f[1];
        if (r.split != "train" && r.split != "val" && r.split != "test")
            throw DataError("unknown split in manifest: " + r.split);
        r.ph = std::stod(f[2]);
        r.label = parse_label(f[3]);
        r.co2_frame = f[4];
        r.ch4_frame = f[5];
        r.co2_mask = f[6];
        r.ch4_mask = f[7];
        r.has_co2 = f[8] == "1";
        r.has_ch4 = f[9] == "1";
        m.rows.push_back(r);
    }
    return m;
}

inline GasFramePair load_pair(const std::string& dataset_dir, const ManifestRow& r) {
    GasFramePair p;
    p.ph = r.ph;
    p.label = r.label;
    p.has_co2 = r.has_co2;
    p.has_ch4 = r.has_ch4;
    p.co2_frame = read_pgm(dataset_dir + "/" + r.co2_frame);
    p.ch4_frame = read_pgm(dataset_dir + "/" + r.ch4_frame);
    p.co2_mask = read_pgm(dataset_dir + "/" + r.co2_mask);
    p.ch4_mask = read_pgm(dataset_dir + "/" + r.ch4_mask);
    for (const Mask* msk : {&p.co2_mask, &p.ch4_mask})
        for (std::size_t i = 0; i < msk->numel(); ++i)
            if ((*msk)[i] < 0 || (*msk)[i] > 2)
                throw DataError("mask label out of range in sample " + std::to_string(r.id));
    return p;
}

}  // namespace synth
}  // namespace fume
