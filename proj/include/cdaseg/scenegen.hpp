#ifndef CDASEG_SCENEGEN_HPP
#define CDASEG_SCENEGEN_HPP

// Deterministic generator of synthetic street scenes. Two parameter presets
// play the roles of a labeled source domain and an unlabeled target domain:
// they share class semantics and layout statistics' shape, but differ in
// appearance (texture scale, lighting, noise) and in horizon placement.
//
// Randomness: std::mt19937_64 seeded with derive_seed(seed, 0); see Rng.

#include <array>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cdaseg/common.hpp"
#include "cdaseg/raster.hpp"

namespace cdaseg {

namespace cls {
inline constexpr int kSky = 0;
inline constexpr int kBuilding = 1;
inline constexpr int kRoad = 2;
inline constexpr int kSidewalk = 3;
inline constexpr int kVegetation = 4;
inline constexpr int kCar = 5;
inline constexpr int kPole = 6;
inline constexpr int kSign = 7;
inline constexpr int kSemanticCount = 8;
}  // namespace cls

inline const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names = {"sky",        "building", "road", "sidewalk",
                                                   "vegetation", "car",      "pole", "sign"};
    return names;
}

inline std::string class_name(int c) {
    if (c < cls::kSemanticCount) return default_class_names()[static_cast<std::size_t>(c)];
    return "class" + std::to_string(c);
}

using Rgb = std::array<float, 3>;

/// Default palette; classes past the eight semantic ones get hashed colors.
inline std::vector<Rgb> default_palette(int num_classes) {
    std::vector<Rgb> p = {
        {0.55f, 0.70f, 0.92f},  // sky
        {0.58f, 0.46f, 0.38f},  // building
        {0.38f, 0.38f, 0.40f},  // road
        {0.66f, 0.62f, 0.58f},  // sidewalk
        {0.22f, 0.52f, 0.18f},  // vegetation
        {0.78f, 0.16f, 0.14f},  // car
        {0.16f, 0.16f, 0.22f},  // pole
        {0.96f, 0.84f, 0.10f},  // sign
    };
    for (int c = cls::kSemanticCount; c < num_classes; ++c) {
        Rng rng(derive_seed(0xC0105ULL, static_cast<std::uint64_t>(c)));
        p.push_back({static_cast<float>(rng.uniform(0.1, 0.9)), static_cast<float>(rng.uniform(0.1, 0.9)),
                     static_cast<float>(rng.uniform(0.1, 0.9))});
    }
    p.resize(static_cast<std::size_t>(num_classes));
    return p;
}

struct DomainParams {
    int num_classes = cls::kSemanticCount;
    double texture_period = 8.0;     // pixels
    double texture_amplitude = 0.12; // relative brightness swing of the texture
    double noise_sigma = 0.03;
    double horizon_frac = 0.35;
    double lighting_gain = 1.0;
    double object_rate = 6.0;
    double instance_jitter = 0.08;   // per-object color offset std
    std::vector<Rgb> palette = default_palette(cls::kSemanticCount);

    /// Throws ConfigError on invariant violations; warns on duplicate palette rows.
    void validate() const {
        if (num_classes < cls::kSemanticCount || num_classes > LabelMask::kMaxClasses)
            throw ConfigError("num_classes must be in [8, 32]");
        if (!(horizon_frac > 0.1 && horizon_frac < 0.6)) throw ConfigError("horizon_frac must be in (0.1, 0.6)");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
        if (!(lighting_gain > 0.0)) throw ConfigError("lighting_gain must be > 0");
        if (!(texture_period > 0.0)) throw ConfigError("texture_period must be > 0");
        if (!(texture_amplitude >= 0.0 && texture_amplitude < 1.0))
            throw ConfigError("texture_amplitude must be in [0, 1)");
        if (!(object_rate >= 0.0)) throw ConfigError("object_rate must be >= 0");
        if (!(instance_jitter >= 0.0)) throw ConfigError("instance_jitter must be >= 0");
        if (palette.size() != static_cast<std::size_t>(num_classes))
            throw ConfigError("palette must have num_classes rows");
        for (const auto& row : palette)
            for (float v : row)
                if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("palette values must be in [0, 1]");
        for (std::size_t a = 0; a < palette.size(); ++a)
            for (std::size_t b = a + 1; b < palette.size(); ++b)
                if (palette[a] == palette[b])
                    warn("palette rows " + std::to_string(a) + " and " + std::to_string(b) + " are identical");
    }

    bool operator==(const DomainParams&) const = default;
};

/// Clean, finely textured, evenly lit renderings.
inline DomainParams preset_source() {
    DomainParams p;
    p.texture_period = 8.0;
    p.noise_sigma = 0.02;
    p.horizon_frac = 0.33;
    p.lighting_gain = 1.0;
    return p;
}

/// Darker, noisier, coarser-textured renderings with a lower horizon.
inline DomainParams preset_target() {
    DomainParams p;
    p.texture_period = 5.0;
    p.noise_sigma = 0.05;
    p.horizon_frac = 0.40;
    p.lighting_gain = 0.75;
    p.instance_jitter = 0.2;
    return p;
}

// ---------------------------------------------------------------------------
// key=value serialization (keys optionally prefixed, e.g. "source.")

inline std::string format_palette(const std::vector<Rgb>& palette) {
    std::ostringstream os;
    os.precision(9);
    for (std::size_t i = 0; i < palette.size(); ++i) {
        if (i) os << ';';
        os << palette[i][0] << ',' << palette[i][1] << ',' << palette[i][2];
    }
    return os.str();
}

inline std::vector<Rgb> parse_palette(const std::string& text) {
    std::vector<Rgb> out;
    std::stringstream rows(text);
    std::string row;
    while (std::getline(rows, row, ';')) {
        Rgb rgb{};
        std::stringstream cells(row);
        std::string cell;
        int n = 0;
        while (std::getline(cells, cell, ',')) {
            if (n >= 3) throw ConfigError("palette row has more than 3 values: " + row);
            try {
                rgb[static_cast<std::size_t>(n++)] = std::stof(cell);
            } catch (const std::exception&) {
                throw ConfigError("bad palette value: " + cell);
            }
        }
        if (n != 3) throw ConfigError("palette row needs 3 values: " + row);
        out.push_back(rgb);
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> to_key_values(const DomainParams& p,
                                                                      const std::string& prefix = "") {
    auto num = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    return {
        {prefix + "num_classes", std::to_string(p.num_classes)},
        {prefix + "texture_period", num(p.texture_period)},
        {prefix + "texture_amplitude", num(p.texture_amplitude)},
        {prefix + "noise_sigma", num(p.noise_sigma)},
        {prefix + "horizon_frac", num(p.horizon_frac)},
        {prefix + "lighting_gain", num(p.lighting_gain)},
        {prefix + "object_rate", num(p.object_rate)},
        {prefix + "instance_jitter", num(p.instance_jitter)},
        {prefix + "palette", format_palette(p.palette)},
    };
}

/// Applies one key (without prefix) to the params. Returns false for unknown keys.
inline bool apply_key_value(DomainParams& p, const std::string& key, const std::string& value) {
    auto as_double = [&] {
        try {
            std::size_t used = 0;
            double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("bad number for " + key + ": " + value);
        }
    };
    if (key == "num_classes") {
        const int c = static_cast<int>(as_double());
        if (c != p.num_classes) {
            p.num_classes = c;
            if (c >= 1 && c <= LabelMask::kMaxClasses) p.palette = default_palette(c);
        }
    } else if (key == "texture_period") {
        p.texture_period = as_double();
    } else if (key == "texture_amplitude") {
        p.texture_amplitude = as_double();
    } else if (key == "noise_sigma") {
        p.noise_sigma = as_double();
    } else if (key == "horizon_frac") {
        p.horizon_frac = as_double();
    } else if (key == "lighting_gain") {
        p.lighting_gain = as_double();
    } else if (key == "object_rate") {
        p.object_rate = as_double();
    } else if (key == "instance_jitter") {
        p.instance_jitter = as_double();
    } else if (key == "palette") {
        p.palette = parse_palette(value);
    } else {
        return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Generation

struct SceneSample {
    Image image;
    LabelMask mask;
};

namespace detail {

/// Paints class labels plus two image-only attributes per pixel: a color
/// offset (per object instance) and a shade multiplier (windows and similar
/// decorations).
struct Canvas {
    int w, h;
    std::vector<std::uint8_t> label;
    std::vector<std::uint16_t> instance;
    std::vector<float> shade;
    std::vector<Rgb> offsets{Rgb{0.0f, 0.0f, 0.0f}};

    Canvas(int w_, int h_)
        : w(w_), h(h_), label(static_cast<std::size_t>(w_) * h_, 0), instance(label.size(), 0), shade(label.size(), 1.0f) {}

    std::uint16_t new_instance(const Rgb& offset) {
        offsets.push_back(offset);
        return static_cast<std::uint16_t>(offsets.size() - 1);
    }

    void set(int r, int c, int cls, std::uint16_t inst) {
        const std::size_t p = static_cast<std::size_t>(r) * w + c;
        label[p] = static_cast<std::uint8_t>(cls);
        instance[p] = inst;
        shade[p] = 1.0f;
    }

    void rect(int r0, int c0, int r1, int c1, int cls, std::uint16_t inst = 0) {
        for (int r = std::max(r0, 0); r < std::min(r1, h); ++r)
            for (int c = std::max(c0, 0); c < std::min(c1, w); ++c) set(r, c, cls, inst);
    }

    void darken(int r0, int c0, int r1, int c1, float s) {
        for (int r = std::max(r0, 0); r < std::min(r1, h); ++r)
            for (int c = std::max(c0, 0); c < std::min(c1, w); ++c) shade[static_cast<std::size_t>(r) * w + c] = s;
    }

    void ellipse(double cr, double cc, double rr, double rc, int cls, std::uint16_t inst = 0) {
        for (int r = std::max(0, static_cast<int>(cr - rr)); r <= std::min(h - 1, static_cast<int>(cr + rr)); ++r)
            for (int c = std::max(0, static_cast<int>(cc - rc)); c <= std::min(w - 1, static_cast<int>(cc + rc)); ++c) {
                const double dr = (r - cr) / rr, dc = (c - cc) / rc;
                if (dr * dr + dc * dc <= 1.0) set(r, c, cls, inst);
            }
    }
};

}  // namespace detail

inline SceneSample generate_scene(const DomainParams& params, int width, int height, std::uint64_t seed) {
    if (width < 16 || height < 16) throw ShapeError("scene dimensions must be at least 16x16");
    params.validate();
    Rng rng(derive_seed(seed, 0));
    const int W = width, H = height;
    detail::Canvas cv(W, H);

    // Background bands: sky / building skyline / sidewalk / road.
    const int horizon = std::clamp(
        static_cast<int>(std::lround(H * params.horizon_frac + rng.normal(0.0, 0.07 * H))), 2, 3 * H / 5);
    const int road_top = std::clamp(
        static_cast<int>(std::lround(horizon + (H - horizon) * rng.uniform(0.25, 0.70))), horizon + 3, H - 3);
    const int sidewalk_top =
        std::clamp(road_top - static_cast<int>(std::lround(H * rng.uniform(0.03, 0.15))), horizon + 1, road_top - 1);
    const double skyline_spread = rng.uniform(0.03, 0.30);

    const auto jitter = [&](double scale) {
        Rgb d{};
        for (auto& v : d) v = static_cast<float>(scale * params.instance_jitter * rng.normal());
        return d;
    };
    cv.rect(0, 0, H, W, cls::kSky);
    for (int c0 = 0; c0 < W;) {
        const int bw = rng.range(std::max(2, W / 8), std::max(3, W / 3));
        const int top = std::clamp(
            horizon + static_cast<int>(std::lround(rng.uniform(-skyline_spread, 0.04) * H)), 1, sidewalk_top);
        cv.rect(top, c0, sidewalk_top, c0 + bw, cls::kBuilding, cv.new_instance(jitter(1.0)));
        if (rng.uniform() < 0.6) {
            // window grid, image-only decoration
            const int pitch = std::max(3, W / 16);
            for (int r = top + 2; r + 2 < sidewalk_top; r += pitch)
                for (int c = c0 + 1; c + 2 <= std::min(W, c0 + bw) - 1; c += pitch) cv.darken(r, c, r + 2, c + 2, 0.55f);
        }
        c0 += bw;
    }
    cv.rect(sidewalk_top, 0, road_top, W, cls::kSidewalk);
    cv.rect(road_top, 0, H, W, cls::kRoad);

    // Foreground objects in painter's order.
    const int n_objects = rng.poisson(params.object_rate * rng.uniform(0.3, 1.7));
    for (int i = 0; i < n_objects; ++i) {
        const double kind = rng.uniform();
        const int extra = params.num_classes - cls::kSemanticCount;
        if (extra > 0 && kind < 0.1) {
            const int c = cls::kSemanticCount + static_cast<int>(rng.index(static_cast<std::size_t>(extra)));
            const int sz = std::max(2, static_cast<int>(rng.uniform(0.04, 0.10) * W));
            const int r = rng.range(horizon, std::max(horizon, sidewalk_top - sz));
            const int col = rng.range(0, W - sz);
            cv.rect(r, col, r + sz, col + sz, c, cv.new_instance(jitter(0.5)));
        } else if (kind < 0.40) {
            const int cw = std::max(4, static_cast<int>(rng.uniform(0.12, 0.25) * W));
            const int ch = std::max(3, static_cast<int>(rng.uniform(0.07, 0.13) * H));
            const int bottom = rng.range(std::min(H, road_top + ch), H);
            const int col = rng.range(-cw / 3, W - 2 * cw / 3);
            Rgb paint = jitter(0.5);
            if (rng.uniform() < 0.5) {
                // repainted car: any body color
                for (int k = 0; k < 3; ++k)
                    paint[k] = static_cast<float>(rng.uniform(0.1, 0.9)) - params.palette[cls::kCar][k];
            }
            cv.rect(bottom - ch, col, bottom, col + cw, cls::kCar, cv.new_instance(paint));
            cv.darken(bottom - ch + 1, col + cw / 5, bottom - ch + 1 + std::max(1, ch / 3), col + 4 * cw / 5, 0.6f);
        } else if (kind < 0.65) {
            const int len = std::max(4, static_cast<int>(rng.uniform(0.20, 0.40) * H));
            const int pw = W >= 48 ? rng.range(1, 2) : 1;
            const int col = rng.range(0, W - pw);
            const int bottom = road_top - rng.range(0, std::max(0, (road_top - sidewalk_top) / 2));
            cv.rect(bottom - len, col, bottom, col + pw, cls::kPole, cv.new_instance(jitter(0.5)));
            if (rng.uniform() < 0.6) {
                const int s = std::max(3, static_cast<int>(rng.uniform(0.05, 0.08) * W));
                const int sc = std::clamp(col + pw / 2 - s / 2, 0, W - s);
                cv.rect(bottom - len - s / 2, sc, bottom - len - s / 2 + s, sc + s, cls::kSign,
                        cv.new_instance(jitter(0.5)));
            }
        } else if (kind < 0.75) {
            const int s = std::max(3, static_cast<int>(rng.uniform(0.05, 0.08) * W));
            const int r = rng.range(horizon, std::max(horizon, sidewalk_top - s));
            const int col = rng.range(0, W - s);
            cv.rect(r, col, r + s, col + s, cls::kSign, cv.new_instance(jitter(0.5)));
        } else {
            const double rr = rng.uniform(0.06, 0.14) * H;
            const double rc = rng.uniform(0.06, 0.14) * W;
            const double cr = rng.uniform(horizon, road_top);
            const double cc = rng.uniform(0, W);
            cv.ellipse(cr, cc, rr, rc, cls::kVegetation, cv.new_instance(jitter(0.5)));
        }
    }

    // Appearance: palette color with per-image jitter, texture, lighting, pixel noise.
    // Jitter scales with noise_sigma so a noise-free domain renders exact palette colors.
    const int C = params.num_classes;
    std::vector<Rgb> colors(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < 3; ++k)
            colors[c][k] = params.palette[c][k] + static_cast<float>(params.noise_sigma * rng.normal());
    const double gain = params.lighting_gain * (1.0 + 2.0 * params.noise_sigma * rng.normal());
    const double phase_r = rng.uniform(0.0, 2.0 * M_PI);
    const double phase_c = rng.uniform(0.0, 2.0 * M_PI);
    const double omega = 2.0 * M_PI / params.texture_period;

    SceneSample out{Image(W, H, 3), LabelMask(W, H, C)};
    out.mask.labels = cv.label;
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * W + c;
            const int k = cv.label[p];
            double tex = 1.0;
            if (k != cls::kSky) {
                const double cls_phase = 0.7 * k;
                tex += params.texture_amplitude * std::sin(omega * c + phase_c + cls_phase) *
                       std::sin(omega * r + phase_r + 1.3 * cls_phase);
            }
            for (int ch = 0; ch < 3; ++ch) {
                const double base = colors[k][ch] + cv.offsets[cv.instance[p]][ch];
                const double v = base * tex * cv.shade[p] * gain + params.noise_sigma * rng.normal();
                out.image.at(r, c, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

inline Dataset generate_dataset(const DomainParams& params, std::size_t n, int width, int height,
                                std::uint64_t base_seed, Domain domain = Domain::Source) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    Dataset ds;
    ds.num_classes = params.num_classes;
    ds.domain = domain;
    ds.items.resize(n);
    parallel_for(n, [&](std::size_t i) {
        auto s = generate_scene(params, width, height, base_seed + i);
        char id[32];
        std::snprintf(id, sizeof id, "%05zu", i);
        ds.items[i] = DatasetItem{id, std::move(s.image), std::move(s.mask)};
    });
    return ds;
}

}  // namespace cdaseg

#endif  // CDASEG_SCENEGEN_HPP
