#ifndef CDASEG_LABELDIST_HPP
#define CDASEG_LABELDIST_HPP

// Label distributions over the C classes and the estimators that predict an
// image's global distribution from its appearance: multinomial logistic
// regression trained on soft targets, k nearest neighbours, the source mean,
// and the uniform distribution.

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdaseg/common.hpp"
#include "cdaseg/raster.hpp"

namespace cdaseg {

inline constexpr double kLogClamp = 1e-12;

struct LabelDistribution {
    std::vector<double> probs;

    LabelDistribution() = default;
    explicit LabelDistribution(std::vector<double> p) : probs(std::move(p)) {}

    std::size_t size() const { return probs.size(); }
    double operator[](std::size_t c) const { return probs[c]; }

    bool is_simplex(double tol = 1e-6) const {
        double s = 0.0;
        for (double v : probs) {
            if (!(v >= 0.0)) return false;
            s += v;
        }
        return std::abs(s - 1.0) <= tol;
    }

    static LabelDistribution one_hot(int num_classes, int c) {
        std::vector<double> p(static_cast<std::size_t>(num_classes), 0.0);
        p[static_cast<std::size_t>(c)] = 1.0;
        return LabelDistribution(std::move(p));
    }

    bool operator==(const LabelDistribution&) const = default;
};

// ---------------------------------------------------------------------------
// Distribution math

/// Fraction of non-void pixels per class.
inline LabelDistribution dist_from_mask(const LabelMask& mask) {
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(mask.num_classes), 0);
    std::uint64_t total = 0;
    for (auto v : mask.labels) {
        if (v == LabelMask::kVoid) continue;
        if (v >= mask.num_classes) throw LabelRangeError(-1, -1, v, mask.num_classes);
        ++counts[v];
        ++total;
    }
    if (total == 0) throw EmptyRegionError("mask has no labeled pixels");
    std::vector<double> p(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) p[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
    return LabelDistribution(std::move(p));
}

/// Mean predicted distribution over `region` (pixel indices), or over all pixels.
inline LabelDistribution dist_from_prediction(const Prediction& pred,
                                              std::optional<std::span<const std::uint32_t>> region = std::nullopt) {
    const std::size_t C = static_cast<std::size_t>(pred.num_classes);
    std::vector<double> acc(C, 0.0);
    std::size_t n = 0;
    auto add = [&](std::size_t p) {
        if (p >= pred.pixels()) throw ShapeError("region pixel outside prediction");
        auto row = pred.pixel(p);
        for (std::size_t c = 0; c < C; ++c) acc[c] += row[c];
        ++n;
    };
    if (region) {
        for (auto p : *region) add(p);
    } else {
        for (std::size_t p = 0; p < pred.pixels(); ++p) add(p);
    }
    if (n == 0) throw EmptyRegionError("empty prediction region");
    for (auto& v : acc) v /= static_cast<double>(n);
    return LabelDistribution(std::move(acc));
}

inline double entropy(const LabelDistribution& p) {
    double h = 0.0;
    for (double v : p.probs)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

/// C(p, p_hat) = H(p) + KL(p || p_hat) = -sum p log p_hat, with p_hat clamped at 1e-12.
inline double cross_entropy(const LabelDistribution& p, const LabelDistribution& p_hat) {
    if (p.size() != p_hat.size()) throw ShapeError("distribution sizes differ");
    double ce = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c)
        if (p[c] > 0.0) ce -= p[c] * std::log(std::max(p_hat[c], kLogClamp));
    return ce;
}

/// Symmetric histogram chi-squared distance, in [0, 1] for simplex inputs.
inline double chi2_distance(const LabelDistribution& p, const LabelDistribution& q) {
    if (p.size() != q.size()) throw ShapeError("distribution sizes differ");
    double d = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
        const double s = p[c] + q[c];
        if (s > 0.0) d += (p[c] - q[c]) * (p[c] - q[c]) / s;
    }
    return 0.5 * d;
}

inline LabelDistribution source_mean(std::span<const LabelDistribution> dists) {
    if (dists.empty()) throw EmptyRegionError("source_mean of an empty list");
    std::vector<double> acc(dists.front().size(), 0.0);
    for (const auto& d : dists) {
        if (d.size() != acc.size()) throw ShapeError("distribution sizes differ");
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += d[c];
    }
    for (auto& v : acc) v /= static_cast<double>(dists.size());
    return LabelDistribution(std::move(acc));
}

inline LabelDistribution uniform_dist(int num_classes) {
    if (num_classes < 1) throw ShapeError("uniform_dist needs at least one class");
    return LabelDistribution(std::vector<double>(static_cast<std::size_t>(num_classes), 1.0 / num_classes));
}

// ---------------------------------------------------------------------------
// Global image descriptor

/// 96-D descriptor for 3-channel images: per-channel 16-bin histograms followed
/// by per-channel means of a 4x4 spatial grid. Histogram values are taken after
/// rescaling the image so its mean intensity is 0.5 (clamped to [0,1]), which
/// makes the histogram block insensitive to a global lighting gain.
struct GlobalFeature {
    static constexpr int kBins = 16;
    static constexpr int kGrid = 4;
    static constexpr int kDim = 3 * kBins + kGrid * kGrid * 3;

    std::vector<double> vector;

    std::size_t size() const { return vector.size(); }
    bool operator==(const GlobalFeature&) const = default;
};

inline GlobalFeature global_features(const Image& img) {
    if (img.channels != 3) throw ShapeError("global_features expects a 3-channel image");
    constexpr int B = GlobalFeature::kBins, G = GlobalFeature::kGrid;
    GlobalFeature f;
    f.vector.assign(GlobalFeature::kDim, 0.0);
    double mean_intensity = 0.0;
    for (float v : img.data) mean_intensity += v;
    mean_intensity /= static_cast<double>(img.data.size());
    const double gain = mean_intensity > 0.0 ? 0.5 / mean_intensity : 1.0;
    std::vector<double> cell_count(G * G, 0.0);
    const double npix = static_cast<double>(img.pixels());
    for (int r = 0; r < img.height; ++r) {
        const int gr = r * G / img.height;
        for (int c = 0; c < img.width; ++c) {
            const int gc = c * G / img.width;
            const int cell = gr * G + gc;
            cell_count[cell] += 1.0;
            for (int ch = 0; ch < 3; ++ch) {
                const float v = img.at(r, c, ch);
                const double normalized = std::min(1.0, v * gain);
                const int bin = std::clamp(static_cast<int>(normalized * B), 0, B - 1);
                f.vector[static_cast<std::size_t>(ch * B + bin)] += 1.0 / npix;
                f.vector[static_cast<std::size_t>(3 * B + cell * 3 + ch)] += v;
            }
        }
    }
    for (int cell = 0; cell < G * G; ++cell)
        for (int ch = 0; ch < 3; ++ch)
            if (cell_count[cell] > 0) f.vector[static_cast<std::size_t>(3 * B + cell * 3 + ch)] /= cell_count[cell];
    return f;
}

/// Per-dimension z-scoring fitted on a reference set. Zero-variance dimensions get unit scale.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Standardizer fit(std::span<const GlobalFeature> feats) {
        if (feats.empty()) throw EmptyRegionError("cannot fit a standardizer on no features");
        const std::size_t D = feats.front().size();
        Standardizer s{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
        for (const auto& f : feats)
            for (std::size_t d = 0; d < D; ++d) s.mean[d] += f.vector[d];
        for (auto& m : s.mean) m /= static_cast<double>(feats.size());
        for (const auto& f : feats)
            for (std::size_t d = 0; d < D; ++d) s.scale[d] += (f.vector[d] - s.mean[d]) * (f.vector[d] - s.mean[d]);
        for (auto& v : s.scale) {
            v = std::sqrt(v / static_cast<double>(feats.size()));
            if (v < 1e-8) v = 1.0;
        }
        return s;
    }

    static Standardizer identity(std::size_t D) { return {std::vector<double>(D, 0.0), std::vector<double>(D, 1.0)}; }

    GlobalFeature apply(const GlobalFeature& f) const {
        if (f.size() != mean.size()) throw ShapeError("feature dimension mismatch in standardizer");
        GlobalFeature out = f;
        for (std::size_t d = 0; d < out.size(); ++d) out.vector[d] = (out.vector[d] - mean[d]) / scale[d];
        return out;
    }

    std::vector<GlobalFeature> apply(std::span<const GlobalFeature> fs) const {
        std::vector<GlobalFeature> out;
        out.reserve(fs.size());
        for (const auto& f : fs) out.push_back(apply(f));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Multinomial logistic regression with soft targets

struct LogRegModel {
    int num_classes = 0;
    int dim = 0;
    std::vector<double> weights;  // num_classes x dim, row-major
    std::vector<double> bias;     // num_classes
    std::size_t trained_on = 0;

    static LogRegModel zeros(int C, int D) {
        return {C, D, std::vector<double>(static_cast<std::size_t>(C) * D, 0.0),
                std::vector<double>(static_cast<std::size_t>(C), 0.0), 0};
    }
};

struct LogRegOptions {
    int epochs = 200;
    double lr = 0.05;
    double l2 = 1e-3;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
};

namespace detail {

inline void softmax_inplace(std::span<double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto& v : z) {
        v = std::exp(v - m);
        s += v;
    }
    for (auto& v : z) v /= s;
}

inline std::vector<double> logreg_logits(const LogRegModel& m, const GlobalFeature& x) {
    std::vector<double> z(m.bias);
    for (int c = 0; c < m.num_classes; ++c) {
        const double* w = m.weights.data() + static_cast<std::size_t>(c) * m.dim;
        double acc = 0.0;
        for (int d = 0; d < m.dim; ++d) acc += w[d] * x.vector[static_cast<std::size_t>(d)];
        z[static_cast<std::size_t>(c)] += acc;
    }
    return z;
}

}  // namespace detail

inline LabelDistribution predict_logreg(const LogRegModel& m, const GlobalFeature& x) {
    if (x.size() != static_cast<std::size_t>(m.dim)) throw ShapeError("feature dimension does not match model");
    auto z = detail::logreg_logits(m, x);
    detail::softmax_inplace(z);
    return LabelDistribution(std::move(z));
}

/// Mean soft-target cross-entropy plus l2 * ||W||^2 over the training set.
inline double logreg_objective(const LogRegModel& m, std::span<const GlobalFeature> feats,
                               std::span<const LabelDistribution> targets, double l2) {
    double loss = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) loss += cross_entropy(targets[i], predict_logreg(m, feats[i]));
    loss /= static_cast<double>(feats.size());
    double wn = 0.0;
    for (double w : m.weights) wn += w * w;
    return loss + l2 * wn;
}

/// Mini-batch proximal gradient descent: a gradient step on the data term, then
/// the closed-form shrink of the l2 term, which stays stable for any l2.
inline LogRegModel fit_logreg(std::span<const GlobalFeature> feats, std::span<const LabelDistribution> targets,
                              const LogRegOptions& opt) {
    if (feats.empty() || feats.size() != targets.size())
        throw ShapeError("fit_logreg needs equal-length, nonempty feature and target lists");
    const int D = static_cast<int>(feats.front().size());
    const int C = static_cast<int>(targets.front().size());
    for (std::size_t i = 0; i < feats.size(); ++i)
        if (feats[i].size() != static_cast<std::size_t>(D) || targets[i].size() != static_cast<std::size_t>(C))
            throw ShapeError("inconsistent feature or target dimension");
    LogRegModel m = LogRegModel::zeros(C, D);
    m.trained_on = feats.size();
    Rng rng(derive_seed(opt.seed, 11));
    const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
    std::vector<double> gw(m.weights.size()), gb(m.bias.size());
    const double shrink = 1.0 / (1.0 + 2.0 * opt.lr * opt.l2);
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        const auto order = rng.permutation(feats.size());
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (std::size_t k = start; k < end; ++k) {
                const auto& x = feats[order[k]];
                auto q = detail::logreg_logits(m, x);
                detail::softmax_inplace(q);
                for (int c = 0; c < C; ++c) {
                    const double r = q[static_cast<std::size_t>(c)] - targets[order[k]][static_cast<std::size_t>(c)];
                    gb[static_cast<std::size_t>(c)] += r;
                    double* g = gw.data() + static_cast<std::size_t>(c) * D;
                    for (int d = 0; d < D; ++d) g[d] += r * x.vector[static_cast<std::size_t>(d)];
                }
            }
            const double step = opt.lr / static_cast<double>(end - start);
            for (std::size_t i = 0; i < m.weights.size(); ++i) m.weights[i] = (m.weights[i] - step * gw[i]) * shrink;
            for (std::size_t c = 0; c < m.bias.size(); ++c) m.bias[c] -= step * gb[c];
        }
        for (double w : m.weights)
            if (!std::isfinite(w)) throw DivergenceError("logistic regression diverged", epoch);
        for (double b : m.bias)
            if (!std::isfinite(b)) throw DivergenceError("logistic regression diverged", epoch);
    }
    return m;
}

/// Writes <prefix>.weights.cdat, <prefix>.bias.cdat and the <prefix>.txt sidecar
/// (dim, classes, trained_on). A standardizer, when given, goes to <prefix>.scale.cdat.
inline void save_logreg(const LogRegModel& m, const std::filesystem::path& prefix,
                        const Standardizer* standardizer = nullptr) {
    auto to_f32 = [](const std::vector<double>& v) { return std::vector<float>(v.begin(), v.end()); };
    const std::string base = prefix.string();
    save_tensor(Tensor({static_cast<std::uint32_t>(m.num_classes), static_cast<std::uint32_t>(m.dim)},
                       to_f32(m.weights)),
                base + ".weights.cdat");
    save_tensor(Tensor({static_cast<std::uint32_t>(m.num_classes)}, to_f32(m.bias)), base + ".bias.cdat");
    if (standardizer) {
        std::vector<float> v = to_f32(standardizer->mean);
        auto s = to_f32(standardizer->scale);
        v.insert(v.end(), s.begin(), s.end());
        save_tensor(Tensor({2u, static_cast<std::uint32_t>(m.dim)}, v), base + ".scale.cdat");
    }
    std::ofstream side(base + ".txt");
    side << "dim=" << m.dim << "\nclasses=" << m.num_classes << "\ntrained_on=" << m.trained_on
         << "\nstandardized=" << (standardizer ? 1 : 0) << "\n";
    if (!side) throw IoError("cannot write sidecar", base + ".txt");
}

struct LoadedLogReg {
    LogRegModel model;
    std::optional<Standardizer> standardizer;
};

inline LoadedLogReg load_logreg(const std::filesystem::path& prefix) {
    const std::string base = prefix.string();
    std::ifstream side(base + ".txt");
    if (!side) throw IoError("cannot read sidecar", base + ".txt");
    LoadedLogReg out;
    int standardized = 0;
    std::string line;
    while (std::getline(side, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = line.substr(0, eq);
        const long v = std::stol(line.substr(eq + 1));
        if (k == "dim") out.model.dim = static_cast<int>(v);
        if (k == "classes") out.model.num_classes = static_cast<int>(v);
        if (k == "trained_on") out.model.trained_on = static_cast<std::size_t>(v);
        if (k == "standardized") standardized = static_cast<int>(v);
    }
    const auto w = load_tensor(base + ".weights.cdat");
    const auto b = load_tensor(base + ".bias.cdat");
    if (w.values.size() != static_cast<std::size_t>(out.model.dim) * out.model.num_classes ||
        b.values.size() != static_cast<std::size_t>(out.model.num_classes))
        throw ShapeError("logistic regression tensors do not match sidecar");
    out.model.weights.assign(w.values.begin(), w.values.end());
    out.model.bias.assign(b.values.begin(), b.values.end());
    if (standardized) {
        const auto s = load_tensor(base + ".scale.cdat");
        const auto D = static_cast<std::size_t>(out.model.dim);
        if (s.values.size() != 2 * D) throw ShapeError("standardizer tensor has wrong size");
        out.standardizer = Standardizer{std::vector<double>(s.values.begin(), s.values.begin() + D),
                                        std::vector<double>(s.values.begin() + D, s.values.end())};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

/// Mean distribution of the k sources nearest in Euclidean feature distance; ties go to the lower index.
inline LabelDistribution knn_estimate(const GlobalFeature& query, std::span<const GlobalFeature> source_feats,
                                      std::span<const LabelDistribution> source_dists, std::size_t k) {
    if (source_feats.empty()) throw EmptyRegionError("knn_estimate needs a nonempty source set");
    if (source_feats.size() != source_dists.size()) throw ShapeError("source features and distributions differ in length");
    if (k < 1 || k > source_feats.size()) throw ConfigError("k must be in [1, |source|]");
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(source_feats.size());
    for (std::size_t i = 0; i < source_feats.size(); ++i) {
        if (source_feats[i].size() != query.size()) throw ShapeError("feature dimension mismatch");
        double s = 0.0;
        for (std::size_t j = 0; j < query.size(); ++j) {
            const double diff = query.vector[j] - source_feats[i].vector[j];
            s += diff * diff;
        }
        d.emplace_back(s, i);
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<LabelDistribution> nearest;
    nearest.reserve(k);
    for (std::size_t i = 0; i < k; ++i) nearest.push_back(source_dists[d[i].second]);
    return source_mean(nearest);
}

// ---------------------------------------------------------------------------
// Estimator bundle

enum class Estimator { LogReg, Knn, SourceMean, Uniform };

inline Estimator parse_estimator(const std::string& s) {
    if (s == "lr" || s == "logreg") return Estimator::LogReg;
    if (s == "knn" || s == "nn") return Estimator::Knn;
    if (s == "srcmean" || s == "source_mean") return Estimator::SourceMean;
    if (s == "uniform") return Estimator::Uniform;
    throw ConfigError("unknown estimator: " + s);
}

inline std::string estimator_name(Estimator e) {
    switch (e) {
        case Estimator::LogReg: return "lr";
        case Estimator::Knn: return "knn";
        case Estimator::SourceMean: return "srcmean";
        case Estimator::Uniform: return "uniform";
    }
    return "?";
}

struct GlobalEstimatorOptions {
    bool standardize = true;
    // Z-score target features with statistics of the (unlabeled) target images
    // instead of the source statistics.
    bool per_domain_standardize = true;
    std::size_t knn_k = 5;
    LogRegOptions logreg;
};

/// All four global-distribution estimators fitted on one labeled source set.
struct GlobalEstimators {
    int num_classes = 0;
    GlobalEstimatorOptions options;
    Standardizer standardizer;                // fitted on source features
    std::vector<GlobalFeature> source_feats;  // standardized
    std::vector<LabelDistribution> source_dists;
    LabelDistribution mean;
    LogRegModel logreg;

    static GlobalEstimators fit(const Dataset& source, const GlobalEstimatorOptions& opt) {
        if (source.items.empty()) throw EmptyRegionError("empty source dataset");
        GlobalEstimators e;
        e.num_classes = source.num_classes;
        e.options = opt;
        e.options.knn_k = std::min(opt.knn_k, source.items.size());
        std::vector<GlobalFeature> raw(source.items.size());
        e.source_dists.resize(source.items.size());
        parallel_for(source.items.size(), [&](std::size_t i) {
            const auto& it = source.items[i];
            if (!it.mask) throw Error("source item " + it.id + " has no mask");
            raw[i] = global_features(it.image);
            e.source_dists[i] = dist_from_mask(*it.mask);
        });
        e.standardizer = opt.standardize ? Standardizer::fit(raw) : Standardizer::identity(raw.front().size());
        e.source_feats = e.standardizer.apply(raw);
        e.mean = source_mean(e.source_dists);
        e.logreg = fit_logreg(e.source_feats, e.source_dists, opt.logreg);
        return e;
    }

    /// Standardizer to use for images of a domain, given that domain's raw features.
    Standardizer standardizer_for(std::span<const GlobalFeature> domain_feats) const {
        if (options.standardize && options.per_domain_standardize && !domain_feats.empty())
            return Standardizer::fit(domain_feats);
        return standardizer;
    }

    /// Estimate from an already-standardized feature.
    LabelDistribution estimate(Estimator which, const GlobalFeature& standardized) const {
        switch (which) {
            case Estimator::Uniform: return uniform_dist(num_classes);
            case Estimator::SourceMean: return mean;
            case Estimator::LogReg: return predict_logreg(logreg, standardized);
            case Estimator::Knn: return knn_estimate(standardized, source_feats, source_dists, options.knn_k);
        }
        throw ConfigError("unknown estimator");
    }

    /// Estimates for every image of one domain, standardizing with that domain's statistics.
    std::vector<LabelDistribution> estimate_all(Estimator which, std::span<const Image> images) const {
        std::vector<GlobalFeature> raw(images.size());
        parallel_for(images.size(), [&](std::size_t i) { raw[i] = global_features(images[i]); });
        const Standardizer st = standardizer_for(raw);
        std::vector<LabelDistribution> out(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) out[i] = estimate(which, st.apply(raw[i]));
        return out;
    }
};

}  // namespace cdaseg

#endif  // CDASEG_LABELDIST_HPP
