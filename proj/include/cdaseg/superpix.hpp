#ifndef CDASEG_SUPERPIX_HPP
#define CDASEG_SUPERPIX_HPP

// Superpixels and the landmark-superpixel pipeline:
//   slic -> dominant_label (source) / sp_features -> train_sp_svm (source)
//   slic -> sp_features -> classify_sp -> select_landmarks (target)

#include <array>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cdaseg/common.hpp"
#include "cdaseg/labeldist.hpp"
#include "cdaseg/raster.hpp"
#include "cdaseg/scenegen.hpp"

namespace cdaseg {

struct SuperpixelPartition {
    int width = 0;
    int height = 0;
    int count = 0;                        // K
    std::vector<std::uint32_t> assignment;  // row-major superpixel ids
    std::vector<std::array<double, 2>> centroids;  // (row, col) in pixel-index coordinates
    std::vector<std::uint32_t> sizes;

    std::size_t pixels() const { return assignment.size(); }
    std::uint32_t at(int row, int col) const { return assignment[static_cast<std::size_t>(row) * width + col]; }

    /// Seed spacing S = sqrt(W * H / K).
    double spacing() const { return std::sqrt(static_cast<double>(width) * height / std::max(count, 1)); }

    /// Pixel index lists per superpixel, each in raster order.
    std::vector<std::vector<std::uint32_t>> members() const {
        std::vector<std::vector<std::uint32_t>> out(static_cast<std::size_t>(count));
        for (std::size_t k = 0; k < out.size(); ++k) out[k].reserve(sizes[k]);
        for (std::size_t p = 0; p < assignment.size(); ++p) out[assignment[p]].push_back(static_cast<std::uint32_t>(p));
        return out;
    }

    /// Recomputes sizes and centroids from the assignment.
    void refresh_stats() {
        sizes.assign(static_cast<std::size_t>(count), 0);
        centroids.assign(static_cast<std::size_t>(count), {0.0, 0.0});
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) {
                const auto k = at(r, c);
                ++sizes[k];
                centroids[k][0] += r;
                centroids[k][1] += c;
            }
        for (int k = 0; k < count; ++k)
            if (sizes[k]) {
                centroids[k][0] /= sizes[k];
                centroids[k][1] /= sizes[k];
            }
    }

    /// Superpixel ids as a P5-compatible mask (requires K <= 255).
    LabelMask as_mask() const {
        if (count > 255) throw ShapeError("partition has more than 255 superpixels");
        LabelMask m;
        m.width = width;
        m.height = height;
        m.num_classes = count;
        m.labels.resize(assignment.size());
        for (std::size_t p = 0; p < assignment.size(); ++p) m.labels[p] = static_cast<std::uint8_t>(assignment[p]);
        return m;
    }
};

namespace detail {

/// Grid of nx * ny seeds closest to K, preferring square cells.
inline std::pair<int, int> seed_grid(int W, int H, int K) {
    int best_nx = 1, best_ny = 1;
    double best_score = std::numeric_limits<double>::infinity();
    for (int nx = 1; nx <= std::min(W, K); ++nx) {
        const int ny = std::clamp(static_cast<int>(std::lround(static_cast<double>(K) / nx)), 1, H);
        const double aspect = std::abs(std::log((static_cast<double>(W) / nx) / (static_cast<double>(H) / ny)));
        const double score = 1000.0 * std::abs(nx * ny - K) + aspect;
        if (score < best_score) {
            best_score = score;
            best_nx = nx;
            best_ny = ny;
        }
    }
    return {best_nx, best_ny};
}

/// Gives every label exactly one 4-connected component: each label keeps its
/// largest component and other components are merged into the adjacent
/// kept superpixel with the nearest mean color. Labels are then renumbered
/// densely in ascending order of their original id.
inline int enforce_connectivity(std::vector<std::uint32_t>& labels, const Image& img, int num_labels) {
    const int W = img.width, H = img.height, F = img.channels;
    const std::size_t N = labels.size();
    std::vector<int> comp(N, -1);
    std::vector<std::uint32_t> comp_label;
    std::vector<std::size_t> comp_size;
    std::vector<std::size_t> comp_first;
    std::vector<std::size_t> stack;
    for (std::size_t p0 = 0; p0 < N; ++p0) {
        if (comp[p0] >= 0) continue;
        const int id = static_cast<int>(comp_label.size());
        comp_label.push_back(labels[p0]);
        comp_first.push_back(p0);
        std::size_t size = 0;
        stack.assign(1, p0);
        comp[p0] = id;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++size;
            const int r = static_cast<int>(p / W), c = static_cast<int>(p % W);
            const std::array<std::pair<int, int>, 4> nb = {{{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}}};
            for (auto [rr, cc] : nb) {
                if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                const std::size_t q = static_cast<std::size_t>(rr) * W + cc;
                if (comp[q] < 0 && labels[q] == labels[p0]) {
                    comp[q] = id;
                    stack.push_back(q);
                }
            }
        }
        comp_size.push_back(size);
    }

    const std::size_t ncomp = comp_label.size();
    std::vector<int> keeper(static_cast<std::size_t>(num_labels), -1);
    for (std::size_t i = 0; i < ncomp; ++i) {
        int& k = keeper[comp_label[i]];
        if (k < 0 || comp_size[i] > comp_size[static_cast<std::size_t>(k)]) k = static_cast<int>(i);
    }
    // owner[i]: label the component ends up with, or -1 while still orphaned.
    std::vector<long> owner(ncomp, -1);
    for (int l = 0; l < num_labels; ++l)
        if (keeper[l] >= 0) owner[static_cast<std::size_t>(keeper[l])] = l;

    // Mean color per label over kept components.
    std::vector<double> color(static_cast<std::size_t>(num_labels) * F, 0.0);
    std::vector<double> count(static_cast<std::size_t>(num_labels), 0.0);
    for (std::size_t p = 0; p < N; ++p) {
        const long o = owner[static_cast<std::size_t>(comp[p])];
        if (o < 0) continue;
        count[o] += 1.0;
        for (int f = 0; f < F; ++f) color[o * F + f] += img.data[p * F + f];
    }
    for (int l = 0; l < num_labels; ++l)
        if (count[l] > 0)
            for (int f = 0; f < F; ++f) color[static_cast<std::size_t>(l) * F + f] /= count[l];

    // Per-component pixel lists for orphans only.
    std::vector<std::vector<std::size_t>> orphan_pixels(ncomp);
    for (std::size_t p = 0; p < N; ++p)
        if (owner[static_cast<std::size_t>(comp[p])] < 0) orphan_pixels[static_cast<std::size_t>(comp[p])].push_back(p);

    bool pending = true;
    while (pending) {
        pending = false;
        bool progressed = false;
        for (std::size_t i = 0; i < ncomp; ++i) {
            if (owner[i] >= 0) continue;
            double mean[8] = {0};
            for (auto p : orphan_pixels[i])
                for (int f = 0; f < std::min(F, 8); ++f) mean[f] += img.data[p * F + f];
            for (int f = 0; f < std::min(F, 8); ++f) mean[f] /= static_cast<double>(orphan_pixels[i].size());
            long best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (auto p : orphan_pixels[i]) {
                const int r = static_cast<int>(p / W), c = static_cast<int>(p % W);
                const std::array<std::pair<int, int>, 4> nb = {{{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}}};
                for (auto [rr, cc] : nb) {
                    if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                    const long o = owner[static_cast<std::size_t>(comp[static_cast<std::size_t>(rr) * W + cc])];
                    if (o < 0) continue;
                    double d = 0.0;
                    for (int f = 0; f < std::min(F, 8); ++f) {
                        const double diff = mean[f] - color[static_cast<std::size_t>(o) * F + f];
                        d += diff * diff;
                    }
                    if (d < best_d || (d == best_d && o < best)) {
                        best_d = d;
                        best = o;
                    }
                }
            }
            if (best >= 0) {
                owner[i] = best;
                progressed = true;
            } else {
                pending = true;
            }
        }
        if (pending && !progressed) throw Error("connectivity enforcement made no progress");
    }

    std::vector<long> remap(static_cast<std::size_t>(num_labels), -1);
    int next = 0;
    for (int l = 0; l < num_labels; ++l)
        if (keeper[l] >= 0) remap[l] = next++;
    for (std::size_t p = 0; p < N; ++p)
        labels[p] = static_cast<std::uint32_t>(remap[owner[static_cast<std::size_t>(comp[p])]]);
    return next;
}

}  // namespace detail

/// SLIC-style superpixels: local k-means over (color, position * compactness / S)
/// from a regular seed grid, followed by connectivity enforcement.
inline SuperpixelPartition slic(const Image& img, int K, double compactness, int iters) {
    const int W = img.width, H = img.height, F = img.channels;
    const std::size_t N = img.pixels();
    if (K < 1 || static_cast<std::size_t>(K) > N) throw ShapeError("superpixel count must be in [1, W*H]");
    if (!(compactness > 0.0)) throw ConfigError("compactness must be > 0");
    if (iters < 1) throw ConfigError("iters must be >= 1");

    const auto [nx, ny] = detail::seed_grid(W, H, K);
    const int n = nx * ny;
    const double S = std::sqrt(static_cast<double>(N) / K);
    const double step_x = static_cast<double>(W) / nx, step_y = static_cast<double>(H) / ny;
    const double window = std::max(step_x, step_y);
    const double pos_w = (compactness / S) * (compactness / S);

    // centers: row, col, then F color channels
    const int stride = 2 + F;
    std::vector<double> centers(static_cast<std::size_t>(n) * stride);
    std::vector<std::uint32_t> labels(N);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            double* ctr = &centers[static_cast<std::size_t>(j * nx + i) * stride];
            ctr[0] = (j + 0.5) * step_y;
            ctr[1] = (i + 0.5) * step_x;
            const int pr = std::min(H - 1, static_cast<int>(ctr[0])), pc = std::min(W - 1, static_cast<int>(ctr[1]));
            for (int f = 0; f < F; ++f) ctr[2 + f] = img.at(pr, pc, f);
        }
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const int j = std::min(ny - 1, static_cast<int>(r / step_y));
            const int i = std::min(nx - 1, static_cast<int>(c / step_x));
            labels[static_cast<std::size_t>(r) * W + c] = static_cast<std::uint32_t>(j * nx + i);
        }

    std::vector<double> best(N);
    std::vector<double> sums(centers.size());
    std::vector<double> counts(static_cast<std::size_t>(n));
    for (int it = 0; it < iters; ++it) {
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
        for (int k = 0; k < n; ++k) {
            const double* ctr = &centers[static_cast<std::size_t>(k) * stride];
            const int r0 = std::max(0, static_cast<int>(std::floor(ctr[0] - window)));
            const int r1 = std::min(H - 1, static_cast<int>(std::ceil(ctr[0] + window)));
            const int c0 = std::max(0, static_cast<int>(std::floor(ctr[1] - window)));
            const int c1 = std::min(W - 1, static_cast<int>(std::ceil(ctr[1] + window)));
            for (int r = r0; r <= r1; ++r)
                for (int c = c0; c <= c1; ++c) {
                    const std::size_t p = static_cast<std::size_t>(r) * W + c;
                    double dc = 0.0;
                    for (int f = 0; f < F; ++f) {
                        const double d = img.data[p * F + f] - ctr[2 + f];
                        dc += d * d;
                    }
                    const double dr = r + 0.5 - ctr[0], dcol = c + 0.5 - ctr[1];
                    const double dist = dc + pos_w * (dr * dr + dcol * dcol);
                    if (dist < best[p]) {
                        best[p] = dist;
                        labels[p] = static_cast<std::uint32_t>(k);
                    }
                }
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0.0);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                const std::size_t p = static_cast<std::size_t>(r) * W + c;
                double* s = &sums[static_cast<std::size_t>(labels[p]) * stride];
                s[0] += r + 0.5;
                s[1] += c + 0.5;
                for (int f = 0; f < F; ++f) s[2 + f] += img.data[p * F + f];
                counts[labels[p]] += 1.0;
            }
        for (int k = 0; k < n; ++k)
            if (counts[k] > 0)
                for (int d = 0; d < stride; ++d)
                    centers[static_cast<std::size_t>(k) * stride + d] = sums[static_cast<std::size_t>(k) * stride + d] / counts[k];
    }

    SuperpixelPartition part;
    part.width = W;
    part.height = H;
    part.count = detail::enforce_connectivity(labels, img, n);
    part.assignment = std::move(labels);
    part.refresh_stats();
    return part;
}

/// Modal non-void class per superpixel (ties to the lowest class); all-void superpixels get kVoid.
inline std::vector<std::uint8_t> dominant_label(const SuperpixelPartition& part, const LabelMask& mask) {
    if (mask.width != part.width || mask.height != part.height) throw ShapeError("mask and partition shapes differ");
    const int C = mask.num_classes;
    std::vector<std::uint32_t> hist(static_cast<std::size_t>(part.count) * C, 0);
    for (std::size_t p = 0; p < part.pixels(); ++p) {
        const auto v = mask.labels[p];
        if (v == LabelMask::kVoid) continue;
        ++hist[static_cast<std::size_t>(part.assignment[p]) * C + v];
    }
    std::vector<std::uint8_t> out(static_cast<std::size_t>(part.count), LabelMask::kVoid);
    for (int k = 0; k < part.count; ++k) {
        const std::uint32_t* h = &hist[static_cast<std::size_t>(k) * C];
        int best = -1;
        for (int c = 0; c < C; ++c)
            if (h[c] > 0 && (best < 0 || h[c] > h[best])) best = c;
        if (best >= 0) out[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-pixel scores and superpixel features

/// W x H x M real raster, interleaved like Image.
struct ScoreRaster {
    int width = 0;
    int height = 0;
    int depth = 0;  // M
    std::vector<float> data;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
};

/// M = C + F scores: a softmin over squared distances to the palette colors
/// (temperature `temperature`), followed by the raw channels.
inline ScoreRaster palette_scores(const Image& img, std::span<const Rgb> palette, double temperature) {
    if (img.channels != 3) throw ShapeError("palette scores expect a 3-channel image");
    if (!(temperature > 0.0)) throw ConfigError("score temperature must be > 0");
    const int C = static_cast<int>(palette.size());
    ScoreRaster s{img.width, img.height, C + img.channels, {}};
    s.data.resize(s.pixels() * s.depth);
    std::vector<double> e(static_cast<std::size_t>(C));
    for (std::size_t p = 0; p < img.pixels(); ++p) {
        double lo = std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) {
            double d = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                const double diff = img.data[p * 3 + ch] - palette[c][ch];
                d += diff * diff;
            }
            e[c] = d / temperature;
            lo = std::min(lo, e[c]);
        }
        double z = 0.0;
        for (auto& v : e) {
            v = std::exp(lo - v);
            z += v;
        }
        float* out = &s.data[p * s.depth];
        for (int c = 0; c < C; ++c) out[c] = static_cast<float>(e[c] / z);
        for (int ch = 0; ch < img.channels; ++ch) out[C + ch] = img.data[p * img.channels + ch];
    }
    return s;
}

/// Feature vector of length 5*M: blocks for self, left, right, above, below.
struct SuperpixelFeature {
    std::vector<double> vector;
    std::size_t size() const { return vector.size(); }
};

inline std::vector<SuperpixelFeature> sp_features(const SuperpixelPartition& part, const ScoreRaster& scores) {
    if (scores.width != part.width || scores.height != part.height) throw ShapeError("score raster and partition shapes differ");
    const int M = scores.depth;
    const int K = part.count;
    std::vector<double> self(static_cast<std::size_t>(K) * M, 0.0);
    for (std::size_t p = 0; p < part.pixels(); ++p) {
        double* dst = &self[static_cast<std::size_t>(part.assignment[p]) * M];
        const float* src = &scores.data[p * M];
        for (int m = 0; m < M; ++m) {
            if (!std::isfinite(src[m])) throw ShapeError("non-finite pixel score");
            dst[m] += src[m];
        }
    }
    for (int k = 0; k < K; ++k)
        for (int m = 0; m < M; ++m) self[static_cast<std::size_t>(k) * M + m] /= part.sizes[k];

    const double S = part.spacing();
    std::vector<SuperpixelFeature> out(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        auto& v = out[k].vector;
        v.assign(static_cast<std::size_t>(5) * M, 0.0);
        std::copy_n(&self[static_cast<std::size_t>(k) * M], M, v.begin());
        const double r = part.centroids[k][0], c = part.centroids[k][1];
        const std::array<std::array<double, 2>, 4> probes = {{{r, c - S}, {r, c + S}, {r - S, c}, {r + S, c}}};
        for (int b = 0; b < 4; ++b) {
            const long pr = std::lround(probes[b][0]), pc = std::lround(probes[b][1]);
            if (pr < 0 || pr >= part.height || pc < 0 || pc >= part.width) continue;
            const auto nb = part.at(static_cast<int>(pr), static_cast<int>(pc));
            if (static_cast<int>(nb) == k) continue;
            std::copy_n(&self[static_cast<std::size_t>(nb) * M], M, v.begin() + static_cast<std::ptrdiff_t>((b + 1) * M));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear SVM (one-vs-rest, Pegasos)

struct SvmModel {
    int num_classes = 0;
    int dim = 0;
    std::vector<double> weights;  // num_classes x dim
    std::vector<double> bias;

    std::vector<double> decision(const SuperpixelFeature& x) const {
        if (x.size() != static_cast<std::size_t>(dim)) throw ShapeError("feature dimension does not match SVM");
        std::vector<double> out(bias);
        for (int c = 0; c < num_classes; ++c) {
            const double* w = &weights[static_cast<std::size_t>(c) * dim];
            double acc = 0.0;
            for (int d = 0; d < dim; ++d) acc += w[d] * x.vector[static_cast<std::size_t>(d)];
            out[c] += acc;
        }
        return out;
    }
};

struct SvmOptions {
    int epochs = 10;
    double lambda = 1e-4;
    std::uint64_t seed = 0;
};

/// One-vs-rest hinge-loss SVM trained by Pegasos stochastic subgradient steps
/// (step 1/(lambda t)). The bias is updated with step 1/t and shrunk like the
/// weights, which keeps the classifier invariant under joint rescaling of
/// features (x -> a x) and regularization (lambda -> a^2 lambda).
inline SvmModel train_sp_svm(std::span<const SuperpixelFeature> feats, std::span<const std::uint8_t> labels,
                             int num_classes, const SvmOptions& opt) {
    if (feats.empty() || feats.size() != labels.size())
        throw ShapeError("train_sp_svm needs equal-length, nonempty features and labels");
    if (!(opt.lambda > 0.0)) throw ConfigError("svm lambda must be > 0");
    const int D = static_cast<int>(feats.front().size());
    std::vector<int> present(static_cast<std::size_t>(num_classes), 0);
    for (auto l : labels) {
        if (l >= num_classes) throw LabelRangeError(-1, -1, l, num_classes);
        present[l] = 1;
    }
    if (std::accumulate(present.begin(), present.end(), 0) < 2)
        warn("SVM training data has a single class; confidence ranking is degenerate");

    SvmModel m{num_classes, D, std::vector<double>(static_cast<std::size_t>(num_classes) * D, 0.0),
               std::vector<double>(static_cast<std::size_t>(num_classes), 0.0)};
    Rng rng(derive_seed(opt.seed, 21));
    std::uint64_t t = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (auto i : rng.permutation(feats.size())) {
            ++t;
            const double eta = 1.0 / (opt.lambda * static_cast<double>(t));
            const double shrink = 1.0 - 1.0 / static_cast<double>(t);
            const auto& x = feats[i].vector;
            if (x.size() != static_cast<std::size_t>(D)) throw ShapeError("inconsistent feature dimension");
            for (int c = 0; c < num_classes; ++c) {
                double* w = &m.weights[static_cast<std::size_t>(c) * D];
                double f = m.bias[c];
                for (int d = 0; d < D; ++d) f += w[d] * x[static_cast<std::size_t>(d)];
                const double y = labels[i] == c ? 1.0 : -1.0;
                const bool violated = y * f < 1.0;
                for (int d = 0; d < D; ++d) w[d] *= shrink;
                m.bias[c] *= shrink;
                if (violated) {
                    for (int d = 0; d < D; ++d) w[d] += eta * y * x[static_cast<std::size_t>(d)];
                    m.bias[c] += y / static_cast<double>(t);
                }
            }
        }
    }
    return m;
}

enum class ConfidenceMode { Margin, Raw };

struct SpClassification {
    int label = 0;
    double confidence = 0.0;
};

/// Argmax class (ties to the lowest index) with confidence = best minus runner-up
/// decision value, or the raw winning decision value.
inline SpClassification classify_decisions(std::span<const double> dec, ConfidenceMode mode = ConfidenceMode::Margin) {
    if (dec.empty()) throw ShapeError("no decision values");
    int best = 0;
    for (std::size_t c = 1; c < dec.size(); ++c)
        if (dec[c] > dec[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    if (mode == ConfidenceMode::Raw) return {best, dec[static_cast<std::size_t>(best)]};
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < dec.size(); ++c)
        if (static_cast<int>(c) != best) second = std::max(second, dec[c]);
    if (dec.size() == 1) second = dec[0];
    return {best, dec[static_cast<std::size_t>(best)] - second};
}

inline SpClassification classify_sp(const SvmModel& model, const SuperpixelFeature& feat,
                                    ConfidenceMode mode = ConfidenceMode::Margin) {
    const auto dec = model.decision(feat);
    return classify_decisions(dec, mode);
}

struct Landmark {
    std::uint32_t superpixel = 0;
    int label = 0;
    double confidence = 0.0;
    LabelDistribution distribution;  // one-hot at label
};

struct LandmarkSet {
    std::vector<Landmark> entries;  // confidence descending
};

struct ClassifiedSuperpixel {
    std::uint32_t id = 0;
    int label = 0;
    double confidence = 0.0;
};

/// Keeps the ceil(fraction * K) most confident superpixels (ties to the lower id).
inline LandmarkSet select_landmarks(std::span<const ClassifiedSuperpixel> classified, double fraction, int num_classes) {
    if (classified.empty()) throw EmptyRegionError("no superpixels to select landmarks from");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("landmark fraction must be in (0, 1]");
    std::vector<ClassifiedSuperpixel> sorted(classified.begin(), classified.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.id < b.id;
    });
    const auto keep = std::min(sorted.size(), static_cast<std::size_t>(
                                                   std::ceil(fraction * static_cast<double>(sorted.size()) - 1e-9)));
    LandmarkSet out;
    out.entries.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i)
        out.entries.push_back(
            {sorted[i].id, sorted[i].label, sorted[i].confidence, LabelDistribution::one_hot(num_classes, sorted[i].label)});
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct SuperpixelOptions {
    int count = 100;           // requested K
    double compactness = 0.2;
    int iters = 10;
    double fraction = 0.6;     // landmark share per image
    double score_temperature = 0.02;
    ConfidenceMode confidence = ConfidenceMode::Margin;
    bool normalize_intensity = true;  // gray-world normalization before scoring
    SvmOptions svm;
};

/// Everything the superpixel route derives for one image.
struct SuperpixelAnalysis {
    SuperpixelPartition partition;
    std::vector<ClassifiedSuperpixel> classified;  // indexed by superpixel id
    LandmarkSet landmarks;
};

inline double mean_intensity(const Image& img) {
    double m = 0.0;
    for (float v : img.data) m += v;
    return img.data.empty() ? 0.0 : m / static_cast<double>(img.data.size());
}

/// Gray-world normalization: rescales the image so its mean intensity equals `reference`.
inline Image normalize_intensity(const Image& img, double reference) {
    const double m = mean_intensity(img);
    if (!(m > 0.0) || !(reference > 0.0)) return img;
    Image out = img;
    const double g = reference / m;
    for (auto& v : out.data) v = static_cast<float>(std::min(1.0, v * g));
    return out;
}

struct SuperpixelClassifier {
    SuperpixelOptions options;
    std::vector<Rgb> palette;
    SvmModel svm;
    double reference_intensity = 0.0;  // mean source intensity; 0 disables normalization

    /// Per-pixel scores are computed on the gray-world normalized image.
    std::vector<SuperpixelFeature> features(const Image& img, const SuperpixelPartition& part) const {
        const Image normalized = normalize_intensity(img, reference_intensity);
        return sp_features(part, palette_scores(normalized, palette, options.score_temperature));
    }

    /// Trains the SVM on dominant labels of source superpixels (void superpixels skipped).
    static SuperpixelClassifier fit(const Dataset& source, std::vector<Rgb> palette, const SuperpixelOptions& opt) {
        SuperpixelClassifier sc{opt, std::move(palette), {}, 0.0};
        if (opt.normalize_intensity) {
            double total = 0.0;
            for (const auto& it : source.items) total += mean_intensity(it.image);
            sc.reference_intensity = total / static_cast<double>(std::max<std::size_t>(1, source.items.size()));
        }
        std::vector<std::vector<SuperpixelFeature>> feats(source.items.size());
        std::vector<std::vector<std::uint8_t>> labels(source.items.size());
        parallel_for(source.items.size(), [&](std::size_t i) {
            const auto& it = source.items[i];
            if (!it.mask) throw Error("source item " + it.id + " has no mask");
            const auto part = slic(it.image, opt.count, opt.compactness, opt.iters);
            feats[i] = sc.features(it.image, part);
            labels[i] = dominant_label(part, *it.mask);
        });
        std::vector<SuperpixelFeature> all_feats;
        std::vector<std::uint8_t> all_labels;
        for (std::size_t i = 0; i < feats.size(); ++i)
            for (std::size_t k = 0; k < feats[i].size(); ++k) {
                if (labels[i][k] == LabelMask::kVoid) continue;
                all_feats.push_back(std::move(feats[i][k]));
                all_labels.push_back(labels[i][k]);
            }
        sc.svm = train_sp_svm(all_feats, all_labels, source.num_classes, opt.svm);
        return sc;
    }

    SuperpixelAnalysis analyze(const Image& img) const {
        SuperpixelAnalysis a;
        a.partition = slic(img, options.count, options.compactness, options.iters);
        const auto feats = features(img, a.partition);
        a.classified.resize(feats.size());
        for (std::size_t k = 0; k < feats.size(); ++k) {
            const auto r = classify_sp(svm, feats[k], options.confidence);
            a.classified[k] = {static_cast<std::uint32_t>(k), r.label, r.confidence};
        }
        a.landmarks = select_landmarks(a.classified, options.fraction, svm.num_classes);
        return a;
    }
};

/// Paints superpixel labels onto pixels; with `landmarks_only`, non-landmark pixels become void.
inline LabelMask paint_superpixels(const SuperpixelAnalysis& a, int num_classes, bool landmarks_only) {
    LabelMask m(a.partition.width, a.partition.height, num_classes, LabelMask::kVoid);
    std::vector<int> label(static_cast<std::size_t>(a.partition.count), -1);
    if (landmarks_only) {
        for (const auto& l : a.landmarks.entries) label[l.superpixel] = l.label;
    } else {
        for (const auto& c : a.classified) label[c.id] = c.label;
    }
    for (std::size_t p = 0; p < a.partition.pixels(); ++p) {
        const int l = label[a.partition.assignment[p]];
        if (l >= 0) m.labels[p] = static_cast<std::uint8_t>(l);
    }
    return m;
}

/// Classification accuracy of superpixels against their dominant labels, over
/// all superpixels and over landmarks only. Void superpixels are skipped.
struct SuperpixelAccuracy {
    std::size_t all_correct = 0, all_total = 0;
    std::size_t landmark_correct = 0, landmark_total = 0;

    double all() const { return all_total ? static_cast<double>(all_correct) / all_total : 0.0; }
    double landmarks() const { return landmark_total ? static_cast<double>(landmark_correct) / landmark_total : 0.0; }

    void add(const SuperpixelAnalysis& a, const LabelMask& truth) {
        const auto dom = dominant_label(a.partition, truth);
        for (const auto& c : a.classified) {
            if (dom[c.id] == LabelMask::kVoid) continue;
            ++all_total;
            if (dom[c.id] == c.label) ++all_correct;
        }
        for (const auto& l : a.landmarks.entries) {
            if (dom[l.superpixel] == LabelMask::kVoid) continue;
            ++landmark_total;
            if (dom[l.superpixel] == l.label) ++landmark_correct;
        }
    }
};

// ---------------------------------------------------------------------------
// Persistence

/// SVM weights and bias as one tensor of shape (C, D + 1); the last column is the bias.
inline void save_svm(const SvmModel& m, const std::filesystem::path& path) {
    std::vector<float> v;
    v.reserve(static_cast<std::size_t>(m.num_classes) * (m.dim + 1));
    for (int c = 0; c < m.num_classes; ++c) {
        for (int d = 0; d < m.dim; ++d) v.push_back(static_cast<float>(m.weights[static_cast<std::size_t>(c) * m.dim + d]));
        v.push_back(static_cast<float>(m.bias[c]));
    }
    save_tensor(Tensor({static_cast<std::uint32_t>(m.num_classes), static_cast<std::uint32_t>(m.dim + 1)}, std::move(v)),
                path);
}

inline SvmModel load_svm(const std::filesystem::path& path) {
    const auto t = load_tensor(path);
    if (t.dims.size() != 2 || t.dims[1] < 1) throw FormatError("SVM tensor must have shape (C, D + 1)", 5);
    SvmModel m;
    m.num_classes = static_cast<int>(t.dims[0]);
    m.dim = static_cast<int>(t.dims[1]) - 1;
    for (int c = 0; c < m.num_classes; ++c) {
        const float* row = &t.values[static_cast<std::size_t>(c) * (m.dim + 1)];
        m.weights.insert(m.weights.end(), row, row + m.dim);
        m.bias.push_back(row[m.dim]);
    }
    return m;
}

/// One line per landmark: superpixel id, class, confidence.
inline void save_landmarks(const LandmarkSet& set, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing", path.string());
    char buf[96];
    for (const auto& l : set.entries) {
        std::snprintf(buf, sizeof buf, "%u %d %.6g\n", l.superpixel, l.label, l.confidence);
        out << buf;
    }
    if (!out) throw IoError("write failure", path.string());
}

}  // namespace cdaseg

#endif  // CDASEG_SUPERPIX_HPP
