#ifndef CDASEG_SEGNET_HPP
#define CDASEG_SEGNET_HPP

// Fully convolutional segmentation net (stride 1, same padding, per-pixel
// softmax) with hand-written backprop, the adaptation objective and AdaDelta.
//
// Parameter layout, layer by layer: weights [out][ky][kx][in] then bias [out].
// The weight order matches the im2col column order so each conv is one GEMM.

#include <Eigen/Core>

#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdaseg/common.hpp"
#include "cdaseg/labeldist.hpp"
#include "cdaseg/raster.hpp"
#include "cdaseg/superpix.hpp"

namespace cdaseg {

// ---------------------------------------------------------------------------
// Architecture

struct ConvLayer {
    int kernel = 3;  // odd
    int in = 0;
    int out = 0;
    bool relu = true;
    std::size_t offset = 0;  // first weight in the flat parameter vector

    std::size_t weight_count() const { return static_cast<std::size_t>(out) * kernel * kernel * in; }
    std::size_t bias_offset() const { return offset + weight_count(); }
    std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(out); }
};

/// Stack of convs followed by a per-pixel softmax. Text form:
///   "conv3:3>16:relu;conv3:16>16:relu;conv1:16>8;softmax"
struct Architecture {
    std::vector<ConvLayer> layers;

    int input_channels() const { return layers.front().in; }
    int num_classes() const { return layers.back().out; }
    std::size_t param_count() const { return layers.empty() ? 0 : layers.back().offset + layers.back().param_count(); }

    /// Per-layer (weight, bias) shapes.
    std::vector<std::vector<std::uint32_t>> param_shapes() const {
        std::vector<std::vector<std::uint32_t>> out;
        for (const auto& l : layers) {
            out.push_back({static_cast<std::uint32_t>(l.out), static_cast<std::uint32_t>(l.kernel),
                           static_cast<std::uint32_t>(l.kernel), static_cast<std::uint32_t>(l.in)});
            out.push_back({static_cast<std::uint32_t>(l.out)});
        }
        return out;
    }

    std::string descriptor() const {
        std::string s;
        for (const auto& l : layers) {
            s += "conv" + std::to_string(l.kernel) + ":" + std::to_string(l.in) + ">" + std::to_string(l.out);
            if (l.relu) s += ":relu";
            s += ";";
        }
        return s + "softmax";
    }

    static Architecture parse(const std::string& text) {
        Architecture a;
        std::stringstream ss(text);
        std::string tok;
        bool head = false;
        std::size_t offset = 0;
        while (std::getline(ss, tok, ';')) {
            if (tok.empty()) continue;
            if (head) throw ConfigError("arch: softmax must be the last entry");
            if (tok == "softmax") {
                head = true;
                continue;
            }
            ConvLayer l;
            char tail[16] = {0};
            int n = std::sscanf(tok.c_str(), "conv%d:%d>%d:%15s", &l.kernel, &l.in, &l.out, tail);
            if (n < 3) throw ConfigError("arch: cannot parse layer '" + tok + "'");
            if (n == 4 && std::string(tail) != "relu") throw ConfigError("arch: unknown activation in '" + tok + "'");
            l.relu = n == 4;
            if (l.kernel < 1 || l.kernel % 2 == 0) throw ConfigError("arch: kernel must be odd in '" + tok + "'");
            if (l.in < 1 || l.out < 1) throw ConfigError("arch: channel counts must be positive in '" + tok + "'");
            if (!a.layers.empty() && a.layers.back().out != l.in)
                throw ConfigError("arch: channel mismatch at '" + tok + "'");
            l.offset = offset;
            offset += l.param_count();
            a.layers.push_back(l);
        }
        if (a.layers.empty()) throw ConfigError("arch: no layers");
        if (!head) throw ConfigError("arch: missing softmax head");
        if (a.layers.back().relu) throw ConfigError("arch: the layer feeding the softmax must be linear");
        if (a.num_classes() < 2 || a.num_classes() > LabelMask::kMaxClasses)
            throw ConfigError("arch: class count out of range");
        return a;
    }

    bool operator==(const Architecture& o) const { return descriptor() == o.descriptor(); }
};

/// Named presets. "default": 3 x (3x3 conv, 16 ch, ReLU) + 1x1 conv to C.
inline Architecture arch_preset(const std::string& name, int num_classes, int input_channels = 3) {
    const std::string f = std::to_string(input_channels), c = std::to_string(num_classes);
    if (name == "default")
        return Architecture::parse("conv3:" + f + ">16:relu;conv3:16>16:relu;conv3:16>16:relu;conv1:16>" + c +
                                   ";softmax");
    if (name == "small") return Architecture::parse("conv3:" + f + ">6:relu;conv3:6>6:relu;conv1:6>" + c + ";softmax");
    if (name == "linear") return Architecture::parse("conv1:" + f + ">" + c + ";softmax");
    throw ConfigError("unknown architecture preset '" + name + "'");
}

struct SegModel {
    Architecture arch;
    std::vector<float> params;

    int num_classes() const { return arch.num_classes(); }

    void validate() const {
        if (params.size() != arch.param_count()) throw ShapeError("parameter count does not match architecture");
        for (float v : params)
            if (!std::isfinite(v)) throw Error("non-finite model parameter");
    }
};

/// He-normal weights (std sqrt(2 / fan_in)), zero biases.
inline SegModel init_model(const Architecture& arch, std::uint64_t seed) {
    SegModel m{arch, std::vector<float>(arch.param_count(), 0.0f)};
    Rng rng(derive_seed(seed, 21));
    for (const auto& l : arch.layers) {
        const double sd = std::sqrt(2.0 / (static_cast<double>(l.kernel) * l.kernel * l.in));
        for (std::size_t i = 0; i < l.weight_count(); ++i) m.params[l.offset + i] = static_cast<float>(sd * rng.normal());
    }
    return m;
}

inline SegModel init_model(const std::string& preset, int num_classes, std::uint64_t seed) {
    return init_model(arch_preset(preset, num_classes), seed);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

/// (H*W) x (k*k*Cin) patch matrix, zero padded.
template <typename S>
void im2col(const std::vector<S>& x, int W, int H, int cin, int k, std::vector<S>& col) {
    const int pad = k / 2;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * cin;
    col.assign(static_cast<std::size_t>(W) * H * row_len, S(0));
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            S* dst = col.data() + (static_cast<std::size_t>(r) * W + c) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int rr = r + ky - pad;
                if (rr < 0 || rr >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int cc = c + kx - pad;
                    if (cc < 0 || cc >= W) continue;
                    std::memcpy(dst + (static_cast<std::size_t>(ky) * k + kx) * cin,
                                x.data() + (static_cast<std::size_t>(rr) * W + cc) * cin, sizeof(S) * cin);
                }
            }
        }
}

template <typename S>
void col2im_add(const std::vector<S>& col, int W, int H, int cin, int k, std::vector<S>& dx) {
    const int pad = k / 2;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * cin;
    dx.assign(static_cast<std::size_t>(W) * H * cin, S(0));
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const S* src = col.data() + (static_cast<std::size_t>(r) * W + c) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int rr = r + ky - pad;
                if (rr < 0 || rr >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int cc = c + kx - pad;
                    if (cc < 0 || cc >= W) continue;
                    S* d = dx.data() + (static_cast<std::size_t>(rr) * W + cc) * cin;
                    const S* s = src + (static_cast<std::size_t>(ky) * k + kx) * cin;
                    for (int i = 0; i < cin; ++i) d[i] += s[i];
                }
            }
        }
}

/// Everything the backward pass needs from one forward pass.
template <typename S>
struct Trace {
    int width = 0, height = 0;
    std::vector<S> input;
    std::vector<std::vector<S>> cols;     // per-layer im2col input
    std::vector<std::vector<S>> outputs;  // per-layer output (post-ReLU; last = logits)
    std::vector<S> probs;                 // softmax of the logits
};

/// Fills `t`, reusing its buffers.
template <typename S>
void forward_trace(const Architecture& arch, std::span<const S> params, const Image& img, Trace<S>& t) {
    if (img.channels != arch.input_channels())
        throw ShapeError("image has " + std::to_string(img.channels) + " channels, network expects " +
                         std::to_string(arch.input_channels()));
    if (params.size() != arch.param_count()) throw ShapeError("parameter count does not match architecture");
    t.width = img.width;
    t.height = img.height;
    const std::size_t N = img.pixels();
    t.input.assign(img.data.begin(), img.data.end());
    t.cols.resize(arch.layers.size());
    t.outputs.resize(arch.layers.size());
    for (std::size_t li = 0; li < arch.layers.size(); ++li) {
        const auto& l = arch.layers[li];
        const std::vector<S>& input = li == 0 ? t.input : t.outputs[li - 1];
        im2col(input, img.width, img.height, l.in, l.kernel, t.cols[li]);
        const int kk = l.kernel * l.kernel * l.in;
        ConstMapMat<S> col(t.cols[li].data(), static_cast<Eigen::Index>(N), kk);
        ConstMapMat<S> w(params.data() + l.offset, l.out, kk);
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(params.data() + l.bias_offset(), l.out);
        t.outputs[li].resize(N * l.out);
        MapMat<S> y(t.outputs[li].data(), static_cast<Eigen::Index>(N), l.out);
        y.noalias() = col * w.transpose();
        y.rowwise() += b;
        if (l.relu) y = y.cwiseMax(S(0));
    }
    const int C = arch.num_classes();
    const auto& logits = t.outputs.back();
    t.probs.resize(N * C);
    for (std::size_t p = 0; p < N; ++p) {
        const S* z = logits.data() + p * C;
        S* q = t.probs.data() + p * C;
        const S mx = *std::max_element(z, z + C);
        S sum = 0;
        for (int c = 0; c < C; ++c) sum += (q[c] = std::exp(z[c] - mx));
        for (int c = 0; c < C; ++c) q[c] /= sum;
    }
}

template <typename S>
Trace<S> forward_trace(const Architecture& arch, std::span<const S> params, const Image& img) {
    Trace<S> t;
    forward_trace(arch, params, img, t);
    return t;
}

/// Accumulates d(loss)/d(params) into grad given d(loss)/d(logits).
template <typename S>
void backward(const Architecture& arch, std::span<const S> params, const Trace<S>& t, std::vector<S>& dy,
              std::span<S> grad) {
    const std::size_t N = static_cast<std::size_t>(t.width) * t.height;
    thread_local std::vector<S> dcol, dx;
    for (std::size_t li = arch.layers.size(); li-- > 0;) {
        const auto& l = arch.layers[li];
        const int kk = l.kernel * l.kernel * l.in;
        if (l.relu) {
            const auto& out = t.outputs[li];
            for (std::size_t i = 0; i < dy.size(); ++i)
                if (!(out[i] > S(0))) dy[i] = S(0);
        }
        ConstMapMat<S> d(dy.data(), static_cast<Eigen::Index>(N), l.out);
        ConstMapMat<S> col(t.cols[li].data(), static_cast<Eigen::Index>(N), kk);
        MapMat<S> gw(grad.data() + l.offset, l.out, kk);
        gw.noalias() += d.transpose() * col;
        // Fixed summation order: Eigen's vectorized colwise sum depends on buffer alignment.
        S* gb = grad.data() + l.bias_offset();
        for (std::size_t p = 0; p < N; ++p) {
            const S* row = dy.data() + p * l.out;
            for (int o = 0; o < l.out; ++o) gb[o] += row[o];
        }
        if (li == 0) break;
        ConstMapMat<S> w(params.data() + l.offset, l.out, kk);
        dcol.resize(N * kk);
        MapMat<S> dc(dcol.data(), static_cast<Eigen::Index>(N), kk);
        dc.noalias() = d * w;
        col2im_add(dcol, t.width, t.height, l.in, l.kernel, dx);
        dy.swap(dx);
    }
}

/// d(loss)/d(logits) from d(loss)/d(probs) through the per-pixel softmax, scaled by `scale`.
template <typename S>
void softmax_backward_add(const std::vector<S>& probs, const std::vector<double>& dprob, int C, double scale,
                          std::vector<S>& dlogits) {
    const std::size_t N = probs.size() / C;
    for (std::size_t p = 0; p < N; ++p) {
        const S* q = probs.data() + p * C;
        const double* g = dprob.data() + p * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += static_cast<double>(q[c]) * g[c];
        if (dot == 0.0 && std::all_of(g, g + C, [](double v) { return v == 0.0; })) continue;
        for (int c = 0; c < C; ++c)
            dlogits[p * C + c] += static_cast<S>(scale * static_cast<double>(q[c]) * (g[c] - dot));
    }
}

/// Mean pixel cross-entropy over non-void pixels; adds scale * gradient w.r.t. logits.
template <typename S>
double source_head(const Trace<S>& t, const LabelMask& mask, int C, double scale, std::vector<S>& dlogits) {
    if (mask.width != t.width || mask.height != t.height) throw ShapeError("mask and image sizes differ");
    const auto& z = t.outputs.back();
    std::size_t n = 0;
    for (auto v : mask.labels) n += v != LabelMask::kVoid;
    if (n == 0) return 0.0;
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t p = 0; p < mask.labels.size(); ++p) {
        const int y = mask.labels[p];
        if (y == LabelMask::kVoid) continue;
        if (y >= C) throw LabelRangeError(static_cast<int>(p / t.width), static_cast<int>(p % t.width), y, C);
        const S* zp = z.data() + p * C;
        const double mx = static_cast<double>(*std::max_element(zp, zp + C));
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(static_cast<double>(zp[c]) - mx);
        loss += (mx + std::log(sum) - static_cast<double>(zp[y])) * inv;
        for (int c = 0; c < C; ++c)
            dlogits[p * C + c] +=
                static_cast<S>(scale * inv * (static_cast<double>(t.probs[p * C + c]) - (c == y ? 1.0 : 0.0)));
    }
    return loss;
}

/// C(q, mean of probs over `region`) and its gradient w.r.t. the region's probs, times `scale`, added to dprob.
template <typename S>
double region_property(const std::vector<S>& probs, int C, std::span<const std::uint32_t> region,
                       const LabelDistribution& q, double scale, std::vector<double>& dprob) {
    if (region.empty()) throw EmptyRegionError("property region has no pixels");
    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    for (auto p : region)
        for (int c = 0; c < C; ++c) mean[c] += static_cast<double>(probs[static_cast<std::size_t>(p) * C + c]);
    const double inv = 1.0 / static_cast<double>(region.size());
    double ce = 0.0;
    std::vector<double> g(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        mean[c] *= inv;
        if (q.probs[c] == 0.0) continue;
        if (mean[c] > kLogClamp) {
            ce -= q.probs[c] * std::log(mean[c]);
            g[c] = -scale * q.probs[c] / mean[c] * inv;
        } else {
            ce -= q.probs[c] * std::log(kLogClamp);  // flat below the clamp
        }
    }
    for (auto p : region)
        for (int c = 0; c < C; ++c) dprob[static_cast<std::size_t>(p) * C + c] += g[c];
    return ce;
}

}  // namespace detail

template <typename S = float>
Prediction forward(const Architecture& arch, std::span<const S> params, const Image& img) {
    auto t = detail::forward_trace<S>(arch, params, img);
    Prediction out(img.width, img.height, arch.num_classes());
    for (std::size_t i = 0; i < t.probs.size(); ++i) out.probs[i] = static_cast<float>(t.probs[i]);
    return out;
}

inline Prediction forward(const SegModel& m, const Image& img) {
    return forward<float>(m.arch, std::span<const float>(m.params), img);
}

// ---------------------------------------------------------------------------
// Objective

enum class Regime { NoAdapt, Image, Superpixel, ImageSuperpixel };

inline Regime parse_regime(const std::string& s) {
    if (s == "noadapt" || s == "NoAdapt") return Regime::NoAdapt;
    if (s == "i" || s == "I" || s == "image") return Regime::Image;
    if (s == "sp" || s == "SP" || s == "superpixel") return Regime::Superpixel;
    if (s == "i+sp" || s == "I+SP" || s == "isp") return Regime::ImageSuperpixel;
    throw ConfigError("unknown regime '" + s + "' (noadapt|i|sp|i+sp)");
}

inline std::string regime_name(Regime r) {
    switch (r) {
        case Regime::NoAdapt: return "noadapt";
        case Regime::Image: return "i";
        case Regime::Superpixel: return "sp";
        case Regime::ImageSuperpixel: return "i+sp";
    }
    return "?";
}

inline bool uses_image_term(Regime r) { return r == Regime::Image || r == Regime::ImageSuperpixel; }
inline bool uses_superpixel_term(Regime r) { return r == Regime::Superpixel || r == Regime::ImageSuperpixel; }

struct TrainConfig {
    Regime regime = Regime::ImageSuperpixel;
    double gamma = 0.5;
    std::size_t batch_source = 5;
    std::size_t batch_target = 5;
    int epochs = 10;
    std::size_t steps_per_epoch = 0;  // 0: floor(|S| / batch_source)
    std::uint64_t seed = 0;
    double adadelta_rho = 0.95;
    double adadelta_eps = 1e-6;
    double weight_image = 1.0;       // w_k for the image-level property
    double weight_superpixel = 1.0;  // w_k for the landmark property

    /// Default batching: 5 + 5 for adapted regimes, 15 source images alone for NoAdapt.
    static TrainConfig for_regime(Regime r) {
        TrainConfig c;
        c.regime = r;
        if (r == Regime::NoAdapt) {
            c.batch_source = 15;
            c.batch_target = 0;
        }
        return c;
    }

    void validate() const {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
        if (batch_source < 1) throw ConfigError("batch_source must be >= 1");
        if (regime == Regime::NoAdapt && batch_target != 0) throw ConfigError("NoAdapt takes no target batch");
        if (regime != Regime::NoAdapt && batch_target < 1) throw ConfigError("adapted regimes need batch_target >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (!(adadelta_rho > 0.0 && adadelta_rho < 1.0)) throw ConfigError("adadelta_rho must be in (0, 1)");
        if (!(adadelta_eps > 0.0)) throw ConfigError("adadelta_eps must be > 0");
        if (!(weight_image >= 0.0 && weight_superpixel >= 0.0)) throw ConfigError("property weights must be >= 0");
    }
};

/// Inferred target properties for one image.
struct TargetProperties {
    LabelDistribution image_dist;
    SuperpixelPartition partition;
    LandmarkSet landmarks;
};

struct SourceSample {
    const Image* image = nullptr;
    const LabelMask* mask = nullptr;
};

struct TargetSample {
    const Image* image = nullptr;
    const LabelDistribution* image_dist = nullptr;  // needed by the image term
    const SuperpixelPartition* partition = nullptr;  // needed by the landmark term
    const LandmarkSet* landmarks = nullptr;
};

template <typename S>
struct LossGrad {
    double loss = 0.0;
    double source_term = 0.0;  // mean pixel cross-entropy over the source batch
    double target_term = 0.0;  // mean over target images of sum_k w_k C(p^k, p_hat^k)
    double image_term = 0.0;   // unweighted image-level part of the target term
    double superpixel_term = 0.0;
    std::vector<S> grad;
};

namespace detail {

struct TargetLoss {
    double image = 0.0, superpixel = 0.0;
};

template <typename S>
TargetLoss target_head(const Trace<S>& t, const TargetSample& ts, const TrainConfig& cfg, int C, double scale,
                       std::vector<S>& dlogits) {
    TargetLoss out;
    thread_local std::vector<double> dprob;
    dprob.assign(t.probs.size(), 0.0);
    if (uses_image_term(cfg.regime)) {
        std::vector<std::uint32_t> all(t.probs.size() / C);
        std::iota(all.begin(), all.end(), 0u);
        out.image = region_property(t.probs, C, all, *ts.image_dist, scale * cfg.weight_image, dprob);
    }
    if (uses_superpixel_term(cfg.regime)) {
        const auto& lm = ts.landmarks->entries;
        if (lm.empty()) {
            warn("empty landmark set; skipping the superpixel term for this image");
        } else {
            const auto members = ts.partition->members();
            const double share = 1.0 / static_cast<double>(lm.size());
            for (const auto& l : lm) {
                if (l.superpixel >= members.size()) throw ShapeError("landmark id outside the partition");
                out.superpixel +=
                    share * region_property(t.probs, C, members[l.superpixel], l.distribution,
                                            scale * cfg.weight_superpixel * share, dprob);
            }
        }
    }
    softmax_backward_add(t.probs, dprob, C, 1.0, dlogits);
    return out;
}

inline void check_batch(const TrainConfig& cfg, std::span<const SourceSample> src, std::span<const TargetSample> tgt) {
    if (src.empty()) throw ConfigError("empty source batch");
    if (cfg.regime == Regime::NoAdapt && !tgt.empty()) throw ConfigError("NoAdapt regime given a target batch");
    if (cfg.regime != Regime::NoAdapt && tgt.empty()) throw ConfigError("adapted regime given no target batch");
    for (const auto& s : src)
        if (!s.image || !s.mask) throw ConfigError("source sample without image or mask");
    for (const auto& t : tgt) {
        if (!t.image) throw ConfigError("target sample without image");
        if (uses_image_term(cfg.regime) && !t.image_dist)
            throw ConfigError("regime " + regime_name(cfg.regime) + " needs an image-level distribution");
        if (uses_superpixel_term(cfg.regime) && (!t.partition || !t.landmarks))
            throw ConfigError("regime " + regime_name(cfg.regime) + " needs a partition and landmarks");
        if (t.partition && (t.partition->width != t.image->width || t.partition->height != t.image->height))
            throw ShapeError("partition and target image sizes differ");
    }
}

}  // namespace detail

/// loss = gamma/|S| sum_s L_s + (1-gamma)/|T| sum_t sum_k w_k C(p^k_t, p_hat^k_t); NoAdapt uses gamma = 1.
/// When 1 - gamma == 0 the target images do not enter the gradient at all.
template <typename S>
LossGrad<S> loss_and_grad(const Architecture& arch, std::span<const S> params, std::span<const SourceSample> src,
                          std::span<const TargetSample> tgt, const TrainConfig& cfg) {
    detail::check_batch(cfg, src, tgt);
    const int C = arch.num_classes();
    const double gamma = cfg.regime == Regime::NoAdapt ? 1.0 : cfg.gamma;
    const double src_scale = gamma / static_cast<double>(src.size());
    const double tgt_scale = tgt.empty() ? 0.0 : (1.0 - gamma) / static_cast<double>(tgt.size());
    const bool target_backward = tgt_scale != 0.0;

    const std::size_t n = src.size() + tgt.size();
    std::vector<std::vector<S>> grads(n);
    std::vector<double> src_loss(src.size(), 0.0);
    std::vector<detail::TargetLoss> tgt_loss(tgt.size());
    parallel_for(n, [&](std::size_t i) {
        if (i < src.size()) {
            thread_local detail::Trace<S> t;
            thread_local std::vector<S> dz;
            detail::forward_trace<S>(arch, params, *src[i].image, t);
            dz.assign(t.probs.size(), S(0));
            src_loss[i] = detail::source_head(t, *src[i].mask, C, src_scale, dz);
            grads[i].assign(params.size(), S(0));
            detail::backward<S>(arch, params, t, dz, grads[i]);
        } else {
            const auto& ts = tgt[i - src.size()];
            thread_local detail::Trace<S> t;
            thread_local std::vector<S> dz;
            detail::forward_trace<S>(arch, params, *ts.image, t);
            dz.assign(t.probs.size(), S(0));
            tgt_loss[i - src.size()] = detail::target_head(t, ts, cfg, C, tgt_scale, dz);
            if (target_backward) {
                grads[i].assign(params.size(), S(0));
                detail::backward<S>(arch, params, t, dz, grads[i]);
            }
        }
    });

    LossGrad<S> r;
    r.grad.assign(params.size(), S(0));
    for (const auto& g : grads)
        if (!g.empty())
            for (std::size_t j = 0; j < g.size(); ++j) r.grad[j] += g[j];
    for (double l : src_loss) r.source_term += l;
    r.source_term /= static_cast<double>(src.size());
    for (const auto& l : tgt_loss) {
        r.image_term += l.image;
        r.superpixel_term += l.superpixel;
        r.target_term += cfg.weight_image * l.image + cfg.weight_superpixel * l.superpixel;
    }
    if (!tgt.empty()) {
        const double inv = 1.0 / static_cast<double>(tgt.size());
        r.image_term *= inv;
        r.superpixel_term *= inv;
        r.target_term *= inv;
    }
    r.loss = gamma * r.source_term + (1.0 - gamma) * r.target_term;
    return r;
}

inline LossGrad<float> loss_and_grad(const SegModel& m, std::span<const SourceSample> src,
                                     std::span<const TargetSample> tgt, const TrainConfig& cfg) {
    return loss_and_grad<float>(m.arch, std::span<const float>(m.params), src, tgt, cfg);
}

// ---------------------------------------------------------------------------
// AdaDelta

struct OptimizerState {
    std::vector<float> accum_grad_sq;
    std::vector<float> accum_update_sq;

    static OptimizerState zeros(std::size_t n) { return {std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)}; }
};

inline void adadelta_step(std::span<float> params, std::span<const float> grad, OptimizerState& st, double rho,
                          double eps) {
    if (grad.size() != params.size() || st.accum_grad_sq.size() != params.size() ||
        st.accum_update_sq.size() != params.size())
        throw ShapeError("adadelta: parameter, gradient and state sizes differ");
    if (!(rho > 0.0 && rho < 1.0) || !(eps > 0.0)) throw ConfigError("adadelta: need rho in (0,1) and eps > 0");
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i]))
            throw DivergenceError("non-finite gradient at parameter " + std::to_string(i) + " (value " +
                                      std::to_string(grad[i]) + ")",
                                  -1);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        const double eg = rho * st.accum_grad_sq[i] + (1.0 - rho) * g * g;
        const double dx = -std::sqrt(st.accum_update_sq[i] + eps) / std::sqrt(eg + eps) * g;
        st.accum_grad_sq[i] = static_cast<float>(eg);
        st.accum_update_sq[i] = static_cast<float>(rho * st.accum_update_sq[i] + (1.0 - rho) * dx * dx);
        params[i] = static_cast<float>(params[i] + dx);
    }
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;  // means over the epoch's steps
    double source_term = 0.0;
    double target_term = 0.0;
    std::optional<double> validation;
};

struct TrainResult {
    SegModel model;
    OptimizerState state;
    std::vector<EpochRecord> history;
    std::optional<SegModel> best_model;  // best-on-validation checkpoint, when a validator is given
    int best_epoch = -1;
};

/// Score to maximise on a held-out split, evaluated after every epoch.
using Validator = std::function<double(const SegModel&)>;

/// Source and target batches come from two independently seeded streams that walk
/// fresh shuffles of their sets, so the source batch sequence depends only on the
/// seed and batch_source, never on the regime.
class BatchStream {
public:
    BatchStream(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}

    std::size_t next() {
        if (pos_ == order_.size()) {
            order_ = rng_.permutation(n_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::size_t n_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

inline TrainResult train(const TrainConfig& cfg, SegModel init, const Dataset& source,
                         std::span<const Image> target_images, std::span<const TargetProperties> properties,
                         const Validator& validate = nullptr) {
    cfg.validate();
    init.validate();
    if (source.items.empty()) throw ConfigError("empty source dataset");
    for (const auto& it : source.items)
        if (!it.mask) throw ConfigError("source item " + it.id + " has no mask");
    const bool adapted = cfg.regime != Regime::NoAdapt;
    if (adapted) {
        if (target_images.empty()) throw ConfigError("adapted regime needs target images");
        if (properties.size() != target_images.size()) throw ConfigError("one property record per target image required");
    }

    TrainResult res{std::move(init), {}, {}, std::nullopt, -1};
    res.state = OptimizerState::zeros(res.model.params.size());
    BatchStream src_stream(source.items.size(), derive_seed(cfg.seed, 31));
    BatchStream tgt_stream(std::max<std::size_t>(1, target_images.size()), derive_seed(cfg.seed, 32));
    const std::size_t steps =
        cfg.steps_per_epoch ? cfg.steps_per_epoch : std::max<std::size_t>(1, source.items.size() / cfg.batch_source);
    double best = -std::numeric_limits<double>::infinity();

    for (int e = 0; e < cfg.epochs; ++e) {
        EpochRecord rec;
        rec.epoch = e + 1;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<SourceSample> sb;
            for (std::size_t j = 0; j < cfg.batch_source; ++j) {
                const auto& it = source.items[src_stream.next()];
                sb.push_back({&it.image, &*it.mask});
            }
            std::vector<TargetSample> tb;
            if (adapted)
                for (std::size_t j = 0; j < cfg.batch_target; ++j) {
                    const std::size_t k = tgt_stream.next();
                    const bool sp = uses_superpixel_term(cfg.regime);
                    tb.push_back({&target_images[k], &properties[k].image_dist, sp ? &properties[k].partition : nullptr,
                                  sp ? &properties[k].landmarks : nullptr});
                }
            auto lg = loss_and_grad(res.model, sb, tb, cfg);
            try {
                adadelta_step(res.model.params, lg.grad, res.state, cfg.adadelta_rho, cfg.adadelta_eps);
            } catch (const DivergenceError& err) {
                throw DivergenceError(std::string(err.what()) + " at step " + std::to_string(s + 1), e + 1);
            }
            rec.loss += lg.loss;
            rec.source_term += lg.source_term;
            rec.target_term += lg.target_term;
        }
        rec.loss /= static_cast<double>(steps);
        rec.source_term /= static_cast<double>(steps);
        rec.target_term /= static_cast<double>(steps);
        if (validate) {
            rec.validation = validate(res.model);
            if (*rec.validation > best) {
                best = *rec.validation;
                res.best_model = res.model;
                res.best_epoch = rec.epoch;
            }
        }
        res.history.push_back(rec);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Target property inference (source-trained estimators only)

inline std::vector<TargetProperties> infer_properties(std::span<const Image> target, const GlobalEstimators& global,
                                                      Estimator which, const SuperpixelClassifier& sp) {
    auto dists = global.estimate_all(which, target);
    std::vector<TargetProperties> out(target.size());
    parallel_for(target.size(), [&](std::size_t i) {
        auto a = sp.analyze(target[i]);
        out[i].image_dist = std::move(dists[i]);
        out[i].partition = std::move(a.partition);
        out[i].landmarks = std::move(a.landmarks);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check on small random models and batches, in double precision.
// The step is small because a larger one lets the probe straddle ReLU kinks.

struct GradCheckOptions {
    int probes = 20;
    int coords = 10;  // sampled parameters per probe
    double step = 1e-5;
    std::uint64_t seed = 0;
};

struct GradCheckProbe {
    Regime regime = Regime::NoAdapt;
    double gamma = 1.0;
    int num_classes = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckProbe> probes;
    double max_rel_error = 0.0;
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
    GradCheckReport rep;
    const Regime regimes[] = {Regime::NoAdapt, Regime::Image, Regime::Superpixel, Regime::ImageSuperpixel};
    for (int pi = 0; pi < opt.probes; ++pi) {
        Rng rng(derive_seed(opt.seed, 1000 + static_cast<std::uint64_t>(pi)));
        const int C = 3 + static_cast<int>(rng.index(3));
        const int W = 7, H = 6;
        const auto arch = arch_preset("small", C);
        const auto m = init_model(arch, rng.next_u64());
        std::vector<double> theta(m.params.begin(), m.params.end());
        for (auto& v : theta) v += 0.05 * rng.normal();  // nonzero biases too

        std::vector<Image> images;
        std::vector<LabelMask> masks;
        for (int i = 0; i < 4; ++i) {
            Image img(W, H, 3);
            for (auto& v : img.data) v = static_cast<float>(rng.uniform());
            LabelMask mask(W, H, C);
            for (auto& l : mask.labels)
                l = rng.uniform() < 0.1 ? LabelMask::kVoid : static_cast<std::uint8_t>(rng.index(static_cast<std::size_t>(C)));
            images.push_back(std::move(img));
            masks.push_back(std::move(mask));
        }
        std::vector<LabelDistribution> dists;
        std::vector<SuperpixelPartition> parts;
        std::vector<LandmarkSet> marks;
        for (int i = 0; i < 2; ++i) {
            std::vector<double> p(static_cast<std::size_t>(C));
            double sum = 0.0;
            for (auto& v : p) sum += (v = rng.uniform() + 0.05);
            for (auto& v : p) v /= sum;
            dists.emplace_back(std::move(p));
            parts.push_back(slic(images[2 + i], 4, 0.5, 5));
            LandmarkSet set;
            for (int k = 0; k < parts.back().count; ++k) {
                if (k > 0 && rng.uniform() < 0.4) continue;
                Landmark l;
                l.superpixel = static_cast<std::uint32_t>(k);
                l.label = static_cast<int>(rng.index(static_cast<std::size_t>(C)));
                l.distribution = LabelDistribution::one_hot(C, l.label);
                set.entries.push_back(l);
            }
            marks.push_back(std::move(set));
        }

        TrainConfig cfg;
        cfg.regime = regimes[pi % 4];
        cfg.gamma = cfg.regime == Regime::NoAdapt ? 1.0 : rng.uniform(0.1, 0.9);
        cfg.weight_superpixel = rng.uniform(0.5, 1.5);
        std::vector<SourceSample> sb = {{&images[0], &masks[0]}, {&images[1], &masks[1]}};
        std::vector<TargetSample> tb;
        if (cfg.regime != Regime::NoAdapt)
            for (int i = 0; i < 2; ++i) tb.push_back({&images[2 + i], &dists[i], &parts[i], &marks[i]});

        auto loss_at = [&](const std::vector<double>& th) {
            return loss_and_grad<double>(arch, std::span<const double>(th), sb, tb, cfg).loss;
        };
        const auto analytic = loss_and_grad<double>(arch, std::span<const double>(theta), sb, tb, cfg);
        GradCheckProbe probe{cfg.regime, cfg.gamma, C, 0.0};
        for (int k = 0; k < opt.coords; ++k) {
            const std::size_t j = rng.index(theta.size());
            auto plus = theta, minus = theta;
            plus[j] += opt.step;
            minus[j] -= opt.step;
            const double numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * opt.step);
            probe.max_rel_error = std::max(probe.max_rel_error, relative_error(analytic.grad[j], numeric));
        }
        rep.max_rel_error = std::max(rep.max_rel_error, probe.max_rel_error);
        rep.probes.push_back(probe);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CDASEG", u8 version=1, u32 LE descriptor length, descriptor bytes,
// then three native tensors: params, accum_grad_sq, accum_update_sq.

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const SegModel& m, const OptimizerState& st) {
    std::vector<std::uint8_t> out{'C', 'D', 'A', 'S', 'E', 'G', kCheckpointVersion};
    const std::string d = m.arch.descriptor();
    detail::put_u32(out, static_cast<std::uint32_t>(d.size()));
    out.insert(out.end(), d.begin(), d.end());
    const auto dim = static_cast<std::uint32_t>(m.params.size());
    auto opt = st;
    if (opt.accum_grad_sq.empty()) opt = OptimizerState::zeros(m.params.size());
    for (const std::vector<float>* v : {&m.params, &std::as_const(opt.accum_grad_sq), &std::as_const(opt.accum_update_sq)}) {
        if (v->size() != m.params.size()) throw ShapeError("optimizer state size differs from parameters");
        const auto t = encode_tensor(Tensor(std::vector<std::uint32_t>{dim}, *v));
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

struct Checkpoint {
    SegModel model;
    OptimizerState state;
};

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 7 || std::memcmp(bytes.data(), "CDASEG", 6) != 0) throw FormatError("bad checkpoint magic", 0);
    if (bytes[6] != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(bytes[6]), 6);
    std::size_t off = 7;
    if (bytes.size() < 11) throw FormatError("truncated checkpoint header", bytes.size());
    const std::uint32_t len = detail::get_u32(bytes, off);
    off += 4;
    if (bytes.size() - off < len) throw FormatError("truncated architecture descriptor", off);
    const std::string desc(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                           bytes.begin() + static_cast<std::ptrdiff_t>(off + len));
    off += len;
    Checkpoint ck;
    try {
        ck.model.arch = Architecture::parse(desc);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("bad architecture descriptor: ") + e.what(), 11);
    }
    std::vector<float>* slots[] = {&ck.model.params, &ck.state.accum_grad_sq, &ck.state.accum_update_sq};
    for (auto* slot : slots) {
        const std::size_t at = off;
        auto t = decode_tensor(bytes, off);
        if (t.dims.size() != 1 || t.values.size() != ck.model.arch.param_count())
            throw FormatError("checkpoint tensor does not match the architecture", at);
        *slot = std::move(t.values);
    }
    if (off != bytes.size()) throw FormatError("trailing bytes after checkpoint", off);
    ck.model.validate();
    return ck;
}

inline void save_checkpoint(const SegModel& m, const OptimizerState& st, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(m, st));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace cdaseg

#endif  // CDASEG_SEGNET_HPP
