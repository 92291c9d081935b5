#include <gtest/gtest.h>

#include "cdaseg/labeldist.hpp"
#include "cdaseg/scenegen.hpp"
#include <numeric>

#include "test_util.hpp"

using namespace cdaseg;

namespace {

LabelDistribution random_simplex(Rng& rng, int C, bool sparse = false) {
    std::vector<double> p(static_cast<std::size_t>(C));
    double s = 0.0;
    for (auto& v : p) {
        v = sparse && rng.uniform() < 0.3 ? 0.0 : -std::log(1.0 - rng.uniform());
        s += v;
    }
    if (s == 0.0) {
        p[0] = 1.0;
        s = 1.0;
    }
    for (auto& v : p) v /= s;
    return LabelDistribution(p);
}

}  // namespace

TEST(DistFromMask, HandCounted) {
    LabelMask m(2, 2, 3);
    m.labels = {0, 0, 1, 2};
    EXPECT_EQ(dist_from_mask(m).probs, (std::vector<double>{0.5, 0.25, 0.25}));
    LabelMask zero(3, 3, 4, 0);
    EXPECT_EQ(dist_from_mask(zero), LabelDistribution::one_hot(4, 0));
}

TEST(DistFromMask, MatchesPixelCountOracle) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int C = 2 + static_cast<int>(rng.index(7));
        const auto m = testutil::random_mask(rng, 16, 16, C, trial % 2 ? 0.2 : 0.0);
        std::vector<double> count(static_cast<std::size_t>(C), 0.0);
        double n = 0.0;
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c)
                if (m.at(r, c) != LabelMask::kVoid) {
                    count[m.at(r, c)] += 1.0;
                    n += 1.0;
                }
        const auto d = dist_from_mask(m);
        for (int c = 0; c < C; ++c) EXPECT_EQ(d.probs[c], count[c] / n);
        EXPECT_TRUE(d.is_simplex());
    }
}

TEST(DistFromMask, AllVoidIsAnError) {
    LabelMask m(2, 2, 3, LabelMask::kVoid);
    EXPECT_THROW(dist_from_mask(m), EmptyRegionError);
}

TEST(DistFromPrediction, SmallCases) {
    Prediction one(1, 1, 2);
    one.probs = {0.7f, 0.3f};
    const auto d = dist_from_prediction(one);
    EXPECT_NEAR(d.probs[0], 0.7, 1e-7);
    EXPECT_NEAR(d.probs[1], 0.3, 1e-7);
    Prediction two(2, 1, 2);
    two.probs = {1, 0, 0, 1};
    EXPECT_EQ(dist_from_prediction(two).probs, (std::vector<double>{0.5, 0.5}));
    const std::vector<std::uint32_t> region{1};
    EXPECT_EQ(dist_from_prediction(two, region).probs, (std::vector<double>{0.0, 1.0}));
    EXPECT_THROW(dist_from_prediction(two, std::span<const std::uint32_t>{}), EmptyRegionError);
}

TEST(DistFromPrediction, OneHotAgreesWithMask) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = testutil::random_mask(rng, 8, 6, 5, 0.0);
        const auto a = dist_from_prediction(one_hot_prediction(m));
        const auto b = dist_from_mask(m);
        for (int c = 0; c < 5; ++c) EXPECT_NEAR(a.probs[c], b.probs[c], 1e-12);
    }
}

TEST(CrossEntropy, KnownValues) {
    const LabelDistribution half({0.5, 0.5});
    EXPECT_NEAR(cross_entropy(half, half), 0.693147, 1e-6);
    const LabelDistribution e0 = LabelDistribution::one_hot(2, 0);
    const LabelDistribution q({0.8, 0.2});
    // H(p) + KL(p || q), term by term
    double h = 0.0, kl = 0.0;
    for (int c = 0; c < 2; ++c)
        if (e0.probs[c] > 0) {
            h -= e0.probs[c] * std::log(e0.probs[c]);
            kl += e0.probs[c] * std::log(e0.probs[c] / q.probs[c]);
        }
    EXPECT_NEAR(cross_entropy(e0, q), h + kl, 1e-12);
    EXPECT_NEAR(cross_entropy(e0, q), 0.223144, 1e-6);
    // zero entries in p_hat are clamped rather than producing inf
    EXPECT_NEAR(cross_entropy(e0, LabelDistribution::one_hot(2, 1)), -std::log(kLogClamp), 1e-9);
}

TEST(CrossEntropy, GibbsInequality) {
    Rng rng(13);
    for (int trial = 0; trial < 2000; ++trial) {
        const int C = 2 + static_cast<int>(rng.index(10));
        const auto p = random_simplex(rng, C, trial % 3 == 0);
        const auto q = random_simplex(rng, C);
        EXPECT_GE(cross_entropy(p, q) - entropy(p), -1e-9);
        EXPECT_NEAR(cross_entropy(p, p), entropy(p), 1e-9);
    }
}

TEST(Chi2, KnownValuesAndProperties) {
    const auto e0 = LabelDistribution::one_hot(2, 0), e1 = LabelDistribution::one_hot(2, 1);
    EXPECT_EQ(chi2_distance(e0, e0), 0.0);
    EXPECT_DOUBLE_EQ(chi2_distance(e0, e1), 1.0);
    EXPECT_NEAR(chi2_distance(LabelDistribution({0.5, 0.5}), e0), 0.5 * (0.25 / 1.5 + 0.25 / 0.5), 1e-15);
    EXPECT_NEAR(chi2_distance(LabelDistribution({0.5, 0.5}), e0), 1.0 / 3.0, 1e-15);
    Rng rng(14);
    for (int trial = 0; trial < 2000; ++trial) {
        const int C = 2 + static_cast<int>(rng.index(10));
        const auto p = random_simplex(rng, C, true), q = random_simplex(rng, C, true);
        EXPECT_EQ(chi2_distance(p, q), chi2_distance(q, p));
        EXPECT_LE(chi2_distance(p, q), 1.0 + 1e-12);
        EXPECT_GE(chi2_distance(p, q), 0.0);
        if (p != q) {
            EXPECT_GT(chi2_distance(p, q), 0.0);
        }
    }
}

TEST(Means, SourceMeanAndUniform) {
    const std::vector<LabelDistribution> two = {LabelDistribution::one_hot(2, 0), LabelDistribution::one_hot(2, 1)};
    EXPECT_EQ(source_mean(two).probs, (std::vector<double>{0.5, 0.5}));
    for (double v : uniform_dist(16).probs) EXPECT_EQ(v, 0.0625);
    Rng rng(15);
    const auto p = random_simplex(rng, 6);
    const std::vector<LabelDistribution> copies(5, p);
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(source_mean(copies).probs[c], p.probs[c], 1e-15);
}

TEST(GlobalFeatures, ConstantBlackImage) {
    const Image img(8, 8, 3, 0.0f);
    const auto f = global_features(img);
    ASSERT_EQ(f.size(), static_cast<std::size_t>(GlobalFeature::kDim));
    for (int ch = 0; ch < 3; ++ch)
        for (int b = 0; b < GlobalFeature::kBins; ++b)
            EXPECT_EQ(f.vector[ch * GlobalFeature::kBins + b], b == 0 ? 1.0 : 0.0);
    for (std::size_t d = 3 * GlobalFeature::kBins; d < f.size(); ++d) EXPECT_EQ(f.vector[d], 0.0);
}

TEST(GlobalFeatures, HistogramsSumToOne) {
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const auto img = testutil::random_image(rng, 5 + static_cast<int>(rng.index(20)), 5 + static_cast<int>(rng.index(20)));
        const auto f = global_features(img);
        for (int ch = 0; ch < 3; ++ch) {
            double s = 0.0;
            for (int b = 0; b < GlobalFeature::kBins; ++b) s += f.vector[ch * GlobalFeature::kBins + b];
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
    EXPECT_THROW(global_features(Image(4, 4, 2)), ShapeError);
}

TEST(GlobalFeatures, HistogramIgnoresGlobalGain) {
    Rng rng(17);
    Image img = testutil::random_image(rng, 16, 16);
    for (auto& v : img.data) v *= 0.5f;  // keep the brightened copy inside [0, 1]
    Image dark = img;
    for (auto& v : dark.data) v *= 0.5f;
    const auto a = global_features(img), b = global_features(dark);
    for (int d = 0; d < 3 * GlobalFeature::kBins; ++d) EXPECT_NEAR(a.vector[d], b.vector[d], 1e-12);
}

TEST(Standardizer, ZeroMeanUnitScale) {
    Rng rng(18);
    std::vector<GlobalFeature> fs(30);
    for (auto& f : fs) {
        f.vector = {rng.normal(3.0, 2.0), rng.normal(), 5.0};
    }
    const auto st = Standardizer::fit(fs);
    const auto z = st.apply(fs);
    for (int d = 0; d < 2; ++d) {
        double m = 0, v = 0;
        for (const auto& f : z) m += f.vector[d] / 30.0;
        for (const auto& f : z) v += (f.vector[d] - m) * (f.vector[d] - m) / 30.0;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-12);
    }
    EXPECT_EQ(st.scale[2], 1.0);  // constant dimension
}

TEST(LogReg, ZeroModelIsUniform) {
    const auto m = LogRegModel::zeros(4, 3);
    GlobalFeature f;
    f.vector = {1.0, -2.0, 0.5};
    for (double v : predict_logreg(m, f).probs) EXPECT_DOUBLE_EQ(v, 0.25);
    GlobalFeature wrong;
    wrong.vector = {1.0};
    EXPECT_THROW(predict_logreg(m, wrong), ShapeError);
}

TEST(LogReg, SimplexAndBiasMonotone) {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = LogRegModel::zeros(5, 4);
        for (auto& w : m.weights) w = rng.normal();
        for (auto& b : m.bias) b = rng.normal();
        GlobalFeature f;
        for (int d = 0; d < 4; ++d) f.vector.push_back(rng.normal());
        const auto p = predict_logreg(m, f);
        EXPECT_TRUE(p.is_simplex(1e-9));
        const int c = static_cast<int>(rng.index(5));
        m.bias[c] += 0.5;
        EXPECT_GT(predict_logreg(m, f).probs[c], p.probs[c]);
    }
}

TEST(LogReg, OverfitsSingleExample) {
    GlobalFeature f;
    f.vector = {0.3, -1.0, 2.0, 0.1};
    const LabelDistribution target({0.6, 0.3, 0.1});
    LogRegOptions opt;
    opt.epochs = 2000;
    opt.l2 = 0.0;
    opt.lr = 0.1;
    const std::vector<GlobalFeature> fs{f};
    const std::vector<LabelDistribution> ts{target};
    const auto m = fit_logreg(fs, ts, opt);
    EXPECT_LE(chi2_distance(predict_logreg(m, f), target), 0.01);
}

TEST(LogReg, HeavyL2FallsBackToMeanTarget) {
    Rng rng(20);
    std::vector<GlobalFeature> fs(40);
    std::vector<LabelDistribution> ts(40);
    for (std::size_t i = 0; i < fs.size(); ++i) {
        for (int d = 0; d < 6; ++d) fs[i].vector.push_back(rng.normal());
        ts[i] = random_simplex(rng, 4);
    }
    LogRegOptions opt;
    opt.l2 = 1e3;
    opt.epochs = 300;
    const auto m = fit_logreg(fs, ts, opt);
    const auto mean = source_mean(ts);
    for (double w : m.weights) EXPECT_LT(std::abs(w), 1e-3);
    for (const auto& f : fs) EXPECT_LE(chi2_distance(predict_logreg(m, f), mean), 0.05);
}

TEST(LogReg, DeterministicAndDivergenceReported) {
    Rng rng(21);
    std::vector<GlobalFeature> fs(20);
    std::vector<LabelDistribution> ts(20);
    for (std::size_t i = 0; i < fs.size(); ++i) {
        for (int d = 0; d < 3; ++d) fs[i].vector.push_back(rng.normal());
        ts[i] = random_simplex(rng, 3);
    }
    LogRegOptions opt;
    opt.epochs = 20;
    opt.seed = 5;
    const auto a = fit_logreg(fs, ts, opt), b = fit_logreg(fs, ts, opt);
    EXPECT_EQ(a.weights, b.weights);
    EXPECT_EQ(a.bias, b.bias);

    fs[3].vector[1] = std::numeric_limits<double>::infinity();
    try {
        fit_logreg(fs, ts, opt);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.epoch(), 0);
    }
}

TEST(LogReg, SaveLoadRoundTrip) {
    testutil::TempDir dir("logreg");
    auto m = LogRegModel::zeros(3, 4);
    m.weights = {0.5, -1.25, 2, 0, 1, 1, 1, 1, -0.5, 0.25, 0.125, 3};
    m.bias = {0.5, -0.5, 0.0};
    m.trained_on = 17;
    const auto st = Standardizer{{1, 2, 3, 4}, {0.5, 1, 2, 4}};
    save_logreg(m, dir.path() / "lr", &st);
    const auto back = load_logreg(dir.path() / "lr");
    EXPECT_EQ(back.model.weights, m.weights);
    EXPECT_EQ(back.model.bias, m.bias);
    EXPECT_EQ(back.model.trained_on, 17u);
    ASSERT_TRUE(back.standardizer.has_value());
    EXPECT_EQ(back.standardizer->scale, st.scale);
}

TEST(Knn, DefinitionalCases) {
    std::vector<GlobalFeature> fs(3);
    fs[0].vector = {1.0};
    fs[1].vector = {3.0};
    fs[2].vector = {-2.0};
    const std::vector<LabelDistribution> ds = {LabelDistribution({1, 0, 0}), LabelDistribution({0, 1, 0}),
                                               LabelDistribution({0, 0, 1})};
    GlobalFeature q;
    q.vector = {0.0};  // distances 1, 3, 2
    EXPECT_EQ(knn_estimate(q, fs, ds, 1), ds[0]);
    EXPECT_EQ(knn_estimate(q, fs, ds, 2).probs, (std::vector<double>{0.5, 0.0, 0.5}));
    const auto all = knn_estimate(q, fs, ds, 3), mean = source_mean(ds);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(all.probs[c], mean.probs[c], 1e-15);
    EXPECT_THROW(knn_estimate(q, std::span<const GlobalFeature>{}, std::span<const LabelDistribution>{}, 1),
                 EmptyRegionError);
}

TEST(Knn, MatchesSortOracle) {
    Rng rng(22);
    std::vector<GlobalFeature> fs(25);
    std::vector<LabelDistribution> ds(25);
    for (std::size_t i = 0; i < fs.size(); ++i) {
        for (int d = 0; d < 4; ++d) fs[i].vector.push_back(rng.normal());
        ds[i] = random_simplex(rng, 3);
    }
    GlobalFeature q;
    for (int d = 0; d < 4; ++d) q.vector.push_back(rng.normal());
    std::vector<std::size_t> idx(fs.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto dist = [&](std::size_t i) {
        double s = 0;
        for (int d = 0; d < 4; ++d) s += std::pow(q.vector[d] - fs[i].vector[d], 2);
        return s;
    };
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
    std::vector<double> expect(3, 0.0);
    for (int k = 0; k < 5; ++k)
        for (int c = 0; c < 3; ++c) expect[c] += ds[idx[k]].probs[c] / 5.0;
    const auto got = knn_estimate(q, fs, ds, 5);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got.probs[c], expect[c], 1e-12);
}

TEST(Estimators, ParseNamesAndSwitching) {
    EXPECT_EQ(parse_estimator("lr"), Estimator::LogReg);
    EXPECT_EQ(parse_estimator("knn"), Estimator::Knn);
    EXPECT_EQ(parse_estimator("srcmean"), Estimator::SourceMean);
    EXPECT_EQ(parse_estimator("uniform"), Estimator::Uniform);
    EXPECT_THROW(parse_estimator("svm"), ConfigError);

    const auto src = generate_dataset(preset_source(), 20, 24, 24, 1);
    const auto tgt = generate_dataset(preset_target(), 6, 24, 24, 99, Domain::Target);
    GlobalEstimatorOptions opt;
    opt.logreg.epochs = 20;
    const auto est = GlobalEstimators::fit(src, opt);
    const auto images = tgt.images();
    for (Estimator e : {Estimator::LogReg, Estimator::Knn, Estimator::SourceMean, Estimator::Uniform}) {
        const auto out = est.estimate_all(e, images);
        ASSERT_EQ(out.size(), images.size());
        for (const auto& d : out) EXPECT_TRUE(d.is_simplex());
    }
    EXPECT_EQ(est.estimate_all(Estimator::Uniform, images)[0], uniform_dist(8));
    EXPECT_EQ(est.estimate_all(Estimator::SourceMean, images)[0], est.mean);
}
