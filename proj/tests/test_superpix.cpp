#include <gtest/gtest.h>

#include <deque>
#include <map>
#include <set>

#include "cdaseg/superpix.hpp"
#include "test_util.hpp"

using namespace cdaseg;

namespace {

// Independent 4-connectivity check: BFS from one pixel of each label must reach all of its pixels.
bool all_connected(const SuperpixelPartition& p) {
    std::vector<int> first(static_cast<std::size_t>(p.count), -1);
    for (std::size_t i = 0; i < p.pixels(); ++i)
        if (first[p.assignment[i]] < 0) first[p.assignment[i]] = static_cast<int>(i);
    std::vector<char> seen(p.pixels(), 0);
    for (int k = 0; k < p.count; ++k) {
        if (first[k] < 0) return false;  // empty superpixel
        std::deque<int> q{first[k]};
        seen[first[k]] = 1;
        while (!q.empty()) {
            const int i = q.front();
            q.pop_front();
            const int r = i / p.width, c = i % p.width;
            const int nr[4] = {r - 1, r + 1, r, r}, nc[4] = {c, c, c - 1, c + 1};
            for (int d = 0; d < 4; ++d) {
                if (nr[d] < 0 || nr[d] >= p.height || nc[d] < 0 || nc[d] >= p.width) continue;
                const int j = nr[d] * p.width + nc[d];
                if (!seen[j] && static_cast<int>(p.assignment[j]) == k) {
                    seen[j] = 1;
                    q.push_back(j);
                }
            }
        }
    }
    for (char s : seen)
        if (!s) return false;
    return true;
}

SuperpixelPartition grid_partition(int w, int h, int cols, int rows) {
    SuperpixelPartition p;
    p.width = w;
    p.height = h;
    p.count = cols * rows;
    p.assignment.resize(static_cast<std::size_t>(w) * h);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            p.assignment[static_cast<std::size_t>(r) * w + c] = static_cast<std::uint32_t>((r * rows / h) * cols + c * cols / w);
    p.refresh_stats();
    return p;
}

}  // namespace

TEST(Slic, ConstantImageGivesGridBlocks) {
    const Image img(8, 8, 3, 0.4f);
    const auto p = slic(img, 4, 0.2, 10);
    ASSERT_EQ(p.count, 4);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) EXPECT_EQ(p.at(r, c), p.at(r / 4 * 4, c / 4 * 4));
    std::set<std::uint32_t> ids(p.assignment.begin(), p.assignment.end());
    EXPECT_EQ(ids.size(), 4u);
    for (auto s : p.sizes) EXPECT_EQ(s, 16u);
}

TEST(Slic, TwoColorHalvesArePure) {
    Image img(16, 8, 3, 0.1f);
    for (int r = 0; r < 8; ++r)
        for (int c = 8; c < 16; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = 0.9f;
    const auto p = slic(img, 2, 0.2, 10);
    ASSERT_EQ(p.count, 2);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 16; ++c) EXPECT_EQ(p.at(r, c), p.at(0, c < 8 ? 0 : 15));
    EXPECT_NE(p.at(0, 0), p.at(0, 15));
}

TEST(Slic, InvariantsOnRandomImages) {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        const int w = 12 + static_cast<int>(rng.index(40)), h = 12 + static_cast<int>(rng.index(40));
        const int K = 2 + static_cast<int>(rng.index(60));
        const auto img = testutil::random_image(rng, w, h);
        const auto p = slic(img, K, 0.05 + rng.uniform(), 5);
        std::uint64_t total = 0;
        for (auto s : p.sizes) total += s;
        EXPECT_EQ(total, static_cast<std::uint64_t>(w) * h);
        EXPECT_TRUE(all_connected(p)) << "trial " << trial;
        EXPECT_LE(std::abs(p.count - K), 0.2 * K + 1e-9) << w << "x" << h << " K=" << K << " got " << p.count;
    }
}

TEST(Slic, Deterministic) {
    Rng rng(32);
    const auto img = testutil::random_image(rng, 30, 20);
    EXPECT_EQ(slic(img, 20, 0.2, 10).assignment, slic(img, 20, 0.2, 10).assignment);
}

TEST(Slic, Errors) {
    const Image img(4, 4, 3);
    EXPECT_THROW(slic(img, 17, 0.2, 10), ShapeError);
    EXPECT_THROW(slic(img, 0, 0.2, 10), ShapeError);
    EXPECT_THROW(slic(img, 4, 0.0, 10), ConfigError);
}

TEST(DominantLabel, PureAndTie) {
    const auto p = grid_partition(4, 4, 2, 1);
    LabelMask m(4, 4, 5, 3);
    for (int r = 0; r < 4; ++r) {
        m.at(r, 2) = r < 2 ? 1 : 0;
        m.at(r, 3) = r < 2 ? 1 : 0;
    }
    const auto d = dominant_label(p, m);
    EXPECT_EQ(d[0], 3);
    EXPECT_EQ(d[1], 0);  // 4 zeros vs 4 ones
    LabelMask all_void(4, 4, 5, LabelMask::kVoid);
    EXPECT_EQ(dominant_label(p, all_void)[0], LabelMask::kVoid);
}

TEST(DominantLabel, MatchesCountingOracle) {
    Rng rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        const auto img = testutil::random_image(rng, 24, 18);
        const auto p = slic(img, 12, 0.3, 5);
        const auto m = testutil::random_mask(rng, 24, 18, 4, 0.3);
        const auto d = dominant_label(p, m);
        for (int k = 0; k < p.count; ++k) {
            std::map<int, int> hist;
            for (std::size_t i = 0; i < p.pixels(); ++i)
                if (static_cast<int>(p.assignment[i]) == k && m.labels[i] != LabelMask::kVoid) ++hist[m.labels[i]];
            int best = LabelMask::kVoid, count = 0;
            for (auto [c, n] : hist)  // ascending class order, strict > keeps the lowest on ties
                if (n > count) {
                    best = c;
                    count = n;
                }
            EXPECT_EQ(d[k], best);
        }
    }
}

TEST(SpFeatures, SingleSuperpixelHasZeroNeighbors) {
    const auto p = grid_partition(6, 6, 1, 1);
    ScoreRaster s{6, 6, 2, std::vector<float>(72, 0.25f)};
    const auto f = sp_features(p, s);
    ASSERT_EQ(f.size(), 1u);
    ASSERT_EQ(f[0].size(), 10u);
    EXPECT_EQ(f[0].vector[0], 0.25);
    EXPECT_EQ(f[0].vector[1], 0.25);
    for (int i = 2; i < 10; ++i) EXPECT_EQ(f[0].vector[i], 0.0);
}

TEST(SpFeatures, TwoByOneNeighborLookup) {
    const auto p = grid_partition(8, 4, 2, 1);
    ScoreRaster s{8, 4, 1, std::vector<float>(32)};
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 8; ++c) s.data[r * 8 + c] = c < 4 ? 1.0f : 3.0f;
    const auto f = sp_features(p, s);
    // blocks: self, left, right, above, below
    EXPECT_EQ(f[0].vector, (std::vector<double>{1, 0, 3, 0, 0}));
    EXPECT_EQ(f[1].vector, (std::vector<double>{3, 1, 0, 0, 0}));
}

TEST(SpFeatures, NonFiniteScoreRejected) {
    const auto p = grid_partition(2, 2, 1, 1);
    ScoreRaster s{2, 2, 1, {0.0f, std::numeric_limits<float>::quiet_NaN(), 0.0f, 0.0f}};
    EXPECT_THROW(sp_features(p, s), ShapeError);
}

TEST(PaletteScores, SimplexAndNearestColor) {
    const std::vector<Rgb> palette = {{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}};
    Image img(2, 1, 3);
    img.data = {0.1f, 0.1f, 0.1f, 0.8f, 0.9f, 0.7f};
    const auto s = palette_scores(img, palette, 0.05);
    ASSERT_EQ(s.depth, 5);
    EXPECT_NEAR(s.data[0] + s.data[1], 1.0, 1e-6);
    EXPECT_GT(s.data[0], s.data[1]);
    EXPECT_GT(s.data[6], s.data[5]);
    EXPECT_EQ(s.data[7], 0.8f);
}

namespace {

struct Blobs {
    std::vector<SuperpixelFeature> feats;
    std::vector<std::uint8_t> labels;
};

Blobs separable_blobs(Rng& rng, int per_class, double scale = 1.0) {
    Blobs b;
    const double centers[3][2] = {{-2, 0}, {2, 0}, {0, 3}};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per_class; ++i) {
            SuperpixelFeature f;
            f.vector = {scale * (centers[c][0] + 0.4 * rng.normal()), scale * (centers[c][1] + 0.4 * rng.normal())};
            b.feats.push_back(f);
            b.labels.push_back(static_cast<std::uint8_t>(c));
        }
    return b;
}

std::vector<int> predictions(const SvmModel& m, const std::vector<SuperpixelFeature>& fs) {
    std::vector<int> out;
    for (const auto& f : fs) out.push_back(classify_sp(m, f).label);
    return out;
}

}  // namespace

TEST(Svm, SeparableBlobsFitPerfectly) {
    Rng rng(34);
    const auto b = separable_blobs(rng, 40);
    SvmOptions opt;
    opt.epochs = 50;
    opt.lambda = 1e-3;
    const auto m = train_sp_svm(b.feats, b.labels, 3, opt);
    const auto pred = predictions(m, b.feats);
    for (std::size_t i = 0; i < pred.size(); ++i) EXPECT_EQ(pred[i], b.labels[i]);
}

TEST(Svm, JointRescalingInvariance) {
    Rng a(35), b2(35);
    const auto b = separable_blobs(a, 30), scaled = separable_blobs(b2, 30, 2.0);
    SvmOptions opt;
    opt.epochs = 10;
    opt.lambda = 1e-2;
    opt.seed = 3;
    const auto m1 = train_sp_svm(b.feats, b.labels, 3, opt);
    opt.lambda *= 4.0;
    const auto m2 = train_sp_svm(scaled.feats, scaled.labels, 3, opt);
    EXPECT_EQ(predictions(m1, b.feats), predictions(m2, scaled.feats));
}

TEST(Svm, DeterministicAndDegenerateWarning) {
    Rng rng(36);
    const auto b = separable_blobs(rng, 10);
    SvmOptions opt;
    opt.seed = 9;
    const auto m1 = train_sp_svm(b.feats, b.labels, 3, opt), m2 = train_sp_svm(b.feats, b.labels, 3, opt);
    EXPECT_EQ(m1.weights, m2.weights);
    EXPECT_EQ(m1.bias, m2.bias);

    std::vector<std::string> seen;
    {
        ScopedWarningSink sink([&](const std::string& msg) { seen.push_back(msg); });
        const std::vector<std::uint8_t> one(b.feats.size(), 1);
        train_sp_svm(b.feats, one, 3, opt);
    }
    EXPECT_EQ(seen.size(), 1u);

    const std::vector<std::uint8_t> bad(b.feats.size(), 7);
    EXPECT_THROW(train_sp_svm(b.feats, bad, 3, opt), LabelRangeError);
}

TEST(Svm, SaveLoadRoundTrip) {
    testutil::TempDir dir("svm");
    SvmModel m{2, 3, {0.5, -1, 2, 0.25, 0, 1}, {0.125, -4}};
    save_svm(m, dir.path() / "svm.cdat");
    const auto back = load_svm(dir.path() / "svm.cdat");
    EXPECT_EQ(back.weights, m.weights);
    EXPECT_EQ(back.bias, m.bias);
    EXPECT_EQ(back.dim, 3);
}

TEST(Classify, DefinitionalCases) {
    const std::vector<double> d1 = {3.0, 1.0};
    EXPECT_EQ(classify_decisions(d1).label, 0);
    EXPECT_EQ(classify_decisions(d1).confidence, 2.0);
    const std::vector<double> tie = {1.5, 1.5, 0.0};
    EXPECT_EQ(classify_decisions(tie).label, 0);
    EXPECT_EQ(classify_decisions(tie).confidence, 0.0);
    SvmModel m{2, 2, {1, 0, 0, 1}, {0, 0}};
    SuperpixelFeature wrong;
    wrong.vector = {1.0};
    EXPECT_THROW(classify_sp(m, wrong), ShapeError);
}

TEST(Classify, ArgmaxInvariantUnderPositiveRescaling) {
    Rng rng(37);
    for (int trial = 0; trial < 50; ++trial) {
        SvmModel m{4, 3, std::vector<double>(12), std::vector<double>(4)};
        for (auto& w : m.weights) w = rng.normal();
        for (auto& b : m.bias) b = rng.normal();
        SuperpixelFeature f;
        f.vector = {rng.normal(), rng.normal(), rng.normal()};
        SvmModel s = m;
        const double a = 0.1 + 10 * rng.uniform();
        for (auto& w : s.weights) w *= a;
        for (auto& b : s.bias) b *= a;
        EXPECT_EQ(classify_sp(m, f).label, classify_sp(s, f).label);
    }
}

TEST(Landmarks, TopFractionAndTies) {
    std::vector<ClassifiedSuperpixel> cs;
    for (std::uint32_t i = 0; i < 10; ++i) cs.push_back({i, static_cast<int>(i % 3), static_cast<double>((i * 7) % 10)});
    const auto six = select_landmarks(cs, 0.6, 3);
    ASSERT_EQ(six.entries.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(six.entries[i].confidence, 9.0 - static_cast<double>(i));
    EXPECT_EQ(six.entries[0].distribution, LabelDistribution::one_hot(3, six.entries[0].label));

    const auto all = select_landmarks(cs, 1.0, 3);
    EXPECT_EQ(all.entries.size(), 10u);
    for (std::size_t i = 1; i < 10; ++i) EXPECT_GE(all.entries[i - 1].confidence, all.entries[i].confidence);

    std::vector<ClassifiedSuperpixel> flat;
    for (std::uint32_t i = 0; i < 5; ++i) flat.push_back({4 - i, 0, 1.0});
    const auto two = select_landmarks(flat, 0.4, 2);
    ASSERT_EQ(two.entries.size(), 2u);
    EXPECT_EQ(two.entries[0].superpixel, 0u);
    EXPECT_EQ(two.entries[1].superpixel, 1u);

    EXPECT_THROW(select_landmarks(std::vector<ClassifiedSuperpixel>{}, 0.6, 2), EmptyRegionError);
    EXPECT_THROW(select_landmarks(cs, 0.0, 3), ConfigError);
}

TEST(Landmarks, CountIsCeilOfFraction) {
    for (std::size_t K = 1; K <= 40; ++K) {
        std::vector<ClassifiedSuperpixel> cs;
        for (std::uint32_t i = 0; i < K; ++i) cs.push_back({i, 0, 0.0});
        EXPECT_EQ(select_landmarks(cs, 0.6, 1).entries.size(),
                  static_cast<std::size_t>(std::ceil(0.6 * static_cast<double>(K) - 1e-9)));
    }
}

TEST(Paint, LandmarksOnlyLeavesVoid) {
    SuperpixelAnalysis a;
    a.partition = grid_partition(4, 2, 2, 1);
    a.classified = {{0, 2, 1.0}, {1, 1, 0.5}};
    a.landmarks = select_landmarks(a.classified, 0.5, 3);
    const auto full = paint_superpixels(a, 3, false), lm = paint_superpixels(a, 3, true);
    EXPECT_EQ(full.labels, (std::vector<std::uint8_t>{2, 2, 1, 1, 2, 2, 1, 1}));
    const auto V = LabelMask::kVoid;
    EXPECT_EQ(lm.labels, (std::vector<std::uint8_t>{2, 2, V, V, 2, 2, V, V}));
}

TEST(Pipeline, LandmarksAreMoreAccurateOnTargetImages) {
    const auto src = generate_dataset(preset_source(), 30, 48, 48, 5);
    const auto tgt = generate_dataset(preset_target(), 20, 48, 48, 6, Domain::Target);
    SuperpixelOptions opt;
    opt.count = 60;
    const auto sc = SuperpixelClassifier::fit(src, preset_source().palette, opt);
    SuperpixelAccuracy acc;
    for (const auto& it : tgt.items) {
        const auto a = sc.analyze(it.image);
        EXPECT_EQ(a.classified.size(), static_cast<std::size_t>(a.partition.count));
        EXPECT_EQ(a.landmarks.entries.size(),
                  static_cast<std::size_t>(std::ceil(0.6 * a.partition.count - 1e-9)));
        acc.add(a, *it.mask);
    }
    EXPECT_GT(acc.all(), 0.5);
    EXPECT_GE(acc.landmarks(), acc.all());
}
