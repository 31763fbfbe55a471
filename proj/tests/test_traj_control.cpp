#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "anyi2v/traj_control.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace anyi2v;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Random features [f, C, H, W] with a decaying spectrum so eigen-gaps are clear.
Tensor spectral_features(std::size_t f, std::size_t c, std::size_t h, std::size_t w, std::uint32_t seed) {
    const auto raw = oracle::random_vec(f * c * h * w, seed);
    std::vector<float> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const std::size_t ch = (i / (h * w)) % c;
        out[i] = float(raw[i] * std::pow(0.85, double(ch)) + 0.1 * double(ch));
    }
    return Tensor({f, c, h, w}, std::move(out));
}

/// Token covariance of [f, C, H, W] features, in double, by explicit loops.
oracle::Vec covariance(const Tensor& x) {
    const std::size_t f = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), n = f * hw;
    const auto v = x.data();
    oracle::Vec mean(c, 0.0), cov(c * c, 0.0);
    auto at = [&](std::size_t token, std::size_t ch) { return double(v[((token / hw) * c + ch) * hw + token % hw]); };
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t a = 0; a < c; ++a) mean[a] += at(t, a) / double(n);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t b = 0; b < c; ++b) cov[a * c + b] += (at(t, a) - mean[a]) * (at(t, b) - mean[b]) / double(n);
    return cov;
}

std::vector<oracle::Vec> basis_rows(const PcaBasis& p, std::size_t count) {
    const std::size_t c = p.basis.dim(1);
    std::vector<oracle::Vec> rows;
    for (std::size_t m = 0; m < count; ++m) {
        rows.emplace_back(p.basis.data().begin() + long(m * c), p.basis.data().begin() + long((m + 1) * c));
    }
    return rows;
}

/// Sum of squared deviations of the values under a 0/1 labelling.
double partition_sse(const std::vector<float>& v, const std::vector<float>& mask) {
    double s[2] = {0, 0}, n[2] = {0, 0};
    for (std::size_t i = 0; i < v.size(); ++i) {
        s[int(mask[i])] += v[i];
        n[int(mask[i])] += 1;
    }
    double sse = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double m = s[int(mask[i])] / n[int(mask[i])];
        sse += (v[i] - m) * (v[i] - m);
    }
    return sse;
}

TrajectoryContext context(std::vector<Box> boxes, std::size_t image, int k = 9) {
    TrajectoryContext ctx;
    ctx.spec.groups.push_back({std::move(boxes), k});
    ctx.image_height = ctx.image_width = image;
    return ctx;
}

}  // namespace

// ---------------------------------------------------------------------------
// Specs and boxes

TEST(TrajectorySpec, JsonRoundTripAndDefaults) {
    const auto spec = TrajectorySpec::from_json(R"({"groups":[{"boxes":[[0,0,8,8],[4,0,12,8]]}]})");
    EXPECT_EQ(spec.pca_dim, 64);
    ASSERT_EQ(spec.groups.size(), 1u);
    EXPECT_EQ(spec.groups[0].salient_k, 9);
    EXPECT_EQ(spec.groups[0].boxes[1], (Box{4, 0, 12, 8}));
    const auto back = TrajectorySpec::from_json(spec.to_json());
    EXPECT_EQ(back.to_json(), spec.to_json());
    EXPECT_NO_THROW(spec.validate(2, 16, 16));
}

TEST(TrajectorySpec, ParseAndValidationErrors) {
    for (const char* bad : {"", "{", "[]", R"({"pca_dim":4})", R"({"groups":[{"boxes":[[0,0,8]]}]})",
                            R"({"groups":[{"boxes":[["a",0,1,1]]}]})", R"({"groups":[{"boxes":3}]})"}) {
        EXPECT_THROW(TrajectorySpec::from_json(bad), InputError) << bad;
    }
    const auto ok = TrajectorySpec::from_json(R"({"groups":[{"boxes":[[0,0,8,8],[4,0,12,8]]}]})");
    EXPECT_THROW(ok.validate(3, 16, 16), InputError);
    EXPECT_THROW(ok.validate(2, 16, 10), InputError);
    TrajectorySpec k0 = ok;
    k0.groups[0].salient_k = 0;
    EXPECT_THROW(k0.validate(2, 16, 16), InputError);
    TrajectorySpec m0 = ok;
    m0.pca_dim = 0;
    EXPECT_THROW(m0.validate(2, 16, 16), InputError);
    TrajectorySpec empty_box = ok;
    empty_box.groups[0].boxes[0] = {3, 3, 3, 5};
    EXPECT_THROW(empty_box.validate(2, 16, 16), InputError);
    EXPECT_THROW(TrajectorySpec{}.validate(2, 16, 16), InputError);
    EXPECT_THROW(TrajectorySpec::load("/nonexistent/traj.json"), InputError);
}

TEST(MapBoxToGrid, FloorCeilArithmetic) {
    EXPECT_EQ(map_box_to_grid({0, 0, 64, 64}, 256, 256, 32, 32), (GridBox{0, 0, 8, 8}));
    EXPECT_EQ(map_box_to_grid({0, 0, 256, 128}, 128, 256, 16, 32), (GridBox{0, 0, 32, 16}));
    EXPECT_EQ(map_box_to_grid({10, 10, 11, 11}, 256, 256, 8, 8), (GridBox{0, 0, 1, 1}));
    EXPECT_EQ(map_box_to_grid({4, 4, 28, 28}, 64, 64, 16, 16), (GridBox{1, 1, 7, 7}));
    EXPECT_EQ(map_box_to_grid({5, 5, 27, 27}, 64, 64, 16, 16), (GridBox{1, 1, 7, 7}));
    EXPECT_THROW(map_box_to_grid({0, 0, 300, 10}, 256, 256, 8, 8), InputError);
    EXPECT_THROW(map_box_to_grid({-1, 0, 10, 10}, 256, 256, 8, 8), InputError);
}

// ---------------------------------------------------------------------------
// PCA

TEST(Pca, CollinearPointsGiveOneComponent) {
    std::vector<float> v(2 * 16);
    for (std::size_t i = 0; i < 16; ++i) {
        v[i] = float(i) * 0.25f - 1.5f;
        v[16 + i] = 2.0f * v[i];
    }
    const Tensor x({1, 2, 1, 16}, v);
    std::vector<std::string> warnings;
    const PcaBasis p = fit_pca(x, 1, &warnings);
    EXPECT_TRUE(warnings.empty());
    EXPECT_NEAR(p.basis.data()[0], 1.0 / std::sqrt(5.0), 1e-6);
    EXPECT_NEAR(p.basis.data()[1], 2.0 / std::sqrt(5.0), 1e-6);
    // Reconstruction mean + coeff * basis.
    const Tensor coeff = pca_project(x, p);
    double worst = 0.0;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t c = 0; c < 2; ++c) {
            const double rec = p.mean.data()[c] + double(coeff.data()[i]) * p.basis.data()[c];
            worst = std::max(worst, std::abs(rec - v[c * 16 + i]));
        }
    EXPECT_LT(worst, 1e-5);
}

TEST(Pca, FullBasisReconstructsExactly) {
    const Tensor x = spectral_features(2, 6, 4, 5, 21);
    const PcaBasis p = fit_pca(x, 6);
    EXPECT_EQ(p.rank, 6u);
    const Tensor coeff = pca_project(x, p);
    const std::size_t hw = 20;
    double worst = 0.0;
    for (std::size_t fr = 0; fr < 2; ++fr)
        for (std::size_t c = 0; c < 6; ++c)
            for (std::size_t q = 0; q < hw; ++q) {
                double rec = p.mean.data()[c];
                for (std::size_t m = 0; m < 6; ++m) rec += double(coeff.data()[(fr * 6 + m) * hw + q]) * p.basis.data()[m * 6 + c];
                worst = std::max(worst, std::abs(rec - x.data()[(fr * 6 + c) * hw + q]));
            }
    EXPECT_LT(worst, 1e-5);
}

TEST(Pca, SubspaceMatchesJacobiOracle) {
    for (std::size_t m : {1u, 4u, 16u, 64u}) {
        const std::size_t c = 64;
        const Tensor x = spectral_features(2, c, 10, 10, 100 + std::uint32_t(m));  // 200 tokens
        const PcaBasis p = fit_pca(x, m);
        ASSERT_EQ(p.rank, m);
        const auto [eigvals, eigvecs] = oracle::jacobi_eigen(covariance(x), c);
        const std::vector<oracle::Vec> expected(eigvecs.begin(), eigvecs.begin() + long(m));
        EXPECT_LT(oracle::max_principal_angle(basis_rows(p, m), expected), 1e-4) << "M=" << m;
        for (std::size_t i = 0; i < m; ++i) {
            EXPECT_NEAR(p.explained_variance[i], eigvals[i], 1e-9 + 1e-6 * eigvals[i]);
            if (i) EXPECT_LE(p.explained_variance[i], p.explained_variance[i - 1]);
        }
    }
}

TEST(Pca, OrthonormalRowsAndSignConvention) {
    const Tensor x = spectral_features(3, 12, 4, 4, 5);
    const PcaBasis p = fit_pca(x, 8);
    const auto rows = basis_rows(p, 8);
    for (std::size_t a = 0; a < 8; ++a) {
        for (std::size_t b = 0; b < 8; ++b) {
            double dot = 0.0;
            for (std::size_t k = 0; k < 12; ++k) dot += rows[a][k] * rows[b][k];
            EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-5);
        }
        const auto big = std::max_element(rows[a].begin(), rows[a].end(),
                                          [](double u, double v) { return std::abs(u) < std::abs(v); });
        EXPECT_GT(*big, 0.0);
    }
}

TEST(Pca, RankDeficiencyZeroPadsWithWarning) {
    const Tensor x = spectral_features(1, 4, 2, 2, 9);  // 4 tokens: rank <= 3
    std::vector<std::string> warnings;
    const PcaBasis p = fit_pca(x, 6, &warnings);
    EXPECT_EQ(p.rank, 3u);
    ASSERT_EQ(warnings.size(), 1u);
    for (std::size_t i = 3 * 4; i < 6 * 4; ++i) EXPECT_EQ(p.basis.data()[i], 0.0f);
    for (std::size_t m = 3; m < 6; ++m) EXPECT_EQ(p.explained_variance[m], 0.0);
    EXPECT_EQ(pca_project(x, p).shape(), (Shape{1, 6, 2, 2}));
    EXPECT_THROW(fit_pca(x, 0), InputError);
}

// ---------------------------------------------------------------------------
// Salient points, similarity, masks

TEST(SalientPoints, UniformLattice) {
    const GridBox b3{2, 3, 5, 6};
    const auto all = select_salient_points(b3, 9);
    ASSERT_EQ(all.size(), 9u);
    std::set<std::pair<std::size_t, std::size_t>> cells;
    for (const auto& p : all) cells.insert({p.row, p.col});
    EXPECT_EQ(cells.size(), 9u);
    EXPECT_EQ(*cells.begin(), (std::pair<std::size_t, std::size_t>{3, 2}));

    std::vector<std::string> warnings;
    const auto one = select_salient_points(GridBox{4, 4, 5, 5}, 9, &warnings);
    EXPECT_EQ(one, (std::vector<GridPoint>{{4, 4}}));
    EXPECT_EQ(warnings.size(), 1u);

    EXPECT_EQ(select_salient_points(GridBox{0, 0, 8, 8}, 4),
              (std::vector<GridPoint>{{2, 2}, {2, 5}, {5, 2}, {5, 5}}));
    EXPECT_EQ(select_salient_points(GridBox{0, 0, 8, 8}, 3).size(), 3u);
    EXPECT_THROW(select_salient_points(GridBox{0, 0, 0, 4}, 1), InputError);
    EXPECT_THROW(select_salient_points(GridBox{0, 0, 4, 4}, 0), InputError);
}

TEST(Similarity, CosineSpecialCases) {
    // Three channels on a 1x3 grid: u, an orthogonal vector, and -u.
    const Tensor f({3, 1, 3}, std::vector<float>{1, 0, -1, 2, 0, -2, 0, 5, 0});
    const Tensor s = similarity_map(f, GridBox{0, 0, 3, 1}, f, GridPoint{0, 0});
    EXPECT_EQ(s.shape(), (Shape{1, 3}));
    EXPECT_NEAR(s.data()[0], 1.0f, 1e-6);
    EXPECT_NEAR(s.data()[1], 0.0f, 1e-6);
    EXPECT_NEAR(s.data()[2], -1.0f, 1e-6);
    // A zero reference vector is guarded rather than dividing by zero.
    const Tensor zero({3, 1, 3}, 0.0f);
    const Tensor guarded = similarity_map(f, GridBox{0, 0, 3, 1}, zero, GridPoint{0, 1});
    for (float v : guarded.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_THROW(similarity_map(f, GridBox{0, 0, 4, 1}, f, GridPoint{0, 0}), ShapeError);
}

TEST(Similarity, AggregateIsPointwiseMax) {
    const Tensor a({1, 2}, std::vector<float>{0.2f, 0.8f}), b({1, 2}, std::vector<float>{0.5f, 0.1f});
    EXPECT_EQ(values(aggregate_similarity({a, b})), (std::vector<float>{0.5f, 0.8f}));
    EXPECT_TRUE(bitwise_equal(aggregate_similarity({a}), a));
    std::vector<Tensor> maps;
    for (std::uint64_t k = 0; k < 5; ++k) maps.push_back(fixture::noise({4, 3}, k));
    const Tensor agg = aggregate_similarity(maps);
    for (const auto& m : maps)
        for (std::size_t i = 0; i < agg.numel(); ++i) EXPECT_GE(agg.data()[i], m.data()[i]);
    EXPECT_THROW(aggregate_similarity({}), InputError);
    EXPECT_THROW(aggregate_similarity({a, Tensor({2, 1})}), ShapeError);
}

TEST(TwoMeans, DocumentedExamples) {
    const auto m = kmeans2_mask(Tensor({4}, std::vector<float>{0.1f, 0.2f, 0.9f, 1.0f}));
    EXPECT_EQ(values(m.values), (std::vector<float>{0, 0, 1, 1}));
    EXPECT_FALSE(m.degenerate);
    const auto flat = kmeans2_mask(Tensor({2, 3}, 0.4f));
    EXPECT_TRUE(flat.degenerate);
    EXPECT_EQ(values(flat.values), std::vector<float>(6, 1.0f));
    EXPECT_EQ(values(kmeans2_mask(Tensor({2}, std::vector<float>{-1, 1})).values), (std::vector<float>{0, 1}));
    EXPECT_EQ(values(kmeans2_mask(Tensor({2}, std::vector<float>{1, -1})).values), (std::vector<float>{1, 0}));
    EXPECT_THROW(kmeans2_mask(Tensor({0})), InputError);
}

TEST(TwoMeans, MatchesExhaustiveOptimum) {
    std::mt19937 gen(17);
    int cases = 0;
    for (std::size_t distinct = 2; distinct <= 12; ++distinct) {
        for (int rep = 0; rep < 40; ++rep) {
            std::vector<float> pool(distinct);
            std::uniform_real_distribution<float> value(-1.0f, 1.0f);
            for (auto& p : pool) p = value(gen);
            std::sort(pool.begin(), pool.end());
            pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            std::vector<float> map(5 * 5);
            for (std::size_t i = 0; i < pool.size(); ++i) map[i] = pool[i];  // every pool value appears
            for (std::size_t i = pool.size(); i < map.size(); ++i) map[i] = pool[pick(gen)];
            std::shuffle(map.begin(), map.end(), gen);

            const auto mask = values(kmeans2_mask(Tensor({5, 5}, map)).values);
            const auto best = oracle::exhaustive_two_means(oracle::Vec(map.begin(), map.end()));
            EXPECT_NEAR(partition_sse(map, mask), best.sse, 1e-9 * (1.0 + best.sse));
            // Same labelling as the oracle, foreground the higher cluster.
            for (std::size_t i = 0; i < map.size(); ++i) {
                const auto at = std::lower_bound(best.distinct.begin(), best.distinct.end(), double(map[i]));
                EXPECT_EQ(mask[i] == 1.0f, bool(best.foreground[std::size_t(at - best.distinct.begin())]));
            }
            ++cases;
        }
    }
    EXPECT_EQ(cases, 11 * 40);
}

TEST(Masks, TranslatingContentAndBoxTogetherTranslatesTheMask) {
    // Features on a 16x16 grid are a function of position relative to a bump centre.
    auto features = [](const std::vector<std::pair<double, double>>& centres) {
        const std::size_t f = centres.size(), m = 3, n = 16;
        std::vector<float> v(f * m * n * n);
        for (std::size_t j = 0; j < f; ++j)
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const double dx = double(x) - centres[j].first, dy = double(y) - centres[j].second;
                    const double bump = std::exp(-(dx * dx + dy * dy) / 4.0);
                    v[((j * m + 0) * n + y) * n + x] = float(bump);
                    v[((j * m + 1) * n + y) * n + x] = float(0.2 + 0.1 * std::cos(dx) * std::sin(dy));
                    v[((j * m + 2) * n + y) * n + x] = float(0.3 * dx / 8.0);
                }
        return Tensor({f, m, n, n}, std::move(v));
    };
    const auto ctx = context({{1, 1, 8, 8}, {5, 4, 12, 11}, {8, 7, 15, 14}}, 16);
    const Tensor reduced = features({{4.0, 4.0}, {8.0, 7.0}, {11.0, 10.0}});
    const SiteRegions r = build_regions(reduced, ctx, MaskMode::Semantic);
    const auto first = values(r.masks[0][0]);
    EXPECT_GT(std::count(first.begin(), first.end(), 1.0f), 0);
    EXPECT_LT(std::count(first.begin(), first.end(), 1.0f), long(first.size()));
    EXPECT_TRUE(bitwise_equal(r.masks[0][1], r.masks[0][0]));
    EXPECT_TRUE(bitwise_equal(r.masks[0][2], r.masks[0][0]));

    // Static mode reuses the first-frame mask; no-mask mode is all ones.
    const SiteRegions s = build_regions(features({{4.0, 4.0}, {3.0, 9.0}, {11.0, 10.0}}), ctx, MaskMode::Static);
    EXPECT_TRUE(bitwise_equal(s.masks[0][1], s.masks[0][0]));
    const SiteRegions none = build_regions(reduced, ctx, MaskMode::None);
    for (const auto& m : none.masks[0]) EXPECT_EQ(values(m), std::vector<float>(m.numel(), 1.0f));
}

// ---------------------------------------------------------------------------
// Alignment loss

TEST(AlignmentLoss, HandDifferentiatedExample) {
    // Frame 1 crop [1, 0], frame 2 crop [0, 0], one channel, all-ones masks.
    SiteRegions r;
    r.boxes = {{GridBox{0, 0, 2, 1}, GridBox{0, 0, 2, 1}}};
    r.masks = {{Tensor({1, 2}, 1.0f), Tensor({1, 2}, 1.0f)}};
    Tape<float> tape;
    Tensor x({2, 1, 1, 2}, std::vector<float>{1, 0, 0, 0});
    ActiveTape<float> active(tape);
    x.set_requires_grad(true);
    const Tensor loss = alignment_loss(x, r);
    EXPECT_FLOAT_EQ(loss.item(), 1.0f);
    backward(loss);
    const Tensor g = x.grad();
    EXPECT_EQ(values(g), (std::vector<float>{0, 0, -2, 0}));
}

TEST(AlignmentLoss, ZeroOnIdenticalCropsAndDisjointMasks) {
    const Tensor frame = fixture::noise({1, 3, 6, 6}, 1);
    const Tensor twin = concat<float>({frame, frame}, 0);
    SiteRegions same;
    same.boxes = {{GridBox{1, 1, 4, 5}, GridBox{1, 1, 4, 5}}};
    same.masks = {{Tensor({4, 3}, 1.0f), Tensor({4, 3}, 1.0f)}};
    EXPECT_EQ(alignment_loss(twin, same).item(), 0.0f);

    SiteRegions disjoint;
    disjoint.boxes = {{GridBox{0, 0, 2, 1}, GridBox{3, 2, 5, 3}}};
    disjoint.masks = {{Tensor({1, 2}, std::vector<float>{1, 0}), Tensor({1, 2}, std::vector<float>{0, 1})}};
    std::vector<AlignmentTerm> terms;
    const Tensor different = concat<float>({frame, fixture::noise({1, 3, 6, 6}, 2)}, 0);
    EXPECT_EQ(alignment_loss(different, disjoint, &terms).item(), 0.0f);
    ASSERT_EQ(terms.size(), 1u);
    EXPECT_TRUE(terms[0].empty_overlap);
}

TEST(AlignmentLoss, ZeroExactlyWhenMaskedDifferenceVanishes) {
    // Crops differ only where the overlap mask is zero, then inside it.
    std::vector<float> v{0, 0, 0, 0, 0, 0, 0, 0};
    SiteRegions r;
    r.boxes = {{GridBox{0, 0, 4, 1}, GridBox{0, 0, 4, 1}}};
    r.masks = {{Tensor({1, 4}, std::vector<float>{1, 1, 0, 1}), Tensor({1, 4}, std::vector<float>{1, 0, 1, 1})}};
    // The overlap is {1, 0, 0, 1}; positions 1 and 2 are outside it.
    v[4 + 1] = 3.0f;
    v[4 + 2] = -2.0f;
    EXPECT_EQ(alignment_loss(Tensor({2, 1, 1, 4}, v), r).item(), 0.0f);
    v[4 + 3] = 0.5f;
    EXPECT_FLOAT_EQ(alignment_loss(Tensor({2, 1, 1, 4}, v), r).item(), 0.25f);
}

TEST(AlignmentLoss, ResamplesFrameCropOntoFirstBoxShape) {
    // A constant frame-2 crop of a different size resamples to the same constant.
    std::vector<float> v(2 * 8 * 8, 0.0f);
    for (std::size_t i = 64; i < 128; ++i) v[i] = 2.0f;
    SiteRegions r;
    r.boxes = {{GridBox{0, 0, 2, 2}, GridBox{2, 2, 7, 6}}};
    r.masks = {{Tensor({2, 2}, 1.0f), Tensor({4, 5}, 1.0f)}};
    EXPECT_FLOAT_EQ(alignment_loss(Tensor({2, 1, 8, 8}, v), r).item(), 16.0f);
    r.masks[0][1] = Tensor({2, 2}, 1.0f);
    EXPECT_THROW(alignment_loss(Tensor({2, 1, 8, 8}, v), r), ShapeError);
}

// ---------------------------------------------------------------------------
// Latent optimization on the small backbone

struct OptimizerTest : ::testing::Test {
    BackboneConfig cfg = fixture::small_config(8);
    Backbone<float> bb = build_backbone(cfg);
    Tensor cond = fixture::noise({4, 16}, 2, "cond");
    OptimizerConfig opt;
    // Image of 64 px onto the 8x8 latent; boxes move right by 16 px.
    TrajectoryContext ctx = [] {
        auto c = context({{8, 8, 40, 40}, {24, 8, 56, 40}}, 64, 4);
        c.spec.pca_dim = 8;
        return c;
    }();

    template <typename T>
    FeatureFn<T> features(const Backbone<T>& model, int t, bool temporal = true) const {
        const auto sites = opt.feature_sites();
        const BasicTensor<T> c = cond.cast<T>();
        return [&model, sites, c, t, temporal](const BasicTensor<T>& input) {
            ForwardOptions<T> o;
            o.taps.insert(sites.begin(), sites.end());
            o.kv_propagate = true;
            o.disable_temporal = !temporal;
            const auto r = model.forward(input, t, c, o);
            std::map<TapAddress, BasicTensor<T>> out;
            for (const auto& s : sites) {
                const auto [h, w] = model.site_grid(s);
                out.emplace(s, spatial_from_tokens(r.bundle.at(s), h, w));
            }
            return out;
        };
    }
};

TEST_F(OptimizerTest, FirstFrameNeverMoves) {
    const Tensor z = fixture::noise({2, 4, 8, 8}, 3);
    const auto r = optimize_latent(z, features(bb, 600), ctx, opt);
    ASSERT_EQ(r.losses.size(), 6u);
    EXPECT_FALSE(r.diverged);
    EXPECT_TRUE(bitwise_equal(slice(r.latent, 0, 0, 1), slice(z, 0, 0, 1)));
    EXPECT_FALSE(bitwise_equal(slice(r.latent, 0, 1, 2), slice(z, 0, 1, 2)));
    EXPECT_LT(r.losses.back(), r.losses.front());
    EXPECT_EQ(r.regions.size(), 2u);
}

TEST_F(OptimizerTest, FirstFrameGradientSliceIsExactlyZero) {
    // The optimizer's input construction, differentiated directly.
    const Tensor z = fixture::noise({2, 4, 8, 8}, 3);
    const auto feats = features(bb, 600)(z);
    std::map<TapAddress, PcaBasis> bases;
    std::map<TapAddress, SiteRegions> regions;
    for (const auto& [site, x] : feats) {
        bases.emplace(site, fit_pca(x, 8));
        regions.emplace(site, build_regions(pca_project(x, bases.at(site)), ctx, MaskMode::Semantic));
    }
    Tape<float> tape;
    ActiveTape<float> active(tape);
    Tensor leaf = z.clone();
    leaf.set_requires_grad(true);
    const Tensor input = concat<float>({stop_gradient(slice(leaf, 0, 0, 1)), slice(leaf, 0, 1, 2)}, 0);
    std::optional<Tensor> loss;
    for (const auto& [site, x] : features(bb, 600)(input)) {
        const Tensor term = alignment_loss(pca_project(x, bases.at(site)), regions.at(site));
        loss = loss ? add(*loss, term) : term;
    }
    backward(*loss);
    const Tensor g = leaf.grad();
    const Tensor g1 = slice(g, 0, 0, 1), g2 = slice(g, 0, 1, 2);
    for (float v : g1.data()) ASSERT_EQ(v, 0.0f);
    EXPECT_GT(std::abs(g2.data()[0]) + std::abs(g2.data()[100]), 0.0f);
}

TEST_F(OptimizerTest, AlignedStartBarelyMoves) {
    const Tensor one = fixture::noise({1, 4, 8, 8}, 4);
    const Tensor z = concat<float>({one, one}, 0);
    TrajectoryContext still = ctx;
    still.spec.groups[0].boxes[1] = still.spec.groups[0].boxes[0];
    const auto r = optimize_latent(z, features(bb, 600), still, opt);
    EXPECT_LT(r.losses.front(), 1e-8);
    double norm = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) norm += std::pow(double(r.latent.data()[i]) - z.data()[i], 2);
    EXPECT_LT(std::sqrt(norm), 1e-3);
}

TEST_F(OptimizerTest, LatentGradientMatchesFiniteDifferences) {
    const Backbone<double> bd = bb.cast<double>();
    const TensorD z = fixture::noise_d({2, 4, 8, 8}, 5);
    const auto feats = features(bd, 500, false);
    std::map<TapAddress, PcaBasis> bases;
    std::map<TapAddress, SiteRegions> regions;
    for (const auto& [site, x] : feats(z)) {
        bases.emplace(site, fit_pca(x.cast<float>(), 8));
        regions.emplace(site, build_regions(pca_project(x.cast<float>(), bases.at(site)), ctx, MaskMode::Semantic));
    }
    auto loss = [&](const TensorD& latent) {
        std::optional<TensorD> total;
        for (const auto& [site, x] : feats(latent)) {
            const TensorD term = alignment_loss(pca_project(x, bases.at(site)), regions.at(site));
            total = total ? add(*total, term) : term;
        }
        return *total;
    };
    Tape<double> tape;
    TensorD leaf = z.clone();
    {
        ActiveTape<double> active(tape);
        leaf.set_requires_grad(true);
        backward(loss(leaf));
    }
    const TensorD g = leaf.grad();
    for (std::uint32_t dir = 0; dir < 3; ++dir) {
        auto v = oracle::random_vec(z.numel(), 40 + dir);
        std::fill(v.begin(), v.begin() + long(z.numel() / 2), 0.0);  // frames 2..f only
        double analytic = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) analytic += g.data()[i] * v[i];
        const TensorD step(z.shape(), v);
        const double h = 1e-5;
        const double numeric = (loss(add(z, scale(step, h))).item() - loss(sub(z, scale(step, h))).item()) / (2 * h);
        EXPECT_LT(std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)), 1e-4);
    }
}

TEST_F(OptimizerTest, StateCarriesFrozenBasisAndStaticRegions) {
    const Tensor z = fixture::noise({2, 4, 8, 8}, 6);
    OptimizerConfig frozen = opt;
    frozen.freeze_basis = true;
    frozen.mask_mode = MaskMode::Static;
    frozen.inner_iters = 1;
    OptimizerState state;
    const auto first = optimize_latent(z, features(bb, 600), ctx, frozen, &state);
    EXPECT_EQ(state.frozen_basis.size(), 2u);
    EXPECT_EQ(state.static_regions.size(), 2u);
    const auto second = optimize_latent(fixture::noise({2, 4, 8, 8}, 7), features(bb, 300), ctx, frozen, &state);
    for (const auto& [site, regions] : second.regions) {
        for (std::size_t j = 0; j < 2; ++j) EXPECT_TRUE(bitwise_equal(regions.masks[0][j], first.regions.at(site).masks[0][j]));
    }
}

TEST_F(OptimizerTest, NonFiniteLossStopsAndKeepsLastFiniteLatent) {
    const Tensor z = fixture::noise({2, 4, 8, 8}, 8);
    const auto base = features(bb, 600);
    int calls = 0;
    FeatureFn<float> poisoned = [&](const Tensor& input) {
        auto out = base(input);
        if (++calls == 3) {
            for (auto& [site, x] : out) x = scale(x, std::numeric_limits<double>::infinity());
        }
        return out;
    };
    const auto r = optimize_latent(z, poisoned, ctx, opt);
    EXPECT_TRUE(r.diverged);
    EXPECT_EQ(r.losses.size(), 2u);
    for (float v : r.latent.data()) ASSERT_TRUE(std::isfinite(v));
    OptimizerConfig bad = opt;
    bad.lr = 0.0;
    EXPECT_THROW(optimize_latent(z, base, ctx, bad), InputError);
}

TEST(OptimizerConfig, FeatureSitesFollowTheFeatureKind) {
    OptimizerConfig c;
    EXPECT_EQ(c.feature_sites(), (std::vector<TapAddress>{parse_tap_address("up.1.q.1"), parse_tap_address("up.2.q.0")}));
    c.feature = FeatureKind::Residual;
    EXPECT_EQ(c.feature_sites(),
              (std::vector<TapAddress>{parse_tap_address("up.1.res.1"), parse_tap_address("up.2.res.0")}));
    EXPECT_EQ(c.inner_iters, 5);
    EXPECT_DOUBLE_EQ(c.lr, 0.01);
    EXPECT_STREQ(to_string(MaskMode::Static), "static");
    EXPECT_STREQ(to_string(FeatureKind::Residual), "residual");
}
