#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "anyi2v/random.hpp"
#include "anyi2v/rtd.hpp"
#include "anyi2v/tensor.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace anyi2v;

namespace {

std::vector<double> values(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

TensorD random_tensor(const Shape& s, std::uint32_t seed) { return TensorD(s, oracle::random_vec(numel(s), seed)); }

}  // namespace

TEST(TensorGrad, EveryRegisteredOpMatchesCentralDifferences) {
    for (const auto& op : gradcheck::registered_ops()) {
        for (std::uint32_t seed : {1u, 2u}) {
            const auto r = gradcheck::check(op, seed);
            EXPECT_LT(r.rel_error, 1e-4) << op.name << " seed " << seed;
            EXPECT_GT(r.coordinates, 0u);
        }
    }
}

TEST(TensorGrad, HandDerivedSquaredNormGradient) {
    // d/dx sum((x - c)^2) = 2 (x - c)
    Tape<double> tape;
    ActiveTape<double> active(tape);
    TensorD x({2}, {0.0, 0.0});
    x.set_requires_grad(true);
    const TensorD c({2}, {1.0, 0.0});
    backward(sum(square(sub(x, c))));
    EXPECT_EQ(values(x.grad()), (std::vector<double>{-2.0, 0.0}));
}

TEST(TensorGrad, GradientsAccumulateOverReuse) {
    Tape<double> tape;
    ActiveTape<double> active(tape);
    TensorD x({3}, {1.0, 2.0, 3.0});
    x.set_requires_grad(true);
    backward(sum(add(mul(x, x), x)));  // d = 2x + 1
    EXPECT_EQ(values(x.grad()), (std::vector<double>{3.0, 5.0, 7.0}));
}

TEST(TensorGrad, StopGradientBlocksFlow) {
    Tape<double> tape;
    ActiveTape<double> active(tape);
    TensorD x({2}, {1.0, -1.0});
    x.set_requires_grad(true);
    const TensorD blocked = sum(mul(stop_gradient(x), TensorD({2}, {3.0, 4.0})));
    EXPECT_FALSE(blocked.requires_grad());
    backward(add(blocked, sum(x)));
    EXPECT_EQ(values(x.grad()), (std::vector<double>{1.0, 1.0}));
}

TEST(TensorGrad, NoTapeMeansNoRecording) {
    TensorD x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    const TensorD y = square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(backward(sum(y)), Error);
}

TEST(TensorGrad, RecordedTensorsRefuseMutation) {
    Tape<double> tape;
    ActiveTape<double> active(tape);
    TensorD x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    TensorD y = square(x);
    EXPECT_THROW(y.mutable_data(), Error);
}

TEST(TensorOps, BroadcastingMatchesLoopOracle) {
    const std::vector<std::pair<Shape, Shape>> cases{
        {{2, 3, 4}, {4}}, {{2, 3, 4}, {3, 1}}, {{2, 3, 4}, {1, 3, 4}}, {{2, 3, 4}, {2, 1, 1}}, {{5}, {1}}, {{3, 2}, {3, 2}}};
    const std::vector<std::pair<BinaryOp, std::function<double(double, double)>>> ops{
        {BinaryOp::Add, std::plus<>()},
        {BinaryOp::Sub, std::minus<>()},
        {BinaryOp::Mul, std::multiplies<>()},
        {BinaryOp::Div, std::divides<>()}};
    std::uint32_t seed = 10;
    for (const auto& [sa, sb] : cases) {
        const auto a = oracle::random_vec(numel(sa), ++seed);
        const auto b = oracle::random_vec(numel(sb), ++seed, 0.5, 2.0);
        for (const auto& [op, ref] : ops) {
            const auto got = values(elementwise(op, TensorD(sa, a), TensorD(sb, b)));
            const auto want = oracle::broadcast_binary(a, sa, b, sb, ref);
            ASSERT_EQ(got.size(), want.size());
            for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
        }
    }
}

TEST(TensorOps, IncompatibleBroadcastIsAShapeError) {
    EXPECT_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({2})), ShapeError);
    EXPECT_THROW(add(TensorD::zeros({3}), TensorD::zeros({2, 3})), ShapeError);
}

TEST(TensorOps, MatmulMatchesNaiveLoops) {
    const auto a = random_tensor({2, 3, 4}, 3), b = random_tensor({2, 4, 5}, 4), shared = random_tensor({4, 5}, 5);
    const auto av = values(a), bv = values(b);
    const auto batched = values(matmul(a, b));
    const auto with_shared = values(matmul(a, shared));
    for (std::size_t n = 0; n < 2; ++n) {
        const std::vector<double> an(av.begin() + n * 12, av.begin() + (n + 1) * 12);
        const std::vector<double> bn(bv.begin() + n * 20, bv.begin() + (n + 1) * 20);
        const auto want = oracle::matmul(an, bn, 3, 4, 5);
        const auto want_shared = oracle::matmul(an, values(shared), 3, 4, 5);
        for (std::size_t i = 0; i < 15; ++i) {
            EXPECT_NEAR(batched[n * 15 + i], want[i], 1e-12);
            EXPECT_NEAR(with_shared[n * 15 + i], want_shared[i], 1e-12);
        }
    }
    EXPECT_THROW(matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3})), ShapeError);
}

TEST(TensorOps, ConvolutionMatchesNaiveLoops) {
    const auto x = random_tensor({2, 3, 5, 6}, 7), w = random_tensor({4, 3, 3, 3}, 8), bias = random_tensor({4}, 9);
    const auto got = values(conv2d(x, w, bias));
    const auto want = oracle::conv2d(values(x), values(w), values(bias), 2, 3, 5, 6, 4, 3);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(TensorOps, SoftmaxIsANormalizedExponential) {
    const auto x = random_tensor({3, 4}, 11);
    const auto y = values(softmax(x, 1));
    const auto xv = values(x);
    for (std::size_t r = 0; r < 3; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < 4; ++c) denom += std::exp(xv[r * 4 + c]);
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[r * 4 + c], std::exp(xv[r * 4 + c]) / denom, 1e-14);
    }
}

TEST(TensorOps, LayoutOpsMoveValuesWhereExpected) {
    const TensorD x({2, 3}, {0, 1, 2, 3, 4, 5});
    EXPECT_EQ(values(permute(x, {1, 0})), (std::vector<double>{0, 3, 1, 4, 2, 5}));
    EXPECT_EQ(values(slice(x, 1, 1, 3)), (std::vector<double>{1, 2, 4, 5}));
    EXPECT_EQ(values(concat<double>({x, TensorD({2, 1}, {9, 8})}, 1)), (std::vector<double>{0, 1, 2, 9, 3, 4, 5, 8}));
    EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
    EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
    EXPECT_THROW(slice(x, 1, 2, 4), ShapeError);
    EXPECT_THROW(permute(x, {0, 0}), ShapeError);
}

TEST(TensorOps, PoolAndUpsample) {
    const TensorD x({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    EXPECT_EQ(values(avg_pool2(x)), (std::vector<double>{3.5, 5.5}));
    const TensorD y({1, 1, 1, 2}, {1, 2});
    EXPECT_EQ(values(upsample2(y)), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
    EXPECT_THROW(avg_pool2(TensorD::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(TensorOps, GroupNormStandardizesEachGroup) {
    const auto x = random_tensor({2, 4, 3, 3}, 13);
    const auto y = values(group_norm(x, 2));
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t g = 0; g < 2; ++g) {
            const std::vector<double> part(y.begin() + (n * 4 + g * 2) * 9, y.begin() + (n * 4 + g * 2 + 2) * 9);
            const auto [mean, sd] = oracle::moments(part);
            EXPECT_NEAR(mean, 0.0, 1e-12);
            EXPECT_NEAR(sd, 1.0, 1e-3);
        }
    }
}

TEST(TensorOps, MeanAlongKeepsTheAxis) {
    const TensorD x({2, 3}, {1, 2, 3, 4, 5, 6});
    const auto m = mean_along(x, 1);
    EXPECT_EQ(m.shape(), (Shape{2, 1}));
    EXPECT_EQ(values(m), (std::vector<double>{2, 5}));
}

TEST(TensorOps, SquareRootAndClamp) {
    EXPECT_THROW(square_root(TensorD({1}, {-1.0})), NumericError);
    EXPECT_EQ(values(clamp_min(TensorD({3}, {-1.0, 0.5, 2.0}), 0.25)), (std::vector<double>{0.25, 0.5, 2.0}));
    Tape<double> tape;
    ActiveTape<double> active(tape);
    TensorD x({1}, {0.0});
    x.set_requires_grad(true);
    backward(sum(square_root(x)));
    EXPECT_EQ(x.grad().item(), 0.0);
}

TEST(TensorOps, FiniteChecksCatchNonFiniteValues) {
    const bool before = finite_checks_enabled();
    set_finite_checks(true);
    EXPECT_THROW(div(TensorD({1}, {1.0}), TensorD({1}, {0.0})), NumericError);
    set_finite_checks(false);
    EXPECT_NO_THROW(div(TensorD({1}, {1.0}), TensorD({1}, {0.0})));
    set_finite_checks(before);
}

TEST(TensorOps, FloatKernelsAccumulateInDouble) {
    // 1e8 + many small terms is lost in float accumulation but kept in double.
    std::vector<float> a(1001, 1.0f), b(1001, 1.0f);
    a[0] = 1e8f;
    const Tensor r = matmul(Tensor({1, 1001}, a), Tensor({1001, 1}, b));
    EXPECT_EQ(double(r.item()), double(float(1e8 + 1000.0)));
}

TEST(Random, CounterStreamsAreOrderFreeAndSeparated) {
    const CounterRng a(5, "noise"), b(5, "noise"), c(5, "weights/x"), d(6, "noise");
    EXPECT_EQ(a.bits(17), b.bits(17));
    EXPECT_NE(a.bits(17), c.bits(17));
    EXPECT_NE(a.bits(17), d.bits(17));
    const auto many = a.normals(20000);
    const std::vector<double> v(many.begin(), many.end());
    const auto [mean, sd] = oracle::moments(v);
    EXPECT_NEAR(mean, 0.0, 0.03);
    EXPECT_NEAR(sd, 1.0, 0.03);
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(many[i], float(a.normal(i)));
}

TEST(Rtd, RoundTripAndErrors) {
    const Tensor t({2, 3}, {1.5f, -2.0f, 0.0f, 3.25f, 1e-7f, -8.0f});
    std::stringstream ss;
    rtd::write(ss, t);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 8), "RTDUMP01");
    EXPECT_EQ(bytes.size(), 8u + 4u + 8u + 24u);
    std::stringstream in(bytes);
    const Tensor back = rtd::read(in);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), t.data().begin()));

    std::stringstream bad("RTDUMP02xxxxxxxx");
    EXPECT_THROW(rtd::read(bad), InputError);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(rtd::read(truncated), InputError);
}
