#include <benchmark/benchmark.h>

#include "anyi2v/backbone.hpp"
#include "anyi2v/injection.hpp"
#include "anyi2v/pipeline.hpp"
#include "anyi2v/scheduler.hpp"
#include "anyi2v/traj_control.hpp"
#include "fixtures.hpp"

using namespace anyi2v;

namespace {

const Backbone<float>& default_backbone() {
    static const Backbone<float> bb = build_backbone(BackboneConfig{});
    return bb;
}

void BM_BackboneForward(benchmark::State& state) {
    const auto& bb = default_backbone();
    const Tensor z = fixture::noise({4, 4, 16, 16}, 1);
    const Tensor cond = seeded_embedding(7, 4, 16);
    for (auto _ : state) benchmark::DoNotOptimize(bb.forward(z, 500, cond).eps);
}
BENCHMARK(BM_BackboneForward)->Unit(benchmark::kMillisecond);

void BM_BackboneForwardBackward(benchmark::State& state) {
    const auto& bb = default_backbone();
    const Tensor z = fixture::noise({4, 4, 16, 16}, 1);
    const Tensor cond = seeded_embedding(7, 4, 16);
    for (auto _ : state) {
        Tape<float> tape;
        ActiveTape<float> active(tape);
        Tensor leaf = z.clone();
        leaf.set_requires_grad(true);
        backward(sum(bb.forward(leaf, 500, cond).eps));
        benchmark::DoNotOptimize(leaf.grad());
    }
}
BENCHMARK(BM_BackboneForwardBackward)->Unit(benchmark::kMillisecond);

void BM_AdainPatch(benchmark::State& state) {
    const std::size_t side = static_cast<std::size_t>(state.range(0));
    const Tensor content = fixture::noise({1, 64, side, side}, 2);
    const Tensor source = fixture::noise({1, 64, side, side}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(adain_patch(content, source, 4));
}
BENCHMARK(BM_AdainPatch)->Arg(8)->Arg(16)->Arg(32);

void BM_FitPca(benchmark::State& state) {
    const std::size_t m = static_cast<std::size_t>(state.range(0));
    const Tensor features = fixture::noise({4, 128, 8, 8}, 4);
    for (auto _ : state) benchmark::DoNotOptimize(fit_pca(features, m));
}
BENCHMARK(BM_FitPca)->Arg(4)->Arg(64);

void BM_Kmeans2(benchmark::State& state) {
    const std::size_t side = static_cast<std::size_t>(state.range(0));
    const Tensor map = fixture::noise({side, side}, 5);
    for (auto _ : state) benchmark::DoNotOptimize(kmeans2_mask(map));
}
BENCHMARK(BM_Kmeans2)->Arg(8)->Arg(32)->Arg(64);

void BM_DdimInversion(benchmark::State& state) {
    const auto& bb = default_backbone();
    const Tensor z0 = fixture::noise({1, 4, 16, 16}, 6);
    const Tensor cond = seeded_embedding(7, 4, 16);
    InversionOptions o;
    o.steps = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(ddim_invert(Schedule::linear(), z0, bb, cond, {}, o));
}
BENCHMARK(BM_DdimInversion)->Arg(10)->Arg(25)->Unit(benchmark::kMillisecond);

void BM_OptimizeLatent(benchmark::State& state) {
    const auto& bb = default_backbone();
    const Tensor cond = seeded_embedding(7, 4, 16);
    const fixture::MovingBump bump;
    TrajectoryContext ctx;
    ctx.spec = bump.spec();
    ctx.image_height = ctx.image_width = fixture::MovingBump::kSize;
    const OptimizerConfig config;
    const auto sites = config.feature_sites();
    FeatureFn<float> features = [&](const Tensor& input) {
        ForwardOptions<float> o;
        o.taps.insert(sites.begin(), sites.end());
        const auto r = bb.forward(input, 961, cond, o);
        std::map<TapAddress, Tensor> out;
        for (const auto& a : sites) {
            const auto [h, w] = bb.site_grid(a);
            out.emplace(a, spatial_from_tokens(r.bundle.at(a), h, w));
        }
        return out;
    };
    const Tensor z = fixture::noise({4, 4, 16, 16}, 8);
    for (auto _ : state) benchmark::DoNotOptimize(optimize_latent(z, features, ctx, config).latent);
}
BENCHMARK(BM_OptimizeLatent)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
