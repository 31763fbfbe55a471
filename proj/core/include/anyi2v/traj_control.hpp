#pragma once

// Trajectory control: PCA-reduced feature alignment between the first frame
// and later frames inside user boxes, under masks obtained by clustering
// cosine-similarity maps around salient points.
//
// Feature maps here are spatial: [frames, channels, H, W]. Query taps come in
// token layout [frames, H*W, C]; `spatial_from_tokens` converts them.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "anyi2v/backbone.hpp"
#include "anyi2v/tensor.hpp"

namespace anyi2v {

/// Pixel box, half-open: columns [x0, x1), rows [y0, y1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const Box&) const = default;
};

struct BoxGroup {
    std::vector<Box> boxes;  // one per frame
    int salient_k = 9;
};

struct TrajectorySpec {
    std::vector<BoxGroup> groups;
    int pca_dim = 64;

    /// Boxes inside a width x height image, one per frame, k >= 1, M >= 1.
    void validate(std::size_t frames, std::size_t image_height, std::size_t image_width) const;

    static TrajectorySpec from_json(std::string_view text);
    static TrajectorySpec load(const std::filesystem::path& path);
    std::string to_json() const;
};

/// Box on a feature grid, half-open, never empty.
struct GridBox {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    std::size_t width() const { return x1 - x0; }
    std::size_t height() const { return y1 - y0; }
    bool operator==(const GridBox&) const = default;
};

struct GridPoint {
    std::size_t row = 0, col = 0;
    bool operator==(const GridPoint&) const = default;
};

/// Scales a pixel box onto a grid: low edges floored, high edges ceiled,
/// clamped to the grid.
GridBox map_box_to_grid(const Box& box, std::size_t image_height, std::size_t image_width, std::size_t grid_height,
                        std::size_t grid_width);

/// Principal directions of a token set.
struct PcaBasis {
    Tensor basis;                            // [M, C]; rows past `rank` are zero
    Tensor mean;                             // [C]
    std::vector<double> explained_variance;  // length M, non-increasing
    std::size_t rank = 0;
};

/// Fits the top-M principal directions of the token covariance of
/// features [f, C, H, W], jointly over every frame and position. Each basis
/// vector has its largest-magnitude entry positive. When fewer than M
/// directions carry variance the remaining rows are zero and a warning is
/// appended.
PcaBasis fit_pca(const Tensor& features, std::size_t components, std::vector<std::string>* warnings = nullptr);

/// Projects centered features [f, C, H, W] onto the basis: [f, M, H, W].
template <typename T>
BasicTensor<T> pca_project(const BasicTensor<T>& features, const PcaBasis& basis);

/// [f, H*W, C] -> [f, C, H, W].
template <typename T>
BasicTensor<T> spatial_from_tokens(const BasicTensor<T>& tokens, std::size_t height, std::size_t width);

/// Uniform ceil(sqrt(K)) x ceil(sqrt(K)) lattice inside the box, row-major,
/// truncated to K. K larger than the cell count is reduced with a warning.
std::vector<GridPoint> select_salient_points(const GridBox& box, int k, std::vector<std::string>* warnings = nullptr);

/// Cosine similarity between the frame-1 feature at `point` and every cell of
/// `box` in `frame_features`. Features are [M, H, W]; the result is [h, w].
Tensor similarity_map(const Tensor& frame_features, const GridBox& box, const Tensor& first_features,
                      const GridPoint& point);

/// Pointwise maximum over equally shaped maps.
Tensor aggregate_similarity(const std::vector<Tensor>& maps);

struct BinaryMask {
    Tensor values;  // {0, 1}
    bool degenerate = false;  // flat input; every cell foreground
};

/// Optimal two-cluster split of the map's values (minimum within-cluster sum
/// of squares); the cluster with the larger center is foreground.
BinaryMask kmeans2_mask(const Tensor& map);

/// Resamples a [C, h, w] map to [C, out_h, out_w] with half-pixel bilinear
/// interpolation (differentiable in the input).
template <typename T>
BasicTensor<T> resample_bilinear(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);
/// Nearest-neighbour resampling of an [h, w] mask.
Tensor resample_nearest(const Tensor& mask, std::size_t out_h, std::size_t out_w);

/// Per (group, frame) contribution to the alignment loss.
struct AlignmentTerm {
    std::size_t group = 0;
    std::size_t frame = 0;
    double loss = 0.0;
    bool empty_overlap = false;
};

/// Grid boxes and masks of one feature site: boxes[i][j] and masks[i][j] for
/// group i and frame j (masks shaped like their boxes).
struct SiteRegions {
    std::vector<std::vector<GridBox>> boxes;
    std::vector<std::vector<Tensor>> masks;
};

/// sum over groups i and frames j >= 2 of
///   || M_1 * R(M_j) * (R(F_j[B_j]) - SG(F_1[B_1])) ||^2
/// with R resampling onto the frame-1 box shape. `features` is [f, M, H, W].
template <typename T>
BasicTensor<T> alignment_loss(const BasicTensor<T>& features, const SiteRegions& regions,
                              std::vector<AlignmentTerm>* terms = nullptr);

enum class MaskMode { Semantic, Static, None };
enum class FeatureKind { Query, Residual };

const char* to_string(MaskMode mode);
const char* to_string(FeatureKind kind);

struct OptimizerConfig {
    std::vector<TapAddress> sites{parse_tap_address("up.1.q.1"), parse_tap_address("up.2.q.0")};
    FeatureKind feature = FeatureKind::Query;
    MaskMode mask_mode = MaskMode::Semantic;
    bool freeze_basis = false;
    int inner_iters = 5;
    double lr = 0.01;

    /// Feature taps the optimizer reads (query sites, or the residual site of
    /// the same block and layer).
    std::vector<TapAddress> feature_sites() const;
};

/// Spatial features [f, C, H, W] at every optimizer site for a model input.
template <typename T>
using FeatureFn = std::function<std::map<TapAddress, BasicTensor<T>>(const BasicTensor<T>& model_input)>;

/// Carried across firings of one run.
struct OptimizerState {
    std::map<TapAddress, PcaBasis> frozen_basis;
    std::map<TapAddress, SiteRegions> static_regions;
};

template <typename T>
struct OptimizeResult {
    BasicTensor<T> latent;
    std::vector<double> losses;  // inner_iters + 1 values, the last after the final update
    bool diverged = false;
    std::vector<AlignmentTerm> terms;  // at the first evaluation
    std::map<TapAddress, SiteRegions> regions;
    std::vector<std::string> warnings;
};

/// Context shared by every firing.
struct TrajectoryContext {
    TrajectorySpec spec;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
};

/// Masks and boxes for one site from current features [f, M, H, W].
SiteRegions build_regions(const Tensor& reduced, const TrajectoryContext& ctx, MaskMode mode,
                          std::vector<std::string>* warnings = nullptr);

/// Gradient descent on the alignment loss with respect to frames 2..f of z.
/// The model sees concat(SG(z[frame 1]), z[frames 2..f]), so frame 1 never
/// moves. PCA bases and masks are fixed for the duration of one call.
template <typename T>
OptimizeResult<T> optimize_latent(const BasicTensor<T>& z, const FeatureFn<T>& features, const TrajectoryContext& ctx,
                                  const OptimizerConfig& config, OptimizerState* state = nullptr);

/// Full-frame mask of group `group` in frame `frame`, from reduced features
/// [f, M, H, W] and the frame-1 salient points of the group.
BinaryMask frame_mask(const Tensor& reduced, const TrajectoryContext& ctx, std::size_t group, std::size_t frame);

}  // namespace anyi2v
