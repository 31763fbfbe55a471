#include "anyi2v/traj_control.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <nlohmann/json.hpp>
#include <sstream>

namespace anyi2v {

// ---------------------------------------------------------------------------
// Trajectory specification

void TrajectorySpec::validate(std::size_t frames, std::size_t image_height, std::size_t image_width) const {
    if (pca_dim < 1) throw InputError("pca_dim must be >= 1");
    if (groups.empty()) throw InputError("trajectory has no box groups");
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto& g = groups[i];
        const std::string where = "group " + std::to_string(i);
        if (g.salient_k < 1) throw InputError(where + ": salient_k must be >= 1");
        if (g.boxes.size() != frames) {
            throw InputError(where + " has " + std::to_string(g.boxes.size()) + " boxes for " +
                             std::to_string(frames) + " frames");
        }
        for (std::size_t j = 0; j < g.boxes.size(); ++j) {
            const Box& b = g.boxes[j];
            if (b.x0 < 0 || b.y0 < 0 || b.x1 <= b.x0 || b.y1 <= b.y0 || std::size_t(b.x1) > image_width ||
                std::size_t(b.y1) > image_height) {
                throw InputError(where + ", frame " + std::to_string(j + 1) + ": box (" + std::to_string(b.x0) +
                                 "," + std::to_string(b.y0) + "," + std::to_string(b.x1) + "," +
                                 std::to_string(b.y1) + ") is empty or outside the " + std::to_string(image_width) +
                                 "x" + std::to_string(image_height) + " image");
            }
        }
    }
}

TrajectorySpec TrajectorySpec::from_json(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("trajectory spec is not valid JSON: ") + e.what());
    }
    TrajectorySpec spec;
    try {
        if (!doc.is_object() || !doc.contains("groups")) throw InputError("trajectory spec needs a \"groups\" array");
        spec.pca_dim = doc.value("pca_dim", spec.pca_dim);
        for (const auto& g : doc.at("groups")) {
            BoxGroup group;
            group.salient_k = g.value("salient_k", group.salient_k);
            for (const auto& b : g.at("boxes")) {
                if (!b.is_array() || b.size() != 4) throw InputError("each box must be [x0, y0, x1, y1]");
                group.boxes.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
            }
            spec.groups.push_back(std::move(group));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed trajectory spec: ") + e.what());
    }
    return spec;
}

TrajectorySpec TrajectorySpec::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open trajectory spec " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return from_json(ss.str());
    } catch (...) {
        rethrow_with_context(path.string());
    }
}

std::string TrajectorySpec::to_json() const {
    nlohmann::json doc;
    doc["pca_dim"] = pca_dim;
    doc["groups"] = nlohmann::json::array();
    for (const auto& g : groups) {
        nlohmann::json jg;
        jg["salient_k"] = g.salient_k;
        jg["boxes"] = nlohmann::json::array();
        for (const auto& b : g.boxes) jg["boxes"].push_back({b.x0, b.y0, b.x1, b.y1});
        doc["groups"].push_back(std::move(jg));
    }
    return doc.dump();
}

GridBox map_box_to_grid(const Box& box, std::size_t image_height, std::size_t image_width, std::size_t grid_height,
                        std::size_t grid_width) {
    if (box.x0 < 0 || box.y0 < 0 || std::size_t(box.x1) > image_width || std::size_t(box.y1) > image_height) {
        throw InputError("box lies outside the image");
    }
    auto lo = [](int v, std::size_t grid, std::size_t image) { return std::size_t(v) * grid / image; };
    auto hi = [](int v, std::size_t grid, std::size_t image) { return (std::size_t(v) * grid + image - 1) / image; };
    GridBox g;
    g.x0 = std::min(lo(box.x0, grid_width, image_width), grid_width);
    g.y0 = std::min(lo(box.y0, grid_height, image_height), grid_height);
    g.x1 = std::min(hi(box.x1, grid_width, image_width), grid_width);
    g.y1 = std::min(hi(box.y1, grid_height, image_height), grid_height);
    if (g.x1 <= g.x0 || g.y1 <= g.y0) throw InputError("box is empty on the feature grid");
    return g;
}

// ---------------------------------------------------------------------------
// PCA

PcaBasis fit_pca(const Tensor& features, std::size_t components, std::vector<std::string>* warnings) {
    if (features.rank() != 4) throw ShapeError("fit_pca expects [f, C, H, W], got " + to_string(features.shape()));
    if (components == 0) throw InputError("PCA needs at least one component");
    const std::size_t f = features.dim(0), c = features.dim(1), hw = features.dim(2) * features.dim(3);
    const std::size_t n = f * hw;
    const auto v = features.data();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    for (std::size_t fr = 0; fr < f; ++fr) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t p = 0; p < hw; ++p) {
                x(static_cast<Eigen::Index>(fr * hw + p), static_cast<Eigen::Index>(ch)) = v[(fr * c + ch) * hw + p];
            }
        }
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("PCA eigen-decomposition failed");
    const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
    const Eigen::MatrixXd& vectors = solver.eigenvectors();
    const double top = std::max(values(values.size() - 1), 0.0);
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (values(i) > top * 1e-10 && values(i) > 1e-20) ++rank;
    }

    PcaBasis out;
    out.rank = std::min(rank, components);
    std::vector<float> basis(components * c, 0.0f);
    out.explained_variance.assign(components, 0.0);
    for (std::size_t m = 0; m < out.rank; ++m) {
        const Eigen::Index col = values.size() - 1 - static_cast<Eigen::Index>(m);
        Eigen::VectorXd dir = vectors.col(col);
        Eigen::Index arg = 0;
        dir.cwiseAbs().maxCoeff(&arg);
        if (dir(arg) < 0) dir = -dir;
        for (std::size_t ch = 0; ch < c; ++ch) basis[m * c + ch] = static_cast<float>(dir(static_cast<Eigen::Index>(ch)));
        out.explained_variance[m] = values(col);
    }
    if (out.rank < components && warnings != nullptr) {
        warnings->push_back("PCA: only " + std::to_string(out.rank) + " of " + std::to_string(components) +
                            " requested components carry variance (" + std::to_string(c) + " channels, " +
                            std::to_string(n) + " tokens); the rest are zero");
    }
    out.basis = Tensor({components, c}, std::move(basis));
    out.mean = Tensor({c}, std::vector<float>(mean.data(), mean.data() + c));
    return out;
}

template <typename T>
BasicTensor<T> pca_project(const BasicTensor<T>& features, const PcaBasis& basis) {
    if (features.rank() != 4 || features.dim(1) != basis.basis.dim(1)) {
        throw ShapeError("pca_project: features " + to_string(features.shape()) + " vs basis " +
                         to_string(basis.basis.shape()));
    }
    const std::size_t f = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
    const std::size_t m = basis.basis.dim(0);
    const auto tokens = permute(reshape(features, {f, c, h * w}), {0, 2, 1});
    const auto centered = sub(tokens, basis.mean.template cast<T>());
    const auto projected = matmul(centered, permute(basis.basis.template cast<T>(), {1, 0}));  // [f, hw, M]
    return reshape(permute(projected, {0, 2, 1}), {f, m, h, w});
}

template <typename T>
BasicTensor<T> spatial_from_tokens(const BasicTensor<T>& tokens, std::size_t height, std::size_t width) {
    if (tokens.rank() != 3 || tokens.dim(1) != height * width) {
        throw ShapeError("token layout " + to_string(tokens.shape()) + " does not match a " + std::to_string(height) +
                         "x" + std::to_string(width) + " grid");
    }
    const std::size_t f = tokens.dim(0), c = tokens.dim(2);
    return reshape(permute(tokens, {0, 2, 1}), {f, c, height, width});
}

// ---------------------------------------------------------------------------
// Semantic masks

std::vector<GridPoint> select_salient_points(const GridBox& box, int k, std::vector<std::string>* warnings) {
    if (box.width() == 0 || box.height() == 0) throw InputError("salient points need a nonempty box");
    if (k < 1) throw InputError("salient point count must be >= 1");
    std::size_t count = static_cast<std::size_t>(k);
    const std::size_t cells = box.width() * box.height();
    if (count > cells) {
        if (warnings != nullptr) {
            warnings->push_back("salient points: box has " + std::to_string(cells) + " cells, K reduced from " +
                                std::to_string(count));
        }
        count = cells;
    }
    std::size_t g = 1;
    while (g * g < count) ++g;
    std::vector<GridPoint> out;
    for (std::size_t r = 0; r < g && out.size() < count; ++r) {
        for (std::size_t c = 0; c < g && out.size() < count; ++c) {
            out.push_back({box.y0 + (r + 1) * box.height() / (g + 1), box.x0 + (c + 1) * box.width() / (g + 1)});
        }
    }
    return out;
}

Tensor similarity_map(const Tensor& frame_features, const GridBox& box, const Tensor& first_features,
                      const GridPoint& point) {
    if (frame_features.rank() != 3 || first_features.rank() != 3 || frame_features.dim(0) != first_features.dim(0)) {
        throw ShapeError("similarity_map expects two [M, H, W] maps with equal M");
    }
    const std::size_t m = frame_features.dim(0), h = frame_features.dim(1), w = frame_features.dim(2);
    const std::size_t h1 = first_features.dim(1), w1 = first_features.dim(2);
    if (box.y1 > h || box.x1 > w || point.row >= h1 || point.col >= w1) throw ShapeError("similarity_map: out of range");
    const auto fv = frame_features.data();
    const auto rv = first_features.data();
    std::vector<double> ref(m);
    double ref_norm = 0.0;
    for (std::size_t ch = 0; ch < m; ++ch) {
        ref[ch] = rv[(ch * h1 + point.row) * w1 + point.col];
        ref_norm += ref[ch] * ref[ch];
    }
    ref_norm = std::sqrt(ref_norm);
    constexpr double kGuard = 1e-12;
    std::vector<float> out(box.height() * box.width());
    for (std::size_t y = box.y0; y < box.y1; ++y) {
        for (std::size_t x = box.x0; x < box.x1; ++x) {
            double dot = 0.0, norm = 0.0;
            for (std::size_t ch = 0; ch < m; ++ch) {
                const double u = fv[(ch * h + y) * w + x];
                dot += u * ref[ch];
                norm += u * u;
            }
            const double cosine = dot / std::max(std::sqrt(norm) * ref_norm, kGuard);
            out[(y - box.y0) * box.width() + (x - box.x0)] = static_cast<float>(std::clamp(cosine, -1.0, 1.0));
        }
    }
    return Tensor({box.height(), box.width()}, std::move(out));
}

Tensor aggregate_similarity(const std::vector<Tensor>& maps) {
    if (maps.empty()) throw InputError("aggregate_similarity needs at least one map");
    std::vector<float> out(maps.front().data().begin(), maps.front().data().end());
    for (std::size_t k = 1; k < maps.size(); ++k) {
        if (maps[k].shape() != maps.front().shape()) throw ShapeError("aggregate_similarity: map shapes differ");
        const auto v = maps[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], v[i]);
    }
    return Tensor(maps.front().shape(), std::move(out));
}

BinaryMask kmeans2_mask(const Tensor& map) {
    if (map.numel() == 0) throw InputError("kmeans2_mask needs a nonempty map");
    const auto v = map.data();
    std::vector<double> sorted(v.begin(), v.end());
    std::sort(sorted.begin(), sorted.end());
    BinaryMask out;
    if (sorted.back() - sorted.front() < 1e-6) {
        out.values = Tensor(map.shape(), 1.0f);
        out.degenerate = true;
        return out;
    }
    // Prefix sums of centred values give each split's SSE in constant time.
    const std::size_t n = sorted.size();
    const double centre = std::accumulate(sorted.begin(), sorted.end(), 0.0) / double(n);
    std::vector<double> sum(n + 1, 0.0), sq(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = sorted[i] - centre;
        sum[i + 1] = sum[i] + d;
        sq[i + 1] = sq[i] + d * d;
    }
    auto sse = [&](std::size_t begin, std::size_t end) {
        const double s1 = sum[end] - sum[begin];
        return (sq[end] - sq[begin]) - s1 * s1 / double(end - begin);
    };
    // Equal values always share a cluster, so only splits between distinct values count.
    std::size_t best_split = 0;
    double best = 0.0;
    for (std::size_t s = 1; s < n; ++s) {
        if (sorted[s - 1] == sorted[s]) continue;
        const double cost = sse(0, s) + sse(s, n);
        if (best_split == 0 || cost < best) {
            best = cost;
            best_split = s;
        }
    }
    const double threshold = sorted[best_split];
    std::vector<float> mask(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) mask[i] = double(v[i]) >= threshold ? 1.0f : 0.0f;
    out.values = Tensor(map.shape(), std::move(mask));
    return out;
}

// ---------------------------------------------------------------------------
// Alignment loss

namespace {

/// [out, in] half-pixel bilinear interpolation weights.
template <typename T>
BasicTensor<T> interpolation_matrix(std::size_t out, std::size_t in) {
    std::vector<T> m(out * in, T(0));
    const double ratio = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
        const double src = std::clamp((double(o) + 0.5) * ratio - 0.5, 0.0, double(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(src));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        const double frac = src - double(i0);
        m[o * in + i0] += static_cast<T>(1.0 - frac);
        m[o * in + i1] += static_cast<T>(frac);
    }
    return BasicTensor<T>({out, in}, std::move(m));
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& map, const GridBox& box) {
    return slice(slice(map, 1, box.y0, box.y1), 2, box.x0, box.x1);
}

}  // namespace

template <typename T>
BasicTensor<T> resample_bilinear(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3) throw ShapeError("resample_bilinear expects [C, h, w], got " + to_string(x.shape()));
    if (out_h == 0 || out_w == 0) throw ShapeError("resample_bilinear: empty target");
    if (x.dim(1) == out_h && x.dim(2) == out_w) return x;
    const auto rows = matmul(x, permute(interpolation_matrix<T>(out_w, x.dim(2)), {1, 0}));  // [C, h, out_w]
    const auto cols = matmul(permute(rows, {0, 2, 1}), permute(interpolation_matrix<T>(out_h, x.dim(1)), {1, 0}));
    return permute(cols, {0, 2, 1});
}

Tensor resample_nearest(const Tensor& mask, std::size_t out_h, std::size_t out_w) {
    if (mask.rank() != 2) throw ShapeError("resample_nearest expects [h, w]");
    const std::size_t h = mask.dim(0), w = mask.dim(1);
    if (h == out_h && w == out_w) return mask;
    const auto v = mask.data();
    std::vector<float> out(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(h - 1, y * h / out_h);
        for (std::size_t x = 0; x < out_w; ++x) out[y * out_w + x] = v[sy * w + std::min(w - 1, x * w / out_w)];
    }
    return Tensor({out_h, out_w}, std::move(out));
}

template <typename T>
BasicTensor<T> alignment_loss(const BasicTensor<T>& features, const SiteRegions& regions,
                              std::vector<AlignmentTerm>* terms) {
    if (features.rank() != 4) throw ShapeError("alignment_loss expects [f, M, H, W], got " + to_string(features.shape()));
    if (regions.boxes.size() != regions.masks.size()) throw InputError("alignment_loss: boxes and masks disagree");
    const std::size_t f = features.dim(0), m = features.dim(1), h = features.dim(2), w = features.dim(3);
    const auto reference = stop_gradient(reshape(slice(features, 0, 0, 1), {m, h, w}));
    std::optional<BasicTensor<T>> total;
    for (std::size_t i = 0; i < regions.boxes.size(); ++i) {
        const auto& boxes = regions.boxes[i];
        const auto& masks = regions.masks[i];
        if (boxes.size() != f || masks.size() != f) throw InputError("alignment_loss: one box and mask per frame");
        const GridBox& b1 = boxes[0];
        const auto target = crop(reference, b1);
        const auto m1 = masks[0].data();
        for (std::size_t j = 1; j < f; ++j) {
            if (masks[j].shape() != Shape{boxes[j].height(), boxes[j].width()}) {
                throw ShapeError("alignment_loss: mask shape does not match its box");
            }
            const Tensor mj_resampled = resample_nearest(masks[j], b1.height(), b1.width());
            const auto mj = mj_resampled.data();
            std::vector<T> overlap(mj.size());
            bool any = false;
            for (std::size_t q = 0; q < overlap.size(); ++q) {
                overlap[q] = static_cast<T>(m1[q] * mj[q]);
                any = any || overlap[q] != T(0);
            }
            AlignmentTerm term{i, j, 0.0, !any};
            if (any) {
                const auto frame = reshape(slice(features, 0, j, j + 1), {m, h, w});
                const auto live = resample_bilinear(crop(frame, boxes[j]), b1.height(), b1.width());
                const BasicTensor<T> weight({b1.height(), b1.width()}, std::move(overlap));
                const auto value = sum(square(mul(sub(live, target), weight)));
                term.loss = double(value.item());
                total = total ? add(*total, value) : value;
            }
            if (terms != nullptr) terms->push_back(term);
        }
    }
    return total ? *total : BasicTensor<T>::scalar(T(0));
}

// ---------------------------------------------------------------------------
// Latent optimization

const char* to_string(MaskMode mode) {
    switch (mode) {
        case MaskMode::Semantic: return "semantic";
        case MaskMode::Static: return "static";
        case MaskMode::None: return "none";
    }
    return "?";
}

const char* to_string(FeatureKind kind) { return kind == FeatureKind::Query ? "query" : "residual"; }

std::vector<TapAddress> OptimizerConfig::feature_sites() const {
    std::vector<TapAddress> out;
    for (TapAddress a : sites) {
        a.kind = feature == FeatureKind::Query ? TapKind::Query : TapKind::ResidualHidden;
        if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
    }
    return out;
}

namespace {

Tensor frame_of(const Tensor& reduced, std::size_t j) {
    return reshape(slice(reduced, 0, j, j + 1), {reduced.dim(1), reduced.dim(2), reduced.dim(3)});
}

BinaryMask semantic_mask(const Tensor& reduced, const GridBox& first_box, const GridBox& box, std::size_t frame,
                         int k, std::vector<std::string>* warnings) {
    const Tensor first = frame_of(reduced, 0);
    const Tensor current = frame_of(reduced, frame);
    std::vector<Tensor> maps;
    for (const auto& p : select_salient_points(first_box, k, warnings)) maps.push_back(similarity_map(current, box, first, p));
    return kmeans2_mask(aggregate_similarity(maps));
}

}  // namespace

SiteRegions build_regions(const Tensor& reduced, const TrajectoryContext& ctx, MaskMode mode,
                          std::vector<std::string>* warnings) {
    const std::size_t f = reduced.dim(0), gh = reduced.dim(2), gw = reduced.dim(3);
    SiteRegions r;
    for (std::size_t i = 0; i < ctx.spec.groups.size(); ++i) {
        const auto& group = ctx.spec.groups[i];
        if (group.boxes.size() != f) throw InputError("trajectory group " + std::to_string(i) + " frame count mismatch");
        std::vector<GridBox> boxes;
        for (const auto& b : group.boxes) boxes.push_back(map_box_to_grid(b, ctx.image_height, ctx.image_width, gh, gw));
        std::vector<Tensor> masks;
        BinaryMask first;
        if (mode != MaskMode::None) first = semantic_mask(reduced, boxes[0], boxes[0], 0, group.salient_k, warnings);
        for (std::size_t j = 0; j < f; ++j) {
            const Shape shape{boxes[j].height(), boxes[j].width()};
            BinaryMask mk;
            if (mode == MaskMode::None) {
                mk.values = Tensor(shape, 1.0f);
            } else if (mode == MaskMode::Static || j == 0) {
                mk.values = resample_nearest(first.values, shape[0], shape[1]);
                mk.degenerate = first.degenerate;
            } else {
                mk = semantic_mask(reduced, boxes[0], boxes[j], j, group.salient_k, warnings);
            }
            if (mk.degenerate && warnings != nullptr && mode != MaskMode::None) {
                warnings->push_back("degenerate (flat) similarity map for group " + std::to_string(i) + ", frame " +
                                    std::to_string(j + 1) + "; using an all-ones mask");
            }
            masks.push_back(std::move(mk.values));
        }
        r.boxes.push_back(std::move(boxes));
        r.masks.push_back(std::move(masks));
    }
    return r;
}

BinaryMask frame_mask(const Tensor& reduced, const TrajectoryContext& ctx, std::size_t group, std::size_t frame) {
    const std::size_t gh = reduced.dim(2), gw = reduced.dim(3);
    const auto& g = ctx.spec.groups.at(group);
    const GridBox first = map_box_to_grid(g.boxes.at(0), ctx.image_height, ctx.image_width, gh, gw);
    return semantic_mask(reduced, first, GridBox{0, 0, gw, gh}, frame, g.salient_k, nullptr);
}

template <typename T>
OptimizeResult<T> optimize_latent(const BasicTensor<T>& z, const FeatureFn<T>& features, const TrajectoryContext& ctx,
                                  const OptimizerConfig& config, OptimizerState* state) {
    if (config.inner_iters < 0) throw InputError("inner_iters must be >= 0");
    if (!(config.lr > 0.0)) throw InputError("learning rate must be positive");
    if (z.rank() != 4) throw ShapeError("optimize_latent expects a [f, C, H, W] latent");
    const std::size_t f = z.dim(0);
    const auto sites = config.feature_sites();
    const auto components = static_cast<std::size_t>(ctx.spec.pca_dim);

    OptimizeResult<T> res;
    std::map<TapAddress, PcaBasis> bases;
    BasicTensor<T> current = z.detach();
    res.latent = current;

    for (int it = 0; it <= config.inner_iters; ++it) {
        Tape<T> tape;
        ActiveTape<T> active(tape);
        BasicTensor<T> leaf = current.clone();
        leaf.set_requires_grad(true);
        const BasicTensor<T> input =
            f == 1 ? stop_gradient(leaf) : concat<T>({stop_gradient(slice(leaf, 0, 0, 1)), slice(leaf, 0, 1, f)}, 0);
        const auto feats = features(input);

        std::optional<BasicTensor<T>> loss;
        for (const auto& site : sites) {
            auto found = feats.find(site);
            if (found == feats.end()) throw InputError("feature function did not return site " + to_string(site));
            const BasicTensor<T>& x = found->second;
            if (it == 0) {
                const Tensor values = x.template cast<float>();
                PcaBasis basis;
                if (config.freeze_basis && state != nullptr && state->frozen_basis.count(site) != 0) {
                    basis = state->frozen_basis.at(site);
                } else {
                    basis = fit_pca(values, components, &res.warnings);
                    if (config.freeze_basis && state != nullptr) state->frozen_basis.emplace(site, basis);
                }
                const Tensor reduced = pca_project(values, basis);
                if (config.mask_mode == MaskMode::Static && state != nullptr && state->static_regions.count(site) != 0) {
                    res.regions.emplace(site, state->static_regions.at(site));
                } else {
                    res.regions.emplace(site, build_regions(reduced, ctx, config.mask_mode, &res.warnings));
                    if (config.mask_mode == MaskMode::Static && state != nullptr) {
                        state->static_regions.emplace(site, res.regions.at(site));
                    }
                }
                bases.emplace(site, std::move(basis));
            }
            auto term = alignment_loss(pca_project(x, bases.at(site)), res.regions.at(site), it == 0 ? &res.terms : nullptr);
            loss = loss ? add(*loss, term) : term;
        }
        const double value = loss ? double(loss->item()) : 0.0;
        if (!std::isfinite(value)) {
            res.diverged = true;
            res.warnings.push_back("non-finite alignment loss at inner iteration " + std::to_string(it) +
                                   "; keeping the last finite latent");
            break;
        }
        res.losses.push_back(value);
        res.latent = current;
        if (it == config.inner_iters || !loss || !loss->requires_grad()) {
            if (it < config.inner_iters) {
                // Nothing depends on the latent: every remaining step is a no-op.
                while (static_cast<int>(res.losses.size()) <= config.inner_iters) res.losses.push_back(value);
            }
            break;
        }
        backward(*loss);
        const auto grad = leaf.grad();
        std::vector<T> next(current.numel());
        const auto cv = current.data();
        const auto gv = grad.data();
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = static_cast<T>(cv[i] - config.lr * gv[i]);
        current = BasicTensor<T>(current.shape(), std::move(next));
    }
    return res;
}

template Tensor pca_project<float>(const Tensor&, const PcaBasis&);
template TensorD pca_project<double>(const TensorD&, const PcaBasis&);
template Tensor spatial_from_tokens<float>(const Tensor&, std::size_t, std::size_t);
template TensorD spatial_from_tokens<double>(const TensorD&, std::size_t, std::size_t);
template Tensor resample_bilinear<float>(const Tensor&, std::size_t, std::size_t);
template TensorD resample_bilinear<double>(const TensorD&, std::size_t, std::size_t);
template Tensor alignment_loss<float>(const Tensor&, const SiteRegions&, std::vector<AlignmentTerm>*);
template TensorD alignment_loss<double>(const TensorD&, const SiteRegions&, std::vector<AlignmentTerm>*);
template OptimizeResult<float> optimize_latent<float>(const Tensor&, const FeatureFn<float>&, const TrajectoryContext&,
                                                      const OptimizerConfig&, OptimizerState*);
template OptimizeResult<double> optimize_latent<double>(const TensorD&, const FeatureFn<double>&,
                                                        const TrajectoryContext&, const OptimizerConfig&,
                                                        OptimizerState*);

}  // namespace anyi2v
