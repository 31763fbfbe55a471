#pragma once

// Toy 3D U-Net denoiser.
//
// Layout for num_down_blocks = D (resolution level l halves the grid l times):
//
//   conv_in -> down.0 .. down.{D-1} -> mid.0 -> up.0 .. up.{D-1} -> conv_out
//
// up.0 sits next to the bottleneck and up.{D-1} at full resolution. Down and
// mid blocks have one layer; up blocks have `up_layers` layers (layer 0 takes
// the skip connection). Each layer is
//
//   ResBlock -> spatial self-attention -> cross-attention -> temporal attention
//
// and exposes the residual hidden state plus the spatial self-attention
// query/key/value/map as tap sites.
//
// The network output v is read as a velocity and returned as the noise
// prediction eps = sqrt(1 - a_t) * z_t + sqrt(a_t) * v, with a_t the
// cumulative alpha of the configured schedule. With untrained weights this
// keeps the implied clean-latent estimate sqrt(a_t) * z_t - sqrt(1 - a_t) * v
// bounded at every noise level.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "anyi2v/tensor.hpp"

namespace anyi2v {

enum class Stage { Down, Mid, Up };
enum class TapKind { ResidualHidden, Query, Key, Value, AttentionMap };

struct TapAddress {
    Stage stage = Stage::Up;
    int block = 0;
    TapKind kind = TapKind::ResidualHidden;
    int layer = 0;

    auto operator<=>(const TapAddress&) const = default;
};

/// Textual form `<stage>.<block>.<kind>.<layer>`, e.g. `up.1.res.0`, `up.2.q.1`.
/// Kinds: res, q, k, v, attn.
std::string to_string(const TapAddress& address);
TapAddress parse_tap_address(std::string_view text);
/// Comma-separated list of addresses.
std::vector<TapAddress> parse_tap_list(std::string_view text);

struct BackboneConfig {
    int latent_channels = 4;
    int base_width = 32;
    int num_down_blocks = 3;
    int attn_heads = 2;
    int frames = 4;
    int height = 16;
    int width = 16;
    std::uint64_t seed = 0;
    bool temporal_enabled = true;
    int up_layers = 2;
    int cond_tokens = 4;
    int cond_dim = 16;
    double temporal_init_scale = 0.05;
    /// Noise schedule used to turn the network's velocity output into a
    /// noise prediction.
    int train_steps = 1000;
    double beta_start = 8.5e-4;
    double beta_end = 1.2e-2;

    void validate() const;
    int width_at(int level) const;

    std::string to_text() const;
    static BackboneConfig from_text(std::string_view text);
};

template <typename T>
struct FeatureBundle {
    int timestep = -1;
    std::map<TapAddress, BasicTensor<T>> taps;

    const BasicTensor<T>& at(const TapAddress& address) const;
    bool contains(const TapAddress& address) const { return taps.count(address) != 0; }
};

/// Callback consulted at every overridable site during a forward pass.
template <typename T>
class SiteHook {
public:
    virtual ~SiteHook() = default;
    /// Returns the tensor to use in place of `live` (or `live` itself).
    virtual BasicTensor<T> at_site(const TapAddress& site, const BasicTensor<T>& live) const = 0;
    /// When true, keys and values of frames 2..f are replaced by frame 1's.
    virtual bool propagate_first_frame_kv() const { return false; }
};

template <typename T>
struct ForwardOptions {
    std::set<TapAddress> taps;
    std::map<TapAddress, BasicTensor<T>> overrides;
    bool kv_propagate = false;
    const SiteHook<T>* hook = nullptr;
    bool disable_temporal = false;
};

template <typename T>
struct ForwardResult {
    BasicTensor<T> eps;
    FeatureBundle<T> bundle;
};

/// Projections and outputs of one spatial self-attention call.
template <typename T>
struct AttentionTrace {
    BasicTensor<T> query, key, value, map, output;
};

/// Per-frame multi-head self-attention over x [f, tokens, C]. `substitute`
/// may replace q/k/v before attention (identity when empty).
template <typename T>
AttentionTrace<T> spatial_self_attention(
    const BasicTensor<T>& x, const BasicTensor<T>& wq, const BasicTensor<T>& wk, const BasicTensor<T>& wv,
    const BasicTensor<T>& wo, int heads,
    const std::function<BasicTensor<T>(TapKind, const BasicTensor<T>&)>& substitute = {});

/// Sinusoidal timestep features of length `dim` (cos half then sin half).
std::vector<double> timestep_features(int t, int dim);

template <typename T>
class Backbone {
public:
    Backbone() = default;

    const BackboneConfig& config() const { return cfg_; }
    const std::map<std::string, BasicTensor<T>>& parameters() const { return params_; }
    std::uint64_t checksum() const;

    /// Every resolvable tap address.
    std::vector<TapAddress> sites() const;
    bool resolves(const TapAddress& address) const;
    /// Tensor shape at `address` for a pass over `frames` frames.
    Shape site_shape(const TapAddress& address, std::size_t frames) const;
    /// Spatial grid (height, width) at the resolution of `address`.
    std::pair<std::size_t, std::size_t> site_grid(const TapAddress& address) const;

    /// z [f, C, H, W] with any f >= 1; cond [cond_tokens, cond_dim].
    ForwardResult<T> forward(const BasicTensor<T>& z, int t, const BasicTensor<T>& cond,
                             const ForwardOptions<T>& options = {}) const;

    template <typename U>
    Backbone<U> cast() const {
        Backbone<U> out;
        out.cfg_ = cfg_;
        for (const auto& [k, v] : params_) out.params_.emplace(k, v.template cast<U>());
        return out;
    }

private:
    template <typename U>
    friend class Backbone;
    friend Backbone<float> build_backbone(const BackboneConfig& cfg);
    friend Backbone<float> load_checkpoint(const std::filesystem::path& dir);

    const BasicTensor<T>& param(const std::string& path) const;

    BackboneConfig cfg_;
    std::map<std::string, BasicTensor<T>> params_;
};

/// Weights come from a counter-based generator keyed by (seed, parameter path),
/// scaled by 1/sqrt(fan_in).
Backbone<float> build_backbone(const BackboneConfig& cfg);

/// Directory checkpoint: config.txt (key=value), manifest.txt
/// ("<parameter path> <file>" per line) and one RTD1 file per parameter.
void save_checkpoint(const Backbone<float>& backbone, const std::filesystem::path& dir);
Backbone<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace anyi2v
