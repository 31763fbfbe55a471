#pragma once

// End-to-end run: invert the condition latent with temporal attention off,
// capture features at t_alpha, sample from seeded noise with first-frame
// injection and trajectory optimization, decode, and report adherence.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anyi2v/backbone.hpp"
#include "anyi2v/codec.hpp"
#include "anyi2v/image_io.hpp"
#include "anyi2v/injection.hpp"
#include "anyi2v/scheduler.hpp"
#include "anyi2v/traj_control.hpp"

namespace anyi2v {

inline constexpr int kManifestSchemaVersion = 1;

struct RunConfig {
    BackboneConfig backbone;
    int train_steps = 1000;
    int steps = 25;
    int inversion_steps = 1000;
    WindowConfig window;
    bool inject = true;
    InjectionPlan injection;
    bool optimize = true;
    OptimizerConfig optimizer;
    /// PCA dimension; a trajectory file's own value is used when this is unset.
    std::optional<int> pca_dim;
    std::uint64_t codec_seed = 0;
    bool dump_latents = false;

    /// Copies window settings into the optimizer and checks every field.
    void validate() const;
};

/// Where the prompt embedding comes from.
struct EmbeddingSource {
    std::optional<std::filesystem::path> file;  // RTD1 [cond_tokens, cond_dim]
    std::uint64_t seed = 0;                     // used when no file is given
};

struct RunInputs {
    std::filesystem::path image_path;
    std::string modality = "other";
    std::optional<std::filesystem::path> trajectory_path;
    EmbeddingSource embedding;
    std::optional<std::filesystem::path> checkpoint;
};

/// Deterministic pseudo-embedding [tokens, dim] from the "embedding" stream.
Tensor seeded_embedding(std::uint64_t seed, std::size_t tokens, std::size_t dim);

struct AdherenceRow {
    std::size_t group = 0;
    std::size_t frame = 0;
    double centroid_x = 0.0, centroid_y = 0.0;
    double center_x = 0.0, center_y = 0.0;
    double error = 0.0;
    bool degenerate = false;
};

struct AdherenceReport {
    std::vector<AdherenceRow> rows;
    double mean_error = 0.0;  // over non-degenerate rows
    std::size_t counted = 0;
};

/// Distance between the cell-index centroid of each mask and the center
/// ((x0 + x1) / 2, (y0 + y1) / 2) of its target grid box. masks[i][j] covers
/// the whole grid; degenerate masks are flagged and left out of the mean.
AdherenceReport adherence_report(const std::vector<std::vector<Tensor>>& masks,
                                 const std::vector<std::vector<bool>>& degenerate,
                                 const std::vector<std::vector<GridBox>>& boxes);

struct RunResult {
    std::vector<Image> frames;
    std::vector<std::vector<Image>> masks;  // [group][frame], P5
    Tensor final_latent;
    AdherenceReport adherence;
    bool diverged = false;
    std::vector<std::string> warnings;
    std::string manifest;  // JSON
};

/// Executes a run and writes frames, masks, latents and manifest.json into
/// `out_dir` (created when missing).
RunResult run_generate(const RunInputs& inputs, const RunConfig& config, const std::filesystem::path& out_dir);

/// Inversion only: writes the inverted latents and the captured feature taps.
struct InvertResult {
    InversionResult inversion;
    Tensor condition_latent;
};
InvertResult run_invert(const RunInputs& inputs, const RunConfig& config, const std::filesystem::path& out_dir);

/// Captures the taps of one forward pass of the encoded condition image at
/// `timestep`, writes each as RTD1 plus a P6 rendering of its first three
/// principal components.
void inspect_taps(const RunInputs& inputs, const RunConfig& config, const std::vector<TapAddress>& taps, int timestep,
                  const std::filesystem::path& out_dir);

/// Config and inputs recorded in a manifest; unknown schema versions are rejected.
struct ReplaySpec {
    RunInputs inputs;
    RunConfig config;
};
ReplaySpec parse_manifest(const std::string& json_text);
ReplaySpec load_manifest(const std::filesystem::path& path);

/// Human-readable adherence table from a manifest.
std::string format_report(const std::string& manifest_json);

}  // namespace anyi2v
