#pragma once

#include <deque>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "minidrive/backbone.hpp"
#include "minidrive/config.hpp"
#include "minidrive/drivesim.hpp"
#include "minidrive/metrics.hpp"
#include "minidrive/planner.hpp"
#include "minidrive/worldmodel.hpp"

namespace minidrive::pipeline {

namespace fs = std::filesystem;

/// A required artifact (dataset, earlier-stage checkpoint) is missing:
/// CLI exit code 3.
struct MissingPrerequisite : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training hit a non-finite loss; the last periodic checkpoint is kept.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LockError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One training process at a time per run directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

/// data: dataset manifest + scenario files. run: checkpoints, logs,
/// reports, evaluation outputs. They usually coincide.
struct Paths {
    fs::path data;
    fs::path run;

    fs::path manifest() const { return data / "manifest.json"; }
    fs::path stage_ckpt(int stage) const { return run / ("stage" + std::to_string(stage) + ".bin"); }
    fs::path stage_meta(int stage) const { return run / ("stage" + std::to_string(stage) + ".json"); }
    fs::path train_log(int stage) const { return run / ("train_stage" + std::to_string(stage) + ".csv"); }
    fs::path report(int stage) const { return run / ("report_stage" + std::to_string(stage) + ".json"); }
};

/// One scenario with everything the trainers consume. Inference-side
/// tensors (current grid, task prompt, current-frame oracle features) are
/// computed from a future-masked view of the scenario; future-dependent
/// targets live alongside and are training-only.
struct PreparedScenario {
    sim::Scenario scn;
    Tensor<float> patches_current;  // [n_patches, patch_dim]
    std::vector<int> cond_ids;      // stage-1 prompt (with future)
    int cond_real = 0;
    std::vector<int> task_ids;      // stage-2 prompt (no future)
    int task_real = 0;
    std::vector<sim::OracleFeatures> sem_future, geo_future;  // per future step
    Tensor<float> sem_now;   // [sem_k, 6]
    Tensor<float> geo_now;   // [1, geo_dim]
    Tensor<float> hist_flat; // [1, 3*n_h]
    Tensor<float> status;    // [1, 2]
    Tensor<float> gt_future; // [T, 3]
    Tensor<float> latents;   // [steps, latent_dim], filled by compute_latents
};

struct Dataset {
    sim::DatasetManifest manifest;
    std::deque<PreparedScenario> items;  // indexed by scenario id
    std::vector<int> train_idx, val_idx, test_idx;

    const std::vector<int>& split(const std::string& name) const;
};

/// Generates and persists the dataset (manifest + scenario JSON files).
void cmd_gen_data(const RunConfig& cfg, const Paths& paths);

Dataset load_dataset(const RunConfig& cfg, const Paths& paths, bool allow_hash_mismatch = false);

/// Renders every frame of the listed items and fills their latent rows
/// with the (frozen) autoencoder.
void compute_latents(Dataset& ds, const std::vector<int>& indices, const wm::Stage1Model<float>& model,
                     const RunConfig& cfg);

struct Stage1Result {
    double initial_loss = 0.0;   // smoothed over the first log window
    double final_loss = 0.0;     // smoothed over the last log window
    double recon_val_mse = 0.0;  // held-out autoencoder reconstruction
    int steps = 0;
};

Stage1Result train_stage1(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume = false,
                          bool allow_hash_mismatch = false);

/// Mean validation flow loss with correct or rotated (shuffled) prompts.
double stage1_val_loss(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool shuffle_prompts);

struct Stage2Result {
    double final_loss = 0.0;
    int steps = 0;
};

Stage2Result train_stage2(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume = false,
                          const std::optional<fs::path>& stage1_ckpt = std::nullopt,
                          bool allow_hash_mismatch = false);

struct AlignmentStats {
    double cos_sem = 0.0;
    double cos_geo = 0.0;
    double head_ade = 0.0;
    double baseline_ade = 0.0;
};

/// Held-out adapted-token vs oracle cosine similarity and head-vs-baseline
/// ADE. With `untrained` the backbone is freshly initialized instead of
/// loaded (reference point for the alignment gain).
AlignmentStats stage2_alignment(const RunConfig& cfg, const Paths& paths, std::uint64_t seed,
                                const std::string& split, bool untrained = false,
                                bool allow_hash_mismatch = false);

struct Stage3Result {
    double final_loss = 0.0;
    std::vector<double> fusion_alpha;
    int steps = 0;
};

Stage3Result train_stage3(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume = false,
                          bool allow_hash_mismatch = false);

enum class PlannerKind { GroundTruth, Baseline, Stage2Head, Planner };

std::string to_string(PlannerKind k);

struct EvalSummary {
    int count = 0;
    double nc = 0, dac = 0, ttc = 0, comfort = 0, ep = 0;
    double pdms_x100 = 0;
    double ade = 0, fde = 0;
    double wall_sec = 0;
    fs::path csv;
};

EvalSummary run_eval(const RunConfig& cfg, const Paths& paths, PlannerKind kind, const std::string& split,
                     int steps_override = -1, bool emit_svg = false, bool allow_hash_mismatch = false);

struct AblateCell {
    std::string axis;   // "experts" or "steps"
    std::string label;  // e.g. "traj+geo" or "steps=10"
    std::vector<double> pdms;  // one per seed
    double mean = 0, stddev = 0;
    double mean_wall_sec = 0;
};

struct AblateReport {
    std::vector<AblateCell> cells;
};

/// Expert axis: the four cumulative expert configurations; steps axis:
/// sampling steps in {5, 10, 20} on the full configuration.
AblateReport run_ablate(const RunConfig& cfg, const Paths& paths, const std::vector<std::string>& axes,
                        int n_seeds);

void write_ablate_report(const AblateReport& rep, const RunConfig& cfg, const Paths& paths);

/// Plan one scenario JSON with a trained stage-3 planner and write the
/// trajectory JSON (T rows of x, y, psi in world units).
void cmd_plan(const RunConfig& cfg, const Paths& paths, const fs::path& scenario_json,
              const fs::path& out_trajectory, int steps_override = -1, bool allow_hash_mismatch = false);

}  // namespace minidrive::pipeline
