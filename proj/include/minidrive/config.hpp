#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "minidrive/drivesim.hpp"
#include "minidrive/metrics.hpp"

namespace minidrive {

/// Thrown for malformed or invalid configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key = value configuration. Every knob of the pipeline lives here;
/// the canonical serialization of all fields is hashed and the hash is
/// embedded in every artifact.
struct RunConfig {
    // global
    std::uint64_t seed = 42;

    // dataset
    int n_scenarios = 2000;
    double split_train = 0.8, split_val = 0.1, split_test = 0.1;
    double kind_lane_keep = 0.2, kind_left_turn = 0.2, kind_right_turn = 0.2, kind_car_follow = 0.2,
           kind_overtake = 0.2;

    // simulator
    int horizon = 8;
    int n_history = 4;
    double dt = 0.5;
    int grid_size = 64;
    double grid_res = 0.5;
    int anchor_row = 16;
    int anchor_col = 32;
    int sem_k = 4;
    double accel_bound = 8.0;
    double jerk_bound = 10.0;
    double yawrate_bound = 1.0;
    double agent_vmax = 15.0;
    double ego_length = 4.5;
    double ego_width = 2.0;

    // model dimensions
    int latent_dim = 32;
    int cond_dim = 48;
    int d_model = 128;
    int heads = 4;
    int wm_layers = 2;
    int backbone_layers = 4;
    int planner_layers = 2;
    int k_per_step = 1;
    int tau_embed_dim = 16;
    int patch_size = 16;
    int queries_per_source = 8;

    // prompts
    std::string scene_prompt = "a car drives through a synthetic town";
    int prompt_waypoint_stride = 2;
    int max_cond_tokens = 96;
    int max_text_tokens = 72;

    // losses
    double w_dyn = 1.0, w_sem = 0.1, w_geo = 0.1, w_traj = 1.0;
    double lambda_l1 = 1.0, lambda_cos = 1.0, lambda_fusion = 1.0;
    double smooth_l1_beta = 1.0;

    // samplers and schedules
    int stage1_sample_steps = 20;
    int stage3_sample_steps = 10;
    double sigma_min = 0.001, sigma_max = 0.999;
    double logit_normal_mu = 0.0, logit_normal_s = 1.0;

    // training
    int ae_train_steps = 400;
    int ae_batch = 8;
    double ae_lr = 2e-3;
    double ae_recon_threshold = 0.05;
    int stage1_train_steps = 2000;
    int stage1_batch = 4;
    double stage1_lr = 1e-3;
    int stage2_train_steps = 900;
    int stage2_batch = 4;
    double stage2_lr = 1e-3;
    int stage3_train_steps = 900;
    int stage3_batch = 4;
    double stage3_lr = 1e-3;
    double weight_decay = 0.01;
    int checkpoint_every = 500;
    std::string experts = "sem,geo,dyn,traj";  // enabled expert branches

    // metrics
    double ttc_threshold = 1.0;
    double ttc_horizon = 3.0;
    double pdms_w_ttc = 5.0;
    double pdms_w_comfort = 2.0;
    double pdms_w_ep = 5.0;

    // evaluation
    int eval_max_svg = 8;

    static RunConfig from_file(const std::filesystem::path& path);
    static RunConfig from_text(const std::string& text);

    /// Canonical "key = value" serialization, sorted by key.
    std::string to_text() const;

    /// FNV-1a hash of the canonical serialization, as 16 hex digits.
    std::string hash_hex() const;

    /// Range checks; throws ConfigError listing the offending key.
    void validate() const;

    sim::SimParams sim_params() const;
    metrics::MetricBounds metric_bounds() const;
    std::vector<std::string> enabled_experts() const;
};

}  // namespace minidrive
