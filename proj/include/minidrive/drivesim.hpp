#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive::sim {

enum class NavCommand { TurnLeft, GoStraight, TurnRight, Unknown };
enum class ScenarioKind { LaneKeep, LeftTurn, RightTurn, CarFollow, Overtake };

std::string to_string(NavCommand c);
std::string to_string(ScenarioKind k);
NavCommand nav_from_string(const std::string& s);
ScenarioKind kind_from_string(const std::string& s);

struct AgentState {
    double x = 0, y = 0, psi = 0, vx = 0, vy = 0;
};

struct Agent {
    double length = 4.5;
    double width = 2.0;
    std::vector<AgentState> states;  // one per timeline index, 2 Hz
};

struct MapData {
    std::vector<geom::Polyline> lanes;  // lane centerlines
    geom::Polygon drivable;             // drivable-area polygon, metres
    geom::Polyline route;               // ego's intended route centerline
};

struct EgoStatus {
    double v = 0;  // m/s
    double a = 0;  // m/s^2
};

struct SimParams {
    int horizon = 8;    // T future waypoints
    int n_history = 4;  // history poses incl. current
    double dt = 0.5;    // 2 Hz
    int grid_size = 64;
    double grid_res = 0.5;  // m/cell
    int anchor_row = 16;    // forward axis
    int anchor_col = 32;
    int sem_k = 4;  // nearest agents in the interaction features
    double accel_bound = 8.0;
    double jerk_bound = 10.0;
    double yawrate_bound = 1.0;
    double agent_vmax = 15.0;  // velocity channel scale
    double ego_length = 4.5;
    double ego_width = 2.0;

    int steps() const { return n_history + horizon; }
    int sem_dim() const { return sem_k * 6; }
    static constexpr int kGeoDim = 8;
    static constexpr int kGridChannels = 5;
};

/// One synthetic episode. The timeline has n_history + horizon poses at
/// 2 Hz; index n_history-1 is "now" and is the origin of the world frame
/// (last history pose = identity).
struct Scenario {
    std::uint64_t seed = 0;
    ScenarioKind kind = ScenarioKind::LaneKeep;
    double dt = 0.5;
    int n_history = 4;
    int horizon = 8;
    MapData map;
    std::vector<Agent> agents;
    std::vector<geom::Pose> ego_history;  // n_history poses
    std::vector<geom::Pose> ego_future;   // horizon poses
    EgoStatus ego_status;
    NavCommand nav = NavCommand::Unknown;

    int steps() const { return n_history + horizon; }
    int current_index() const { return n_history - 1; }
    const geom::Pose& ego_pose_at(int t) const;
    /// Ego velocity vector at a timeline index (finite differences).
    geom::Vec2 ego_velocity_at(int t) const;
};

/// 5 x H x W ego-centric raster: drivable mask, lane mask, agent occupancy,
/// agent velocity (forward, lateral) in the ego frame scaled by vmax.
struct ObservationGrid {
    Tensor<float> data;  // [5, H, W]
    double resolution = 0.5;
    int anchor_row = 0;
    int anchor_col = 0;

    float at(int ch, int r, int c) const {
        const int hw = data.dim(1) * data.dim(2);
        return data[static_cast<std::int64_t>(ch) * hw + static_cast<std::int64_t>(r) * data.dim(2) + c];
    }
};

enum class OracleKind { Semantic, Geometric };

struct OracleFeatures {
    std::vector<double> values;
    OracleKind kind = OracleKind::Semantic;
};

Scenario generate_scenario(std::uint64_t seed, ScenarioKind kind, const SimParams& p);

ObservationGrid render_observation(const Scenario& scn, int t, const SimParams& p);

/// Interaction features: the k nearest agents' relative position, relative
/// velocity, range rate and closing flag, sorted by distance, zero-padded.
OracleFeatures semantic_oracle(const Scenario& scn, int t, const SimParams& p);

/// Structure features: signed lateral offset and heading error w.r.t. the
/// nearest centerline, curvature samples ahead, signed drivable-boundary
/// distance.
OracleFeatures geometric_oracle(const Scenario& scn, int t, const SimParams& p);

/// Reflects the whole scenario about the x-axis.
Scenario mirrored(const Scenario& scn);

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

std::string scenario_to_json(const Scenario& scn);
Scenario scenario_from_json(const std::string& text);

void save_grid(const std::filesystem::path& path, const ObservationGrid& grid);
ObservationGrid load_grid(const std::filesystem::path& path);

struct ManifestEntry {
    int id = 0;
    std::uint64_t seed = 0;
    ScenarioKind kind = ScenarioKind::LaneKeep;
    std::string split;  // train | val | test
    std::string file;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split(const std::string& name) const;
};

/// Deterministic split with exact counts (largest remainder) and an exact
/// kind distribution.
DatasetManifest build_dataset(int n, const std::vector<double>& split_ratios,
                              const std::vector<double>& kind_ratios, std::uint64_t seed);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

}  // namespace minidrive::sim
