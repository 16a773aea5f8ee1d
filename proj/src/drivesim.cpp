#include "minidrive/drivesim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace minidrive::sim {

using geom::Polygon;
using geom::Polyline;
using geom::Pose;
using geom::Vec2;
using json = nlohmann::json;

std::string to_string(NavCommand c) {
    switch (c) {
        case NavCommand::TurnLeft: return "turn_left";
        case NavCommand::GoStraight: return "go_straight";
        case NavCommand::TurnRight: return "turn_right";
        default: return "unknown";
    }
}

std::string to_string(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::LaneKeep: return "lane_keep";
        case ScenarioKind::LeftTurn: return "left_turn";
        case ScenarioKind::RightTurn: return "right_turn";
        case ScenarioKind::CarFollow: return "car_follow";
        default: return "overtake";
    }
}

NavCommand nav_from_string(const std::string& s) {
    if (s == "turn_left") return NavCommand::TurnLeft;
    if (s == "go_straight") return NavCommand::GoStraight;
    if (s == "turn_right") return NavCommand::TurnRight;
    if (s == "unknown") return NavCommand::Unknown;
    throw std::invalid_argument("unknown nav command: " + s);
}

ScenarioKind kind_from_string(const std::string& s) {
    if (s == "lane_keep") return ScenarioKind::LaneKeep;
    if (s == "left_turn") return ScenarioKind::LeftTurn;
    if (s == "right_turn") return ScenarioKind::RightTurn;
    if (s == "car_follow") return ScenarioKind::CarFollow;
    if (s == "overtake") return ScenarioKind::Overtake;
    throw std::invalid_argument("unknown scenario kind: " + s);
}

const Pose& Scenario::ego_pose_at(int t) const {
    if (t < 0 || t >= steps()) throw std::out_of_range("ego_pose_at: index " + std::to_string(t));
    return t < n_history ? ego_history[static_cast<std::size_t>(t)]
                         : ego_future[static_cast<std::size_t>(t - n_history)];
}

Vec2 Scenario::ego_velocity_at(int t) const {
    const int last = steps() - 1;
    const int a = std::min(t, last - 1);
    const Pose& p0 = ego_pose_at(a);
    const Pose& p1 = ego_pose_at(a + 1);
    return {(p1.x - p0.x) / dt, (p1.y - p0.y) / dt};
}

// ---------------------------------------------------------------------
// Scripted profiles
// ---------------------------------------------------------------------

namespace {

constexpr double kLaneWidth = 3.5;
constexpr double kShoulder = 1.0;
constexpr double kFineDt = 0.005;

double smoothstep5(double u) {
    u = std::clamp(u, 0.0, 1.0);
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0);
}

/// Linear trapezoid ramp: 0 before t0, up over `ramp`, flat for `hold`,
/// down over `ramp`, 0 after.
double trapezoid(double t, double t0, double ramp, double hold, double peak) {
    const double u = t - t0;
    if (u <= 0.0) return 0.0;
    if (u < ramp) return peak * u / ramp;
    if (u < ramp + hold) return peak;
    if (u < 2.0 * ramp + hold) return peak * (2.0 * ramp + hold - u) / ramp;
    return 0.0;
}

struct Profile {
    std::function<double(double)> speed;     // m/s along path
    std::function<double(double)> yaw_rate;  // rad/s (unicycle mode)
    std::function<double(double)> lateral;   // lateral offset (straight mode)
    bool straight = true;
};

struct ScriptResult {
    std::vector<Pose> poses;  // one per timeline index, script frame
    double v_now = 0.0;
    double a_now = 0.0;
};

ScriptResult integrate_profile(const Profile& prof, const SimParams& p) {
    const int steps = p.steps();
    const double t_end = (steps - 1) * p.dt;
    ScriptResult out;
    double x = 0.0, y = 0.0, psi = 0.0;
    double t = 0.0;
    int next_sample = 0;
    auto sample = [&](double tc) {
        while (next_sample < steps && next_sample * p.dt <= tc + 1e-9) {
            const double ts = next_sample * p.dt;
            if (prof.straight) {
                const double yy = prof.lateral ? prof.lateral(ts) : 0.0;
                const double h = 1e-4;
                const double vy = prof.lateral ? (prof.lateral(ts + h) - yy) / h : 0.0;
                const double vx = prof.speed(ts);
                out.poses.push_back({x, yy, vy == 0.0 ? 0.0 : std::atan2(vy, std::max(vx, 0.1))});
            } else {
                out.poses.push_back({x, y, psi});
            }
            ++next_sample;
        }
    };
    sample(0.0);
    while (t < t_end - 1e-9) {
        const double v = prof.speed(t);
        if (prof.straight) {
            x += v * kFineDt;
        } else {
            x += v * std::cos(psi) * kFineDt;
            y += v * std::sin(psi) * kFineDt;
            psi += (prof.yaw_rate ? prof.yaw_rate(t) : 0.0) * kFineDt;
        }
        t += kFineDt;
        sample(t);
    }
    sample(t_end + 1.0);
    if (static_cast<int>(out.poses.size()) != steps) throw std::logic_error("integrate_profile: sample count");

    const double t_now = (p.n_history - 1) * p.dt;
    out.v_now = prof.speed(t_now);
    out.a_now = (prof.speed(t_now + 0.05) - prof.speed(t_now - 0.05)) / 0.1;
    return out;
}

Agent make_constant_agent(Vec2 pos0, Vec2 vel, double psi, int steps, double dt) {
    Agent a;
    a.states.resize(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        a.states[static_cast<std::size_t>(i)] = {pos0.x + vel.x * i * dt, pos0.y + vel.y * i * dt, psi, vel.x,
                                                 vel.y};
    }
    return a;
}

Polyline straight_line(double y, double x0, double x1, double step = 5.0) {
    Polyline pl;
    for (double x = x0; x < x1; x += step) pl.push_back({x, y});
    pl.push_back({x1, y});
    return pl;
}

Polyline vertical_line(double x, double y0, double y1, double step = 5.0) {
    Polyline pl;
    for (double y = y0; y < y1; y += step) pl.push_back({x, y});
    pl.push_back({x, y1});
    return pl;
}

/// Route centerline from the sampled ego path, extended straight both ways.
Polyline build_route(const std::vector<Pose>& poses, double behind = 30.0, double ahead = 40.0) {
    Polyline pl;
    const Pose& first = poses.front();
    const Pose& last = poses.back();
    pl.push_back({first.x - behind * std::cos(first.psi), first.y - behind * std::sin(first.psi)});
    for (const Pose& p : poses) {
        if (!pl.empty() && (Vec2{p.x, p.y} - pl.back()).norm() < 0.25) continue;
        pl.push_back({p.x, p.y});
    }
    pl.push_back({last.x + ahead * std::cos(last.psi), last.y + ahead * std::sin(last.psi)});
    return pl;
}

void transform_to_current_frame(Scenario& scn, const Pose& current) {
    auto tf_pose = [&](const Pose& p) -> Pose {
        const Vec2 q = current.to_local({p.x, p.y});
        return {q.x, q.y, geom::wrap_angle(p.psi - current.psi)};
    };
    for (auto& p : scn.ego_history) p = tf_pose(p);
    for (auto& p : scn.ego_future) p = tf_pose(p);
    for (auto& a : scn.agents) {
        for (auto& s : a.states) {
            const Pose np = tf_pose({s.x, s.y, s.psi});
            const Vec2 nv = Vec2{s.vx, s.vy}.rotated(-current.psi);
            s = {np.x, np.y, np.psi, nv.x, nv.y};
        }
    }
    for (auto& lane : scn.map.lanes)
        for (auto& v : lane) v = current.to_local(v);
    for (auto& v : scn.map.drivable) v = current.to_local(v);
    for (auto& v : scn.map.route) v = current.to_local(v);
}

/// Cross-shaped drivable polygon: union of a horizontal and vertical strip.
Polygon cross_polygon(double hx0, double hx1, double hy0, double hy1, double vx0, double vx1, double vy0,
                      double vy1) {
    return {
        {hx0, hy0}, {vx0, hy0}, {vx0, vy0}, {vx1, vy0}, {vx1, hy0}, {hx1, hy0},
        {hx1, hy1}, {vx1, hy1}, {vx1, vy1}, {vx0, vy1}, {vx0, hy1}, {hx0, hy1},
    };
}

}  // namespace

Scenario generate_scenario(std::uint64_t seed, ScenarioKind kind, const SimParams& p) {
    Rng rng = Rng::derived(seed, "scenario", static_cast<std::uint64_t>(kind));
    Scenario scn;
    scn.seed = seed;
    scn.kind = kind;
    scn.dt = p.dt;
    scn.n_history = p.n_history;
    scn.horizon = p.horizon;

    const int steps = p.steps();
    const double t_now = (p.n_history - 1) * p.dt;

    Profile prof;
    bool intersection = false;
    double turn_sign = 0.0;

    switch (kind) {
        case ScenarioKind::LaneKeep: {
            const double v0 = rng.uniform(5.0, 10.0);
            const double y0 = rng.uniform(-0.3, 0.3);
            prof.speed = [v0](double) { return v0; };
            prof.lateral = [y0](double) { return y0; };
            scn.nav = rng.uniform() < 0.1 ? NavCommand::Unknown : NavCommand::GoStraight;
            break;
        }
        case ScenarioKind::CarFollow: {
            const double v0 = rng.uniform(6.0, 9.0);
            const double v_lead = v0 * rng.uniform(0.5, 0.75);
            const double y0 = rng.uniform(-0.25, 0.25);
            const double tau = 1.2;
            prof.speed = [=](double t) { return v_lead + (v0 - v_lead) * std::exp(-t / tau); };
            prof.lateral = [y0](double) { return y0; };
            scn.nav = NavCommand::GoStraight;
            break;
        }
        case ScenarioKind::Overtake: {
            const double v0 = rng.uniform(6.5, 9.0);
            const double y0 = rng.uniform(-0.2, 0.2);
            const double t0 = t_now + 0.1, dur = 2.4;
            prof.speed = [v0](double) { return v0; };
            prof.lateral = [=](double t) { return y0 + kLaneWidth * smoothstep5((t - t0) / dur); };
            scn.nav = NavCommand::GoStraight;
            break;
        }
        case ScenarioKind::LeftTurn:
        case ScenarioKind::RightTurn: {
            intersection = true;
            turn_sign = (kind == ScenarioKind::LeftTurn) ? 1.0 : -1.0;
            const double v0 = rng.uniform(5.5, 7.5);
            const double v_turn = rng.uniform(4.2, std::min(5.2, v0));
            const double turn_t0 = t_now + 0.5, ramp = 0.75, hold = 1.5;
            const double w_peak = turn_sign * (M_PI / 2.0) / (ramp + hold);
            if (std::abs(w_peak) > p.yawrate_bound) {
                throw std::invalid_argument("generate_scenario: infeasible config, turn needs yaw rate " +
                                            std::to_string(std::abs(w_peak)) + " > bound " +
                                            std::to_string(p.yawrate_bound));
            }
            if (v_turn * std::abs(w_peak) > p.accel_bound) {
                throw std::invalid_argument("generate_scenario: infeasible config, lateral acceleration exceeds bound");
            }
            prof.straight = false;
            prof.speed = [=](double t) {
                if (t < 0.3) return v0;
                if (t < 1.8) return v0 + (v_turn - v0) * (t - 0.3) / 1.5;
                if (t < turn_t0 + 2.0 * ramp + hold) return v_turn;
                return std::min(v_turn + 1.0 * (t - (turn_t0 + 2.0 * ramp + hold)), v0);
            };
            prof.yaw_rate = [=](double t) { return trapezoid(t, turn_t0, ramp, hold, w_peak); };
            scn.nav = (kind == ScenarioKind::LeftTurn) ? NavCommand::TurnLeft : NavCommand::TurnRight;
            break;
        }
    }

    ScriptResult script = integrate_profile(prof, p);
    scn.ego_status = {script.v_now, script.a_now};
    scn.ego_history.assign(script.poses.begin(), script.poses.begin() + p.n_history);
    scn.ego_future.assign(script.poses.begin() + p.n_history, script.poses.end());

    const double x_min = script.poses.front().x;
    const double x_max =
        std::max_element(script.poses.begin(), script.poses.end(), [](const Pose& a, const Pose& b) {
            return a.x < b.x;
        })->x;

    // --- map -------------------------------------------------------------
    if (!intersection) {
        const double hx0 = x_min - 25.0, hx1 = x_max + 40.0;
        scn.map.lanes.push_back(straight_line(0.0, hx0, hx1));
        scn.map.lanes.push_back(straight_line(kLaneWidth, hx0, hx1));
        scn.map.drivable = {{hx0, -kLaneWidth * 0.5 - kShoulder},
                            {hx1, -kLaneWidth * 0.5 - kShoulder},
                            {hx1, 1.5 * kLaneWidth + kShoulder},
                            {hx0, 1.5 * kLaneWidth + kShoulder}};
    } else {
        const Pose exit = script.poses.back();
        const double x_exit = exit.x;
        const double hx0 = x_min - 25.0, hx1 = x_exit + 35.0;
        const double hy0 = -kLaneWidth * 0.5 - kShoulder, hy1 = 1.5 * kLaneWidth + kShoulder;
        const double other_lane_x = x_exit - turn_sign * kLaneWidth;
        const double vcx = (x_exit + other_lane_x) * 0.5;
        const double vx0 = vcx - kLaneWidth - kShoulder, vx1 = vcx + kLaneWidth + kShoulder;
        const double vy0 = std::min(-35.0, exit.y - 40.0), vy1 = std::max(40.0, exit.y + 40.0);
        scn.map.lanes.push_back(straight_line(0.0, hx0, hx1));
        scn.map.lanes.push_back(straight_line(kLaneWidth, hx0, hx1));
        scn.map.lanes.push_back(vertical_line(x_exit, vy0, vy1));
        scn.map.lanes.push_back(vertical_line(other_lane_x, vy0, vy1));
        scn.map.drivable = cross_polygon(hx0, hx1, hy0, hy1, vx0, vx1, vy0, vy1);
    }
    scn.map.route = build_route(script.poses);

    // --- agents ------------------------------------------------------------
    switch (kind) {
        case ScenarioKind::LaneKeep: {
            const double v0 = prof.speed(0.0);
            scn.agents.push_back(
                make_constant_agent({x_min + rng.uniform(24.0, 36.0), 0.0}, {v0, 0.0}, 0.0, steps, p.dt));
            scn.agents.push_back(make_constant_agent({x_min + rng.uniform(-10.0, 25.0), kLaneWidth},
                                                     {rng.uniform(3.0, 12.0), 0.0}, 0.0, steps, p.dt));
            break;
        }
        case ScenarioKind::CarFollow: {
            const double v_lead = prof.speed(1e6);
            scn.agents.push_back(
                make_constant_agent({x_min + rng.uniform(14.0, 22.0), 0.0}, {v_lead, 0.0}, 0.0, steps, p.dt));
            scn.agents.push_back(make_constant_agent({x_min + rng.uniform(-5.0, 15.0), kLaneWidth},
                                                     {rng.uniform(4.0, 10.0), 0.0}, 0.0, steps, p.dt));
            break;
        }
        case ScenarioKind::Overtake: {
            const double v0 = prof.speed(0.0);
            const double v_lead = v0 * rng.uniform(0.65, 0.75);
            scn.agents.push_back(
                make_constant_agent({x_min + rng.uniform(17.0, 21.0), 0.0}, {v_lead, 0.0}, 0.0, steps, p.dt));
            scn.agents.push_back(make_constant_agent({x_min + rng.uniform(45.0, 60.0), kLaneWidth},
                                                     {v0 * rng.uniform(0.9, 1.1), 0.0}, 0.0, steps, p.dt));
            break;
        }
        case ScenarioKind::LeftTurn:
        case ScenarioKind::RightTurn: {
            const Pose exit = script.poses.back();
            const double x_exit = exit.x;
            scn.agents.push_back(make_constant_agent({x_exit + rng.uniform(12.0, 20.0), 0.0},
                                                     {rng.uniform(4.0, 7.0), 0.0}, 0.0, steps, p.dt));
            const double other_lane_x = x_exit - turn_sign * kLaneWidth;
            const double park_y = exit.y + turn_sign * rng.uniform(12.0, 18.0);
            scn.agents.push_back(
                make_constant_agent({other_lane_x, park_y}, {0.0, 0.0}, turn_sign * M_PI / 2.0, steps, p.dt));
            break;
        }
    }

    transform_to_current_frame(scn, script.poses[static_cast<std::size_t>(p.n_history - 1)]);
    return scn;
}

Scenario mirrored(const Scenario& scn) {
    Scenario m = scn;
    auto flip_pose = [](Pose& p) {
        p.y = -p.y;
        p.psi = -p.psi;
    };
    for (auto& p : m.ego_history) flip_pose(p);
    for (auto& p : m.ego_future) flip_pose(p);
    for (auto& a : m.agents)
        for (auto& s : a.states) {
            s.y = -s.y;
            s.psi = -s.psi;
            s.vy = -s.vy;
        }
    for (auto& lane : m.map.lanes)
        for (auto& v : lane) v.y = -v.y;
    for (auto& v : m.map.drivable) v.y = -v.y;
    for (auto& v : m.map.route) v.y = -v.y;
    if (m.nav == NavCommand::TurnLeft) m.nav = NavCommand::TurnRight;
    else if (m.nav == NavCommand::TurnRight) m.nav = NavCommand::TurnLeft;
    return m;
}

// ---------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------

ObservationGrid render_observation(const Scenario& scn, int t, const SimParams& p) {
    if (t < 0 || t >= scn.steps()) throw std::out_of_range("render_observation: time index");
    const int n = p.grid_size;
    ObservationGrid grid;
    grid.data = Tensor<float>({SimParams::kGridChannels, n, n});
    grid.resolution = p.grid_res;
    grid.anchor_row = p.anchor_row;
    grid.anchor_col = p.anchor_col;

    const Pose& ego = scn.ego_pose_at(t);
    const Vec2 ego_v = scn.ego_velocity_at(t);
    auto idx = [&](int ch, int r, int c) { return (static_cast<std::int64_t>(ch) * n + r) * n + c; };
    auto cell_center = [&](int r, int c) -> Vec2 {
        return ego.to_world({(r - p.anchor_row) * p.grid_res, (c - p.anchor_col) * p.grid_res});
    };

    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const Vec2 w = cell_center(r, c);
            if (geom::point_in_polygon(scn.map.drivable, w, 1e-9)) grid.data[idx(0, r, c)] = 1.0f;
            for (const auto& lane : scn.map.lanes) {
                if (geom::project_to_polyline(lane, w).distance <= 0.3) {
                    grid.data[idx(1, r, c)] = 1.0f;
                    break;
                }
            }
        }
    }

    for (const auto& agent : scn.agents) {
        const AgentState& s = agent.states[static_cast<std::size_t>(t)];
        const geom::OrientedRect rect{{s.x, s.y, s.psi}, agent.length, agent.width};
        double lo_r = 1e18, hi_r = -1e18, lo_c = 1e18, hi_c = -1e18;
        for (const Vec2& w : rect.corners()) {
            const Vec2 l = ego.to_local(w);
            lo_r = std::min(lo_r, l.x / p.grid_res + p.anchor_row);
            hi_r = std::max(hi_r, l.x / p.grid_res + p.anchor_row);
            lo_c = std::min(lo_c, l.y / p.grid_res + p.anchor_col);
            hi_c = std::max(hi_c, l.y / p.grid_res + p.anchor_col);
        }
        const int r0 = std::max(0, static_cast<int>(std::floor(lo_r)) - 1);
        const int r1 = std::min(n - 1, static_cast<int>(std::ceil(hi_r)) + 1);
        const int c0 = std::max(0, static_cast<int>(std::floor(lo_c)) - 1);
        const int c1 = std::min(n - 1, static_cast<int>(std::ceil(hi_c)) + 1);
        const Vec2 rel_v = Vec2{s.vx - ego_v.x, s.vy - ego_v.y}.rotated(-ego.psi);
        const float vfwd = static_cast<float>(std::clamp(rel_v.x / p.agent_vmax, -1.0, 1.0));
        const float vlat = static_cast<float>(std::clamp(rel_v.y / p.agent_vmax, -1.0, 1.0));
        for (int r = r0; r <= r1; ++r) {
            for (int c = c0; c <= c1; ++c) {
                const Vec2 in_agent = Pose{s.x, s.y, s.psi}.to_local(cell_center(r, c));
                if (std::abs(in_agent.x) <= agent.length * 0.5 && std::abs(in_agent.y) <= agent.width * 0.5) {
                    grid.data[idx(2, r, c)] = 1.0f;
                    grid.data[idx(3, r, c)] = vfwd;
                    grid.data[idx(4, r, c)] = vlat;
                }
            }
        }
    }
    return grid;
}

// ---------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------

OracleFeatures semantic_oracle(const Scenario& scn, int t, const SimParams& p) {
    if (t < 0 || t >= scn.steps()) throw std::out_of_range("semantic_oracle: time index");
    const Pose& ego = scn.ego_pose_at(t);
    const Vec2 ego_v = scn.ego_velocity_at(t);

    struct Entry {
        double dist;
        double f[6];
    };
    std::vector<Entry> entries;
    for (const auto& agent : scn.agents) {
        const AgentState& s = agent.states[static_cast<std::size_t>(t)];
        const Vec2 rel_p = ego.to_local({s.x, s.y});
        const Vec2 rel_v = Vec2{s.vx - ego_v.x, s.vy - ego_v.y}.rotated(-ego.psi);
        const double dist = rel_p.norm();
        const double range_rate = dist > 1e-9 ? rel_p.dot(rel_v) / dist : 0.0;
        entries.push_back(
            {dist, {rel_p.x, rel_p.y, rel_v.x, rel_v.y, range_rate, range_rate < 0.0 ? 1.0 : 0.0}});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.dist < b.dist; });

    OracleFeatures of;
    of.kind = OracleKind::Semantic;
    of.values.assign(static_cast<std::size_t>(p.sem_dim()), 0.0);
    for (int i = 0; i < p.sem_k && i < static_cast<int>(entries.size()); ++i) {
        for (int j = 0; j < 6; ++j)
            of.values[static_cast<std::size_t>(i) * 6 + static_cast<std::size_t>(j)] =
                entries[static_cast<std::size_t>(i)].f[j];
    }
    return of;
}

OracleFeatures geometric_oracle(const Scenario& scn, int t, const SimParams& p) {
    if (t < 0 || t >= scn.steps()) throw std::out_of_range("geometric_oracle: time index");
    (void)p;
    const Pose& ego = scn.ego_pose_at(t);

    const Polyline* best = &scn.map.route;
    geom::Projection proj = geom::project_to_polyline(scn.map.route, {ego.x, ego.y});
    for (const auto& lane : scn.map.lanes) {
        const auto pr = geom::project_to_polyline(lane, {ego.x, ego.y});
        if (pr.distance < proj.distance) {
            proj = pr;
            best = &lane;
        }
    }
    const Vec2 tan = geom::polyline_tangent_at(*best, proj.arc_length);
    const double heading_err = geom::wrap_angle(ego.psi - std::atan2(tan.y, tan.x));

    OracleFeatures of;
    of.kind = OracleKind::Geometric;
    of.values.resize(SimParams::kGeoDim);
    of.values[0] = proj.signed_offset;
    of.values[1] = heading_err;
    for (int i = 0; i < 5; ++i) {
        of.values[static_cast<std::size_t>(2 + i)] =
            geom::polyline_curvature_at(*best, proj.arc_length + 2.0 * (i + 1));
    }
    of.values[7] = geom::signed_distance_to_boundary(scn.map.drivable, {ego.x, ego.y});
    return of;
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

namespace {
json pose_to_json(const Pose& p) { return json::array({p.x, p.y, p.psi}); }
Pose pose_from_json(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json polyline_to_json(const Polyline& pl) {
    json out = json::array();
    for (const Vec2& v : pl) out.push_back(json::array({v.x, v.y}));
    return out;
}
Polyline polyline_from_json(const json& j) {
    Polyline pl;
    for (const auto& e : j) pl.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
    return pl;
}
}  // namespace

std::string scenario_to_json(const Scenario& scn) {
    json j;
    j["seed"] = scn.seed;
    j["kind"] = to_string(scn.kind);
    j["dt"] = scn.dt;
    j["n_history"] = scn.n_history;
    j["horizon"] = scn.horizon;
    j["nav_command"] = to_string(scn.nav);
    j["ego_status"] = {{"v", scn.ego_status.v}, {"a", scn.ego_status.a}};
    json hist = json::array(), fut = json::array();
    for (const auto& pp : scn.ego_history) hist.push_back(pose_to_json(pp));
    for (const auto& pp : scn.ego_future) fut.push_back(pose_to_json(pp));
    j["ego_history"] = hist;
    j["ego_future"] = fut;
    json agents = json::array();
    for (const auto& a : scn.agents) {
        json states = json::array();
        for (const auto& s : a.states) states.push_back(json::array({s.x, s.y, s.psi, s.vx, s.vy}));
        agents.push_back({{"length", a.length}, {"width", a.width}, {"states", states}});
    }
    j["agents"] = agents;
    json lanes = json::array();
    for (const auto& lane : scn.map.lanes) lanes.push_back(polyline_to_json(lane));
    j["map"] = {{"lanes", lanes},
                {"drivable", polyline_to_json(scn.map.drivable)},
                {"route", polyline_to_json(scn.map.route)}};
    return j.dump();
}

Scenario scenario_from_json(const std::string& text) {
    const json j = json::parse(text);
    Scenario scn;
    scn.seed = j.at("seed").get<std::uint64_t>();
    scn.kind = kind_from_string(j.at("kind").get<std::string>());
    scn.dt = j.at("dt").get<double>();
    scn.n_history = j.at("n_history").get<int>();
    scn.horizon = j.at("horizon").get<int>();
    scn.nav = nav_from_string(j.at("nav_command").get<std::string>());
    scn.ego_status.v = j.at("ego_status").at("v").get<double>();
    scn.ego_status.a = j.at("ego_status").at("a").get<double>();
    for (const auto& e : j.at("ego_history")) scn.ego_history.push_back(pose_from_json(e));
    for (const auto& e : j.at("ego_future")) scn.ego_future.push_back(pose_from_json(e));
    for (const auto& a : j.at("agents")) {
        Agent agent;
        agent.length = a.at("length").get<double>();
        agent.width = a.at("width").get<double>();
        for (const auto& s : a.at("states")) {
            agent.states.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>(),
                                    s.at(3).get<double>(), s.at(4).get<double>()});
        }
        scn.agents.push_back(std::move(agent));
    }
    for (const auto& lane : j.at("map").at("lanes")) scn.map.lanes.push_back(polyline_from_json(lane));
    scn.map.drivable = polyline_from_json(j.at("map").at("drivable"));
    scn.map.route = polyline_from_json(j.at("map").at("route"));
    return scn;
}

void save_grid(const std::filesystem::path& path, const ObservationGrid& grid) {
    json header;
    header["shape"] = grid.data.shape();
    header["resolution"] = grid.resolution;
    header["anchor"] = {grid.anchor_row, grid.anchor_col};
    const std::string htext = header.dump();
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_grid: cannot open " + path.string());
    const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(htext.data(), hlen);
    f.write(reinterpret_cast<const char*>(grid.data.data()),
            static_cast<std::streamsize>(grid.data.numel() * static_cast<std::int64_t>(sizeof(float))));
}

ObservationGrid load_grid(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_grid: cannot open " + path.string());
    std::uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    f.read(htext.data(), hlen);
    const json header = json::parse(htext);
    ObservationGrid grid;
    grid.data = Tensor<float>(header.at("shape").get<std::vector<int>>());
    grid.resolution = header.at("resolution").get<double>();
    grid.anchor_row = header.at("anchor").at(0).get<int>();
    grid.anchor_col = header.at("anchor").at(1).get<int>();
    f.read(reinterpret_cast<char*>(grid.data.data()),
           static_cast<std::streamsize>(grid.data.numel() * static_cast<std::int64_t>(sizeof(float))));
    if (!f) throw std::runtime_error("load_grid: truncated " + path.string());
    return grid;
}

// ---------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------

namespace {
/// Largest-remainder apportionment of n items over the given ratios.
std::vector<int> apportion(int n, const std::vector<double>& ratios) {
    double total = 0.0;
    for (double r : ratios) total += r;
    if (total <= 0.0) throw std::invalid_argument("apportion: ratios sum to zero");
    std::vector<int> counts(ratios.size());
    std::vector<std::pair<double, std::size_t>> rema;
    int assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double exact = n * ratios[i] / total;
        counts[i] = static_cast<int>(std::floor(exact));
        assigned += counts[i];
        rema.push_back({exact - counts[i], i});
    }
    std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (int k = 0; k < n - assigned; ++k) counts[rema[static_cast<std::size_t>(k)].second]++;
    return counts;
}
}  // namespace

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(&e);
    return out;
}

DatasetManifest build_dataset(int n, const std::vector<double>& split_ratios,
                              const std::vector<double>& kind_ratios, std::uint64_t seed) {
    if (split_ratios.size() != 3) throw std::invalid_argument("build_dataset: need 3 split ratios");
    const double rsum = split_ratios[0] + split_ratios[1] + split_ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9) throw std::invalid_argument("build_dataset: split ratios must sum to 1");
    if (kind_ratios.size() != 5) throw std::invalid_argument("build_dataset: need 5 kind ratios");

    DatasetManifest m;
    m.seed = seed;
    const std::vector<int> kind_counts = apportion(n, kind_ratios);
    std::vector<ScenarioKind> kinds;
    for (std::size_t k = 0; k < kind_counts.size(); ++k)
        for (int i = 0; i < kind_counts[k]; ++i) kinds.push_back(static_cast<ScenarioKind>(k));

    Rng rng = Rng::derived(seed, "dataset");
    for (int i = n - 1; i > 0; --i)
        std::swap(kinds[static_cast<std::size_t>(i)], kinds[static_cast<std::size_t>(rng.index(i + 1))]);

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.index(i + 1))]);

    const std::vector<int> split_counts = apportion(n, split_ratios);
    std::vector<std::string> split_of(static_cast<std::size_t>(n));
    int pos = 0;
    const char* names[3] = {"train", "val", "test"};
    for (int s = 0; s < 3; ++s)
        for (int i = 0; i < split_counts[static_cast<std::size_t>(s)]; ++i)
            split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(pos++)])] = names[s];

    char buf[64];
    for (int i = 0; i < n; ++i) {
        ManifestEntry e;
        e.id = i;
        e.seed = Rng::mix(seed, static_cast<std::uint64_t>(i) + 1);
        e.kind = kinds[static_cast<std::size_t>(i)];
        e.split = split_of[static_cast<std::size_t>(i)];
        std::snprintf(buf, sizeof(buf), "scenarios/scn_%06d.json", i);
        e.file = buf;
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
    json j;
    j["seed"] = m.seed;
    j["config_hash"] = m.config_hash;
    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back(
            {{"id", e.id}, {"seed", e.seed}, {"kind", to_string(e.kind)}, {"split", e.split}, {"file", e.file}});
    }
    j["entries"] = entries;
    return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
    const json j = json::parse(text);
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.value("config_hash", "");
    for (const auto& e : j.at("entries")) {
        ManifestEntry entry;
        entry.id = e.at("id").get<int>();
        entry.seed = e.at("seed").get<std::uint64_t>();
        entry.kind = kind_from_string(e.at("kind").get<std::string>());
        entry.split = e.at("split").get<std::string>();
        entry.file = e.at("file").get<std::string>();
        m.entries.push_back(std::move(entry));
    }
    return m;
}

}  // namespace minidrive::sim
