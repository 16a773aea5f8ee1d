#include "minidrive/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace minidrive::metrics {

using geom::OrientedRect;
using geom::Pose;
using geom::Vec2;

namespace {

Pose lerp_pose(const Pose& a, const Pose& b, double u) {
    return {a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u, a.psi + geom::wrap_angle(b.psi - a.psi) * u};
}

Pose agent_pose_at(const sim::Agent& agent, int t) {
    const auto& s = agent.states[static_cast<std::size_t>(t)];
    return {s.x, s.y, s.psi};
}

/// Trajectory with the scenario's current pose prepended, so velocities at
/// the first waypoint are well defined.
std::vector<Pose> with_current(const Trajectory& traj, const sim::Scenario& scn) {
    std::vector<Pose> out;
    out.reserve(traj.size() + 1);
    out.push_back(scn.ego_history.back());
    out.insert(out.end(), traj.begin(), traj.end());
    return out;
}

}  // namespace

double metric_nc(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b) {
    const int t0 = scn.current_index();
    const std::vector<Pose> path = with_current(traj, scn);
    constexpr int kSub = 5;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        const int ta = t0 + static_cast<int>(k);
        const int tb = ta + 1;
        if (tb >= scn.steps()) break;
        for (int s = 1; s <= kSub; ++s) {
            const double u = static_cast<double>(s) / kSub;
            const OrientedRect ego_rect{lerp_pose(path[k], path[k + 1], u), b.ego_length, b.ego_width};
            for (const auto& agent : scn.agents) {
                const OrientedRect agent_rect{lerp_pose(agent_pose_at(agent, ta), agent_pose_at(agent, tb), u),
                                              agent.length, agent.width};
                if (geom::rects_overlap(ego_rect, agent_rect)) return 0.0;
            }
        }
    }
    return 1.0;
}

double metric_dac(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b) {
    if (scn.map.drivable.size() < 3) throw std::invalid_argument("metric_dac: drivable polygon missing");
    for (const Pose& p : traj) {
        const OrientedRect rect{p, b.ego_length, b.ego_width};
        for (const Vec2& corner : rect.corners()) {
            if (!geom::point_in_polygon(scn.map.drivable, corner, 1e-6)) return 0.0;
        }
    }
    return 1.0;
}

double metric_ttc(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b) {
    const int t0 = scn.current_index();
    const std::vector<Pose> path = with_current(traj, scn);
    constexpr double kTauStep = 0.1;
    for (std::size_t k = 1; k < path.size(); ++k) {
        const int t = t0 + static_cast<int>(k);
        if (t >= scn.steps()) break;
        const Vec2 ego_v{(path[k].x - path[k - 1].x) / scn.dt, (path[k].y - path[k - 1].y) / scn.dt};
        for (const auto& agent : scn.agents) {
            const auto& s = agent.states[static_cast<std::size_t>(t)];
            for (double tau = kTauStep; tau <= b.ttc_horizon + 1e-9; tau += kTauStep) {
                const OrientedRect ego_rect{{path[k].x + ego_v.x * tau, path[k].y + ego_v.y * tau, path[k].psi},
                                            b.ego_length, b.ego_width};
                const OrientedRect agent_rect{{s.x + s.vx * tau, s.y + s.vy * tau, s.psi}, agent.length,
                                              agent.width};
                if (geom::rects_overlap(ego_rect, agent_rect)) {
                    if (tau < b.ttc_threshold) return 0.0;
                    break;  // first overlap for this agent is past the threshold
                }
            }
        }
    }
    return 1.0;
}

double metric_comfort(const Trajectory& traj, double dt, const MetricBounds& b) {
    if (traj.size() < 3) throw std::invalid_argument("metric_comfort: need at least 3 waypoints");
    const std::vector<Pose>& path = traj;
    std::vector<Vec2> vel;
    for (std::size_t k = 1; k < path.size(); ++k) {
        vel.push_back({(path[k].x - path[k - 1].x) / dt, (path[k].y - path[k - 1].y) / dt});
        const double yaw_rate = geom::wrap_angle(path[k].psi - path[k - 1].psi) / dt;
        if (std::abs(yaw_rate) > b.yawrate_bound) return 0.0;
    }
    std::vector<Vec2> acc;
    for (std::size_t k = 1; k < vel.size(); ++k) {
        const Vec2 a{(vel[k].x - vel[k - 1].x) / dt, (vel[k].y - vel[k - 1].y) / dt};
        if (a.norm() > b.accel_bound) return 0.0;
        acc.push_back(a);
    }
    for (std::size_t k = 1; k < acc.size(); ++k) {
        const Vec2 j{(acc[k].x - acc[k - 1].x) / dt, (acc[k].y - acc[k - 1].y) / dt};
        if (j.norm() > b.jerk_bound) return 0.0;
    }
    return 1.0;
}

double metric_ep(const Trajectory& traj, const sim::Scenario& scn) {
    if (scn.map.route.size() < 2) throw std::invalid_argument("metric_ep: route centerline missing");
    const Pose& cur = scn.ego_history.back();
    const double s0 = geom::project_to_polyline(scn.map.route, {cur.x, cur.y}).arc_length;
    const Pose& end = traj.back();
    const Pose& gt_end = scn.ego_future.back();
    const double prog = geom::project_to_polyline(scn.map.route, {end.x, end.y}).arc_length - s0;
    const double gt_prog = geom::project_to_polyline(scn.map.route, {gt_end.x, gt_end.y}).arc_length - s0;
    if (gt_prog < 0.1) return 1.0;  // no meaningful progress to compare against
    return std::clamp(prog / gt_prog, 0.0, 1.0);
}

double pdms(double nc, double dac, double ttc, double comfort, double ep, const MetricBounds& b) {
    const double wsum = b.w_ttc + b.w_comfort + b.w_ep;
    return nc * dac * (b.w_ttc * ttc + b.w_comfort * comfort + b.w_ep * ep) / wsum;
}

std::pair<double, double> ade_fde(const Trajectory& traj, const Trajectory& gt) {
    if (traj.size() != gt.size()) throw std::invalid_argument("ade_fde: length mismatch");
    if (traj.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (std::size_t i = 0; i < traj.size(); ++i) {
        sum += std::hypot(traj[i].x - gt[i].x, traj[i].y - gt[i].y);
    }
    const double fde = std::hypot(traj.back().x - gt.back().x, traj.back().y - gt.back().y);
    return {sum / static_cast<double>(traj.size()), fde};
}

MetricReport evaluate_trajectory(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b) {
    MetricReport r;
    r.nc = metric_nc(traj, scn, b);
    r.dac = metric_dac(traj, scn, b);
    r.ttc = metric_ttc(traj, scn, b);
    r.comfort = metric_comfort(traj, scn.dt, b);
    r.ep = metric_ep(traj, scn);
    r.pdms = pdms(r.nc, r.dac, r.ttc, r.comfort, r.ep, b);
    std::tie(r.ade, r.fde) = ade_fde(traj, gt_trajectory(scn));
    return r;
}

Trajectory baseline_constant_velocity(const sim::Scenario& scn) {
    Trajectory out;
    const double v = scn.ego_status.v;
    for (int k = 1; k <= scn.horizon; ++k) out.push_back({v * scn.dt * k, 0.0, 0.0});
    return out;
}

Trajectory gt_trajectory(const sim::Scenario& scn) { return scn.ego_future; }

}  // namespace minidrive::metrics
