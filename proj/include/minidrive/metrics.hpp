#pragma once

#include <vector>

#include "minidrive/drivesim.hpp"
#include "minidrive/geometry.hpp"

namespace minidrive::metrics {

/// Planned ego trajectory: one pose per future step, world frame.
using Trajectory = std::vector<geom::Pose>;

struct MetricBounds {
    double ttc_threshold = 1.0;   // seconds
    double ttc_horizon = 3.0;     // projection window, seconds
    double accel_bound = 8.0;     // m/s^2
    double jerk_bound = 10.0;     // m/s^3
    double yawrate_bound = 1.0;   // rad/s
    double ego_length = 4.5;
    double ego_width = 2.0;
    // PDMS aggregation weights for the inner quality sum
    double w_ttc = 5.0;
    double w_comfort = 2.0;
    double w_ep = 5.0;
};

struct MetricReport {
    double nc = 1.0;       // {0,1}
    double dac = 1.0;      // {0,1}
    double ttc = 1.0;      // {0,1}
    double comfort = 1.0;  // {0,1}
    double ep = 1.0;       // [0,1]
    double pdms = 1.0;     // [0,1]
    double ade = 0.0;      // meters
    double fde = 0.0;      // meters
};

/// 1 iff the swept ego footprint never overlaps any agent footprint.
double metric_nc(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b);

/// 1 iff every footprint corner stays inside the drivable polygon
/// (boundary inclusive).
double metric_dac(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b);

/// 1 iff constant-velocity projections from every waypoint keep the
/// minimum time-to-overlap above the threshold.
double metric_ttc(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b);

/// 1 iff finite-difference acceleration, jerk and yaw rate stay in bounds.
double metric_comfort(const Trajectory& traj, double dt, const MetricBounds& b);

/// Ratio of route-centerline arc progress to ground-truth progress, in [0,1].
double metric_ep(const Trajectory& traj, const sim::Scenario& scn);

/// NC * DAC * (w_ttc*TTC + w_comf*Comfort + w_ep*EP) / (w_ttc+w_comf+w_ep).
double pdms(double nc, double dac, double ttc, double comfort, double ep, const MetricBounds& b);

std::pair<double, double> ade_fde(const Trajectory& traj, const Trajectory& gt);

MetricReport evaluate_trajectory(const Trajectory& traj, const sim::Scenario& scn, const MetricBounds& b);

/// Extrapolates the current speed and heading for T steps.
Trajectory baseline_constant_velocity(const sim::Scenario& scn);

/// Ground truth as a trajectory.
Trajectory gt_trajectory(const sim::Scenario& scn);

}  // namespace minidrive::metrics
