#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace minidrive::geom {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double cross(Vec2 o) const { return x * o.y - y * o.x; }
    double norm() const { return std::hypot(x, y); }
    Vec2 rotated(double a) const { return {x * std::cos(a) - y * std::sin(a), x * std::sin(a) + y * std::cos(a)}; }
};

struct Pose {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;  // heading, radians

    Vec2 position() const { return {x, y}; }
    /// World coordinates of a point given in this pose's local frame.
    Vec2 to_world(Vec2 local) const {
        const Vec2 r = local.rotated(psi);
        return {x + r.x, y + r.y};
    }
    /// Local coordinates of a world point.
    Vec2 to_local(Vec2 world) const { return (world - position()).rotated(-psi); }
};

inline double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

using Polyline = std::vector<Vec2>;
using Polygon = std::vector<Vec2>;  // closed implicitly (last connects to first)

/// Arc length of a polyline.
double polyline_length(const Polyline& pl);

/// Point at arc length s (clamped to the ends).
Vec2 polyline_point_at(const Polyline& pl, double s);

/// Tangent direction (unit vector) at arc length s.
Vec2 polyline_tangent_at(const Polyline& pl, double s);

struct Projection {
    double arc_length = 0.0;      // s of the closest point
    double signed_offset = 0.0;   // >0 left of travel direction
    double distance = 0.0;        // |offset|
    Vec2 closest{};
};

/// Closest-point projection of p onto the polyline.
Projection project_to_polyline(const Polyline& pl, Vec2 p);

/// Signed curvature at arc length s from finite differences of the tangent.
double polyline_curvature_at(const Polyline& pl, double s, double ds = 1.0);

/// Even-odd point-in-polygon; points within `boundary_eps` of an edge count
/// as inside.
bool point_in_polygon(const Polygon& poly, Vec2 p, double boundary_eps = 1e-9);

/// Distance from p to the polygon boundary (edges).
double distance_to_polygon_boundary(const Polygon& poly, Vec2 p);

/// Signed distance to the drivable boundary: positive inside, negative out.
double signed_distance_to_boundary(const Polygon& poly, Vec2 p);

struct OrientedRect {
    Pose pose;      // center
    double length;  // along heading
    double width;

    std::array<Vec2, 4> corners() const;
};

/// Separating-axis overlap test for two oriented rectangles.
bool rects_overlap(const OrientedRect& a, const OrientedRect& b);

}  // namespace minidrive::geom
