#include "minidrive/geometry.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <stdexcept>

namespace minidrive::geom {

double polyline_length(const Polyline& pl) {
    double s = 0.0;
    for (std::size_t i = 1; i < pl.size(); ++i) s += (pl[i] - pl[i - 1]).norm();
    return s;
}

Vec2 polyline_point_at(const Polyline& pl, double s) {
    if (pl.empty()) throw std::invalid_argument("polyline_point_at: empty polyline");
    if (s <= 0.0) return pl.front();
    for (std::size_t i = 1; i < pl.size(); ++i) {
        const double seg = (pl[i] - pl[i - 1]).norm();
        if (s <= seg && seg > 0.0) return pl[i - 1] + (pl[i] - pl[i - 1]) * (s / seg);
        s -= seg;
    }
    return pl.back();
}

Vec2 polyline_tangent_at(const Polyline& pl, double s) {
    if (pl.size() < 2) throw std::invalid_argument("polyline_tangent_at: need >= 2 points");
    double acc = 0.0;
    for (std::size_t i = 1; i < pl.size(); ++i) {
        const double seg = (pl[i] - pl[i - 1]).norm();
        if ((s <= acc + seg && seg > 0.0) || i + 1 == pl.size()) {
            Vec2 d = pl[i] - pl[i - 1];
            const double n = d.norm();
            return n > 0.0 ? d * (1.0 / n) : Vec2{1.0, 0.0};
        }
        acc += seg;
    }
    return {1.0, 0.0};
}

Projection project_to_polyline(const Polyline& pl, Vec2 p) {
    if (pl.size() < 2) throw std::invalid_argument("project_to_polyline: need >= 2 points");
    Projection best;
    best.distance = std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (std::size_t i = 1; i < pl.size(); ++i) {
        const Vec2 a = pl[i - 1], b = pl[i];
        const Vec2 ab = b - a;
        const double len2 = ab.dot(ab);
        double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
        const Vec2 c = a + ab * t;
        const double d = (p - c).norm();
        if (d < best.distance) {
            best.distance = d;
            best.closest = c;
            best.arc_length = acc + std::sqrt(len2) * t;
            // left of travel direction is positive
            const double side = ab.cross(p - a);
            best.signed_offset = (side >= 0.0 ? 1.0 : -1.0) * d;
        }
        acc += std::sqrt(len2);
    }
    return best;
}

double polyline_curvature_at(const Polyline& pl, double s, double ds) {
    const double total = polyline_length(pl);
    const double s0 = std::clamp(s - ds, 0.0, total);
    const double s1 = std::clamp(s + ds, 0.0, total);
    if (s1 - s0 < 1e-9) return 0.0;
    const Vec2 t0 = polyline_tangent_at(pl, s0);
    const Vec2 t1 = polyline_tangent_at(pl, s1);
    const double dpsi = wrap_angle(std::atan2(t1.y, t1.x) - std::atan2(t0.y, t0.x));
    return dpsi / (s1 - s0);
}

namespace {
double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    return (p - (a + ab * t)).norm();
}
}  // namespace

bool point_in_polygon(const Polygon& poly, Vec2 p, double boundary_eps) {
    if (poly.size() < 3) return false;
    if (boundary_eps > 0.0 && distance_to_polygon_boundary(poly, p) <= boundary_eps) return true;
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2 a = poly[i], b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double xint = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if (p.x < xint) inside = !inside;
        }
    }
    return inside;
}

double distance_to_polygon_boundary(const Polygon& poly, Vec2 p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        best = std::min(best, point_segment_distance(p, poly[j], poly[i]));
    }
    return best;
}

double signed_distance_to_boundary(const Polygon& poly, Vec2 p) {
    const double d = distance_to_polygon_boundary(poly, p);
    return point_in_polygon(poly, p, 0.0) ? d : -d;
}

std::array<Vec2, 4> OrientedRect::corners() const {
    const double hl = length / 2.0, hw = width / 2.0;
    return {pose.to_world({hl, hw}), pose.to_world({hl, -hw}), pose.to_world({-hl, -hw}), pose.to_world({-hl, hw})};
}

namespace {
bool separated_on_axis(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b, Vec2 axis) {
    double amin = std::numeric_limits<double>::infinity(), amax = -amin;
    double bmin = amin, bmax = amax;
    for (const Vec2& c : a) {
        const double v = c.dot(axis);
        amin = std::min(amin, v);
        amax = std::max(amax, v);
    }
    for (const Vec2& c : b) {
        const double v = c.dot(axis);
        bmin = std::min(bmin, v);
        bmax = std::max(bmax, v);
    }
    return amax < bmin || bmax < amin;
}
}  // namespace

bool rects_overlap(const OrientedRect& a, const OrientedRect& b) {
    const auto ca = a.corners(), cb = b.corners();
    const Vec2 axes[4] = {
        {std::cos(a.pose.psi), std::sin(a.pose.psi)},
        {-std::sin(a.pose.psi), std::cos(a.pose.psi)},
        {std::cos(b.pose.psi), std::sin(b.pose.psi)},
        {-std::sin(b.pose.psi), std::cos(b.pose.psi)},
    };
    for (const Vec2& ax : axes) {
        if (separated_on_axis(ca, cb, ax)) return false;
    }
    return true;
}

}  // namespace minidrive::geom
