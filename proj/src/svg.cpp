#include "minidrive/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

namespace minidrive::svg {

namespace {
std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}
}  // namespace

void SvgWriter::add_polygon(const std::vector<geom::Vec2>& pts, const std::string& fill,
                            const std::string& stroke) {
    shapes_.push_back({Shape::Kind::Polygon, pts, fill, stroke, "", 1.0, 0.0});
}

void SvgWriter::add_path(const std::vector<geom::Vec2>& pts, const std::string& stroke, double width,
                         const std::string& dash) {
    shapes_.push_back({Shape::Kind::Path, pts, "none", stroke, dash, width, 0.0});
}

void SvgWriter::add_trajectory(const std::vector<geom::Pose>& poses, const std::string& stroke, double width) {
    std::vector<geom::Vec2> pts;
    for (const auto& p : poses) pts.push_back({p.x, p.y});
    shapes_.push_back({Shape::Kind::Trajectory, pts, "none", stroke, "", width, 0.0});
}

void SvgWriter::add_circle(geom::Vec2 center, double radius, const std::string& fill) {
    shapes_.push_back({Shape::Kind::Circle, {center}, fill, "none", "", 1.0, radius});
}

std::string SvgWriter::render(double px_per_meter, double margin) const {
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
    for (const auto& s : shapes_) {
        for (const auto& p : s.pts) {
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y);
            y1 = std::max(y1, p.y);
        }
    }
    if (shapes_.empty()) x0 = y0 = 0, x1 = y1 = 1;
    x0 -= margin; y0 -= margin; x1 += margin; y1 += margin;
    const double w = (x1 - x0) * px_per_meter, h = (y1 - y0) * px_per_meter;
    auto tx = [&](geom::Vec2 p) {
        return std::make_pair((p.x - x0) * px_per_meter, (y1 - p.y) * px_per_meter);
    };

    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
                      "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
    for (const auto& s : shapes_) {
        if (s.kind == Shape::Kind::Circle) {
            const auto [cx, cy] = tx(s.pts[0]);
            out += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" +
                   num(s.radius * px_per_meter) + "\" fill=\"" + s.fill + "\"/>\n";
            continue;
        }
        std::string pts;
        for (const auto& p : s.pts) {
            const auto [px, py] = tx(p);
            pts += num(px) + "," + num(py) + " ";
        }
        if (s.kind == Shape::Kind::Polygon) {
            out += "<polygon points=\"" + pts + "\" fill=\"" + s.fill + "\" stroke=\"" + s.stroke +
                   "\" stroke-width=\"1\"/>\n";
        } else if (s.kind == Shape::Kind::Path) {
            std::string d;
            for (std::size_t i = 0; i < s.pts.size(); ++i) {
                const auto [px, py] = tx(s.pts[i]);
                d += (i == 0 ? "M" : "L") + num(px) + " " + num(py) + " ";
            }
            out += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + s.stroke + "\" stroke-width=\"" +
                   num(s.width) + "\"" + (s.dash.empty() ? "" : " stroke-dasharray=\"" + s.dash + "\"") + "/>\n";
        } else {
            out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + s.stroke +
                   "\" stroke-width=\"" + num(s.width) + "\"/>\n";
        }
    }
    out += "</svg>\n";
    return out;
}

std::string scenario_svg(const sim::Scenario& scn,
                         const std::vector<std::pair<std::string, metrics::Trajectory>>& trajectories) {
    SvgWriter w;
    w.add_polygon(scn.map.drivable, "#e8e8e8", "#999999");
    for (const auto& lane : scn.map.lanes) w.add_path(lane, "#bbbbbb", 0.8, "6,4");
    w.add_path(scn.map.route, "#88aaff", 0.8, "2,3");
    const int t = scn.current_index();
    for (const auto& agent : scn.agents) {
        const auto& s = agent.states[static_cast<std::size_t>(t)];
        const geom::OrientedRect rect{{s.x, s.y, s.psi}, agent.length, agent.width};
        const auto corners = rect.corners();
        w.add_polygon({corners.begin(), corners.end()}, "#d9a0a0", "#aa5555");
    }
    w.add_circle({0.0, 0.0}, 0.8, "#3355cc");
    const char* colors[] = {"#2e8b2e", "#cc3333", "#3366cc", "#cc9933"};
    int ci = 0;
    for (const auto& [label, traj] : trajectories) {
        w.add_trajectory(traj, colors[ci % 4], 1.5);
        ++ci;
    }
    return w.render();
}

std::string curve_svg(const std::vector<std::pair<double, double>>& points, const std::string& label) {
    SvgWriter w;
    if (!points.empty()) {
        double xmax = 1.0, ymax = 1e-12;
        for (const auto& [x, y] : points) {
            xmax = std::max(xmax, x);
            ymax = std::max(ymax, y);
        }
        std::vector<geom::Vec2> pts;
        for (const auto& [x, y] : points) pts.push_back({100.0 * x / xmax, 60.0 * y / ymax});
        w.add_path({{0, 0}, {100, 0}}, "#999999", 0.4);
        w.add_path({{0, 0}, {0, 60}}, "#999999", 0.4);
        w.add_path(pts, "#cc3333", 0.8);
    }
    (void)label;
    return w.render(6.0, 6.0);
}

}  // namespace minidrive::svg
