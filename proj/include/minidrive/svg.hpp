#pragma once

#include <string>
#include <vector>

#include "minidrive/drivesim.hpp"
#include "minidrive/geometry.hpp"
#include "minidrive/metrics.hpp"

namespace minidrive::svg {

/// Minimal SVG assembler in world coordinates (y flipped at render time).
class SvgWriter {
public:
    void add_polygon(const std::vector<geom::Vec2>& pts, const std::string& fill, const std::string& stroke);
    void add_path(const std::vector<geom::Vec2>& pts, const std::string& stroke, double width,
                  const std::string& dash = "");
    /// Trajectories are emitted as <polyline> elements; map geometry uses
    /// <path>/<polygon>, so polyline count == trajectory count.
    void add_trajectory(const std::vector<geom::Pose>& poses, const std::string& stroke, double width);
    void add_circle(geom::Vec2 center, double radius, const std::string& fill);

    std::string render(double px_per_meter = 8.0, double margin = 4.0) const;

private:
    struct Shape {
        enum class Kind { Polygon, Path, Trajectory, Circle } kind;
        std::vector<geom::Vec2> pts;
        std::string fill, stroke, dash;
        double width = 1.0;
        double radius = 0.0;
    };
    std::vector<Shape> shapes_;
};

/// Scenario overview: drivable area, lanes, agents at the current frame,
/// plus any number of labelled trajectories.
std::string scenario_svg(const sim::Scenario& scn,
                         const std::vector<std::pair<std::string, metrics::Trajectory>>& trajectories);

/// Simple line chart of (step, value) pairs.
std::string curve_svg(const std::vector<std::pair<double, double>>& points, const std::string& label);

}  // namespace minidrive::svg
