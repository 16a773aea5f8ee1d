#include "minidrive/prompt.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace minidrive::wm {

std::string ConditionPrompt::text() const {
    std::string out = scene;
    for (const auto* clause : {&speed, &navigation, &context, &trajectory}) {
        if (clause->has_value()) out += " . " + clause->value();
    }
    return out + " .";
}

std::string speed_phrase(double v) {
    if (v < 0.5) return "nearly stopped";
    if (v < 4.0) return "driving slowly";
    if (v < 9.0) return "driving at moderate speed";
    return "driving at high speed";
}

namespace {

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string waypoint(double x, double y) { return "( " + fmt2(x) + " , " + fmt2(y) + " )"; }

std::optional<std::string> nav_clause(sim::NavCommand nav) {
    switch (nav) {
        case sim::NavCommand::TurnLeft: return "the navigation command is turn left";
        case sim::NavCommand::GoStraight: return "the navigation command is go straight";
        case sim::NavCommand::TurnRight: return "the navigation command is turn right";
        default: return std::nullopt;  // absent command: phrase omitted
    }
}

bool future_valid(const sim::Scenario& scn) {
    if (scn.ego_future.empty()) return false;
    for (const auto& p : scn.ego_future) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.psi)) return false;
    }
    return true;
}

}  // namespace

ConditionPrompt build_condition_prompt(const sim::Scenario& scn, const PromptOptions& opt, bool with_future) {
    ConditionPrompt p;
    p.scene = opt.scene_prompt;
    if (!with_future || !future_valid(scn)) return p;  // fall back to the scene prompt alone

    p.speed = "the ego vehicle is " + speed_phrase(scn.ego_status.v);
    p.navigation = nav_clause(scn.nav);
    std::string traj = "future waypoints starting at " + waypoint(0.0, 0.0);
    const int stride = std::max(1, opt.waypoint_stride);
    for (std::size_t k = static_cast<std::size_t>(stride) - 1; k < scn.ego_future.size();
         k += static_cast<std::size_t>(stride)) {
        traj += " " + waypoint(scn.ego_future[k].x, scn.ego_future[k].y);
    }
    p.trajectory = traj;
    return p;
}

ConditionPrompt build_task_prompt(const sim::Scenario& scn, const PromptOptions& opt) {
    ConditionPrompt p;
    p.scene = opt.scene_prompt;
    p.speed = "the ego vehicle is " + speed_phrase(scn.ego_status.v);
    p.navigation = nav_clause(scn.nav);
    std::string ctx = "current speed " + fmt2(scn.ego_status.v) + " and acceleration " + fmt2(scn.ego_status.a);
    ctx += " with past waypoints";
    for (const auto& pose : scn.ego_history) ctx += " " + waypoint(pose.x, pose.y);
    p.context = ctx;
    return p;
}

PromptTokenizer::PromptTokenizer() {
    const char* words[] = {
        "<pad>", "<unk>", "a", "car", "drives", "through", "synthetic", "town", "the", "ego", "vehicle",
        "is", "nearly", "stopped", "driving", "slowly", "at", "moderate", "speed", "high", "navigation",
        "command", "turn", "left", "go", "straight", "right", "future", "waypoints", "starting", "current",
        "and", "acceleration", "with", "past", "ending", "road", "lane", "two", "intersection", "in", "on",
        "of", "traffic", "urban", "street", "dense", "(", ")", ",", ".", ":", "-", "0", "1", "2", "3", "4",
        "5", "6", "7", "8", "9",
    };
    for (const char* w : words) {
        token_to_id_[w] = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(w);
    }
}

std::pair<std::vector<int>, int> PromptTokenizer::encode(const std::string& text, int max_len) const {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string tok;
    auto push = [&](const std::string& t) {
        auto it = token_to_id_.find(t);
        ids.push_back(it == token_to_id_.end() ? kUnk : it->second);
    };
    while (is >> tok) {
        const bool numeric = tok.find_first_not_of("0123456789.-") == std::string::npos && tok.size() > 1;
        if (numeric) {
            for (char c : tok) push(std::string(1, c));
        } else {
            push(tok);
        }
    }
    if (static_cast<int>(ids.size()) > max_len) ids.resize(static_cast<std::size_t>(max_len));
    const int n = static_cast<int>(ids.size());
    ids.resize(static_cast<std::size_t>(max_len), kPad);
    return {ids, n};
}

}  // namespace minidrive::wm
