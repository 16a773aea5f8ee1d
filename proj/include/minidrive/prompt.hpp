#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "minidrive/drivesim.hpp"

namespace minidrive::wm {

/// Structured natural-language condition. Clause order is fixed:
/// scene, speed, navigation, context (past state, stage-2 prompts only),
/// trajectory (future waypoints, stage-1 prompts only).
struct ConditionPrompt {
    std::string scene;
    std::optional<std::string> speed;
    std::optional<std::string> navigation;
    std::optional<std::string> context;
    std::optional<std::string> trajectory;

    std::string text() const;
};

struct PromptOptions {
    std::string scene_prompt = "a car drives through a synthetic town";
    int waypoint_stride = 2;
};

/// Coarse speed phrase; thresholds in m/s.
std::string speed_phrase(double v);

/// Stage-1 condition: scene/speed/navigation plus the future trajectory
/// serialized in the ego frame, anchored at the origin, 2 decimals, no
/// headings. With no valid future the prompt falls back to the scene
/// clause alone.
ConditionPrompt build_condition_prompt(const sim::Scenario& scn, const PromptOptions& opt,
                                       bool with_future = true);

/// Stage-2 task prompt: no future information; past waypoints and current
/// speed/acceleration instead.
ConditionPrompt build_task_prompt(const sim::Scenario& scn, const PromptOptions& opt);

/// Whitespace tokenizer with a small fixed vocabulary; numeric tokens are
/// split into sign/digit/point symbols. Unknown words map to <unk>.
class PromptTokenizer {
public:
    PromptTokenizer();

    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }

    /// Token ids, truncated/padded to max_len; returns the real length.
    std::pair<std::vector<int>, int> encode(const std::string& text, int max_len) const;

private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

}  // namespace minidrive::wm
