#include "minidrive/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "minidrive/serialize.hpp"

namespace minidrive {

namespace {

struct Field {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int parse_int(const std::string& key, const std::string& s) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return static_cast<int>(v);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + s + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (...) {
        throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + s + "'");
    }
}

double parse_double(const std::string& key, const std::string& s) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (...) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + s + "'");
    }
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> kFields = [] {
        std::vector<Field> f;
        auto add_int = [&](const std::string& name, int RunConfig::*ptr) {
            f.push_back({name, [ptr](const RunConfig& c) { return std::to_string(c.*ptr); },
                         [ptr, name](RunConfig& c, const std::string& s) { c.*ptr = parse_int(name, s); }});
        };
        auto add_u64 = [&](const std::string& name, std::uint64_t RunConfig::*ptr) {
            f.push_back({name, [ptr](const RunConfig& c) { return std::to_string(c.*ptr); },
                         [ptr, name](RunConfig& c, const std::string& s) { c.*ptr = parse_u64(name, s); }});
        };
        auto add_dbl = [&](const std::string& name, double RunConfig::*ptr) {
            f.push_back({name, [ptr](const RunConfig& c) { return fmt_double(c.*ptr); },
                         [ptr, name](RunConfig& c, const std::string& s) { c.*ptr = parse_double(name, s); }});
        };
        auto add_str = [&](const std::string& name, std::string RunConfig::*ptr) {
            f.push_back({name, [ptr](const RunConfig& c) { return "\"" + c.*ptr + "\""; },
                         [ptr](RunConfig& c, const std::string& s) { c.*ptr = strip_quotes(s); }});
        };

        add_u64("seed", &RunConfig::seed);
        add_int("n_scenarios", &RunConfig::n_scenarios);
        add_dbl("split_train", &RunConfig::split_train);
        add_dbl("split_val", &RunConfig::split_val);
        add_dbl("split_test", &RunConfig::split_test);
        add_dbl("kind_lane_keep", &RunConfig::kind_lane_keep);
        add_dbl("kind_left_turn", &RunConfig::kind_left_turn);
        add_dbl("kind_right_turn", &RunConfig::kind_right_turn);
        add_dbl("kind_car_follow", &RunConfig::kind_car_follow);
        add_dbl("kind_overtake", &RunConfig::kind_overtake);
        add_int("horizon", &RunConfig::horizon);
        add_int("n_history", &RunConfig::n_history);
        add_dbl("dt", &RunConfig::dt);
        add_int("grid_size", &RunConfig::grid_size);
        add_dbl("grid_res", &RunConfig::grid_res);
        add_int("anchor_row", &RunConfig::anchor_row);
        add_int("anchor_col", &RunConfig::anchor_col);
        add_int("sem_k", &RunConfig::sem_k);
        add_dbl("accel_bound", &RunConfig::accel_bound);
        add_dbl("jerk_bound", &RunConfig::jerk_bound);
        add_dbl("yawrate_bound", &RunConfig::yawrate_bound);
        add_dbl("agent_vmax", &RunConfig::agent_vmax);
        add_dbl("ego_length", &RunConfig::ego_length);
        add_dbl("ego_width", &RunConfig::ego_width);
        add_int("latent_dim", &RunConfig::latent_dim);
        add_int("cond_dim", &RunConfig::cond_dim);
        add_int("d_model", &RunConfig::d_model);
        add_int("heads", &RunConfig::heads);
        add_int("wm_layers", &RunConfig::wm_layers);
        add_int("backbone_layers", &RunConfig::backbone_layers);
        add_int("planner_layers", &RunConfig::planner_layers);
        add_int("k_per_step", &RunConfig::k_per_step);
        add_int("tau_embed_dim", &RunConfig::tau_embed_dim);
        add_int("patch_size", &RunConfig::patch_size);
        add_int("queries_per_source", &RunConfig::queries_per_source);
        add_str("scene_prompt", &RunConfig::scene_prompt);
        add_int("prompt_waypoint_stride", &RunConfig::prompt_waypoint_stride);
        add_int("max_cond_tokens", &RunConfig::max_cond_tokens);
        add_int("max_text_tokens", &RunConfig::max_text_tokens);
        add_dbl("w_dyn", &RunConfig::w_dyn);
        add_dbl("w_sem", &RunConfig::w_sem);
        add_dbl("w_geo", &RunConfig::w_geo);
        add_dbl("w_traj", &RunConfig::w_traj);
        add_dbl("lambda_l1", &RunConfig::lambda_l1);
        add_dbl("lambda_cos", &RunConfig::lambda_cos);
        add_dbl("lambda_fusion", &RunConfig::lambda_fusion);
        add_dbl("smooth_l1_beta", &RunConfig::smooth_l1_beta);
        add_int("stage1_sample_steps", &RunConfig::stage1_sample_steps);
        add_int("stage3_sample_steps", &RunConfig::stage3_sample_steps);
        add_dbl("sigma_min", &RunConfig::sigma_min);
        add_dbl("sigma_max", &RunConfig::sigma_max);
        add_dbl("logit_normal_mu", &RunConfig::logit_normal_mu);
        add_dbl("logit_normal_s", &RunConfig::logit_normal_s);
        add_int("ae_train_steps", &RunConfig::ae_train_steps);
        add_int("ae_batch", &RunConfig::ae_batch);
        add_dbl("ae_lr", &RunConfig::ae_lr);
        add_dbl("ae_recon_threshold", &RunConfig::ae_recon_threshold);
        add_int("stage1_train_steps", &RunConfig::stage1_train_steps);
        add_int("stage1_batch", &RunConfig::stage1_batch);
        add_dbl("stage1_lr", &RunConfig::stage1_lr);
        add_int("stage2_train_steps", &RunConfig::stage2_train_steps);
        add_int("stage2_batch", &RunConfig::stage2_batch);
        add_dbl("stage2_lr", &RunConfig::stage2_lr);
        add_int("stage3_train_steps", &RunConfig::stage3_train_steps);
        add_int("stage3_batch", &RunConfig::stage3_batch);
        add_dbl("stage3_lr", &RunConfig::stage3_lr);
        add_dbl("weight_decay", &RunConfig::weight_decay);
        add_int("checkpoint_every", &RunConfig::checkpoint_every);
        add_str("experts", &RunConfig::experts);
        add_dbl("ttc_threshold", &RunConfig::ttc_threshold);
        add_dbl("ttc_horizon", &RunConfig::ttc_horizon);
        add_dbl("pdms_w_ttc", &RunConfig::pdms_w_ttc);
        add_dbl("pdms_w_comfort", &RunConfig::pdms_w_comfort);
        add_dbl("pdms_w_ep", &RunConfig::pdms_w_ep);
        add_int("eval_max_svg", &RunConfig::eval_max_svg);
        return f;
    }();
    return kFields;
}

const Field* find_field(const std::string& name) {
    for (const auto& f : fields())
        if (f.name == name) return &f;
    return nullptr;
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value': " + line);
        }
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        const Field* f = find_field(key);
        if (!f) throw ConfigError("config: unknown key '" + key + "' on line " + std::to_string(lineno));
        f->set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config: file not found: " + path.string());
    return from_text(read_text(path));
}

std::string RunConfig::to_text() const {
    std::vector<std::pair<std::string, std::string>> kv;
    for (const auto& f : fields()) kv.emplace_back(f.name, f.get(*this));
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

std::string RunConfig::hash_hex() const {
    const std::string text = to_text();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (n_scenarios <= 0) fail("n_scenarios must be positive");
    if (std::abs(split_train + split_val + split_test - 1.0) > 1e-9) fail("split ratios must sum to 1");
    const double ks = kind_lane_keep + kind_left_turn + kind_right_turn + kind_car_follow + kind_overtake;
    if (std::abs(ks - 1.0) > 1e-9) fail("kind ratios must sum to 1");
    if (horizon < 2) fail("horizon must be >= 2");
    if (n_history < 2) fail("n_history must be >= 2");
    if (dt <= 0.0) fail("dt must be positive");
    if (grid_size < 8) fail("grid_size must be >= 8");
    if (grid_res <= 0.0) fail("grid_res must be positive");
    if (anchor_row < 0 || anchor_row >= grid_size) fail("anchor_row out of grid");
    if (anchor_col < 0 || anchor_col >= grid_size) fail("anchor_col out of grid");
    if (grid_size % patch_size != 0) fail("patch_size must divide grid_size");
    if (d_model % heads != 0) fail("d_model must be divisible by heads");
    if (cond_dim % heads != 0) fail("cond_dim must be divisible by heads");
    if (k_per_step < 1) fail("k_per_step must be >= 1");
    if (w_dyn < 0 || w_sem < 0 || w_geo < 0 || w_traj < 0) fail("loss weights must be >= 0");
    if (lambda_l1 < 0 || lambda_cos < 0 || lambda_fusion < 0) fail("lambda weights must be >= 0");
    if (smooth_l1_beta <= 0) fail("smooth_l1_beta must be > 0");
    if (stage1_sample_steps < 1 || stage3_sample_steps < 1) fail("sampler steps must be >= 1");
    if (!(sigma_min > 0.0 && sigma_max < 1.0 && sigma_min < sigma_max)) fail("need 0 < sigma_min < sigma_max < 1");
    if (logit_normal_s <= 0.0) fail("logit_normal_s must be > 0");
    if (ttc_threshold <= 0.0 || ttc_horizon < ttc_threshold) fail("need 0 < ttc_threshold <= ttc_horizon");
    for (const auto& e : enabled_experts()) {
        if (e != "sem" && e != "geo" && e != "dyn" && e != "traj") fail("unknown expert '" + e + "'");
    }
    if (enabled_experts().empty()) fail("experts must enable at least one branch");
}

sim::SimParams RunConfig::sim_params() const {
    sim::SimParams p;
    p.horizon = horizon;
    p.n_history = n_history;
    p.dt = dt;
    p.grid_size = grid_size;
    p.grid_res = grid_res;
    p.anchor_row = anchor_row;
    p.anchor_col = anchor_col;
    p.sem_k = sem_k;
    p.accel_bound = accel_bound;
    p.jerk_bound = jerk_bound;
    p.yawrate_bound = yawrate_bound;
    p.agent_vmax = agent_vmax;
    p.ego_length = ego_length;
    p.ego_width = ego_width;
    return p;
}

metrics::MetricBounds RunConfig::metric_bounds() const {
    metrics::MetricBounds b;
    b.ttc_threshold = ttc_threshold;
    b.ttc_horizon = ttc_horizon;
    b.accel_bound = accel_bound;
    b.jerk_bound = jerk_bound;
    b.yawrate_bound = yawrate_bound;
    b.ego_length = ego_length;
    b.ego_width = ego_width;
    b.w_ttc = pdms_w_ttc;
    b.w_comfort = pdms_w_comfort;
    b.w_ep = pdms_w_ep;
    return b;
}

std::vector<std::string> RunConfig::enabled_experts() const {
    std::vector<std::string> out;
    std::string cur;
    for (char c : experts + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

}  // namespace minidrive
