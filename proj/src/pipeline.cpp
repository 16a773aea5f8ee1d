#include "minidrive/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "minidrive/prompt.hpp"
#include "minidrive/serialize.hpp"
#include "minidrive/svg.hpp"

namespace minidrive::pipeline {

using json = nlohmann::json;

// ---------------------------------------------------------------------
// Locking, small helpers
// ---------------------------------------------------------------------

DirLock::DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / ".train.lock";
    std::ofstream probe;
    if (fs::exists(path_)) {
        throw LockError("another training process holds " + path_.string() +
                        " (remove the stale lock if no process is running)");
    }
    std::ofstream f(path_, std::ios::trunc);
    f << "locked\n";
}

DirLock::~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

namespace {

double wall_seconds(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

/// Future-masked view: what the deployed model is allowed to see.
sim::Scenario mask_future(const sim::Scenario& scn) {
    sim::Scenario m = scn;
    m.ego_future.clear();
    m.horizon = 0;
    return m;
}

Tensor<float> oracle_tensor(const sim::OracleFeatures& f, int rows, int cols) {
    Tensor<float> t({rows, cols});
    for (std::int64_t i = 0; i < t.numel() && i < static_cast<std::int64_t>(f.values.size()); ++i)
        t[i] = static_cast<float>(f.values[static_cast<std::size_t>(i)]);
    return t;
}

PreparedScenario prepare_scenario(sim::Scenario scn, const RunConfig& cfg, const wm::PromptTokenizer& tok) {
    const sim::SimParams sp = cfg.sim_params();
    const wm::PromptOptions popt{cfg.scene_prompt, cfg.prompt_waypoint_stride};
    PreparedScenario item;
    const sim::Scenario masked = mask_future(scn);
    const int cur = masked.current_index();

    item.patches_current = wm::patchify<float>(sim::render_observation(masked, cur, sp), cfg.patch_size);
    std::tie(item.cond_ids, item.cond_real) =
        tok.encode(wm::build_condition_prompt(scn, popt).text(), cfg.max_cond_tokens);
    std::tie(item.task_ids, item.task_real) =
        tok.encode(wm::build_task_prompt(masked, popt).text(), cfg.max_text_tokens);
    for (int k = 0; k < scn.horizon; ++k) {
        item.sem_future.push_back(sim::semantic_oracle(scn, scn.n_history + k, sp));
        item.geo_future.push_back(sim::geometric_oracle(scn, scn.n_history + k, sp));
    }
    item.sem_now = oracle_tensor(sim::semantic_oracle(masked, cur, sp), sp.sem_k, 6);
    item.geo_now = oracle_tensor(sim::geometric_oracle(masked, cur, sp), 1, sim::SimParams::kGeoDim);
    item.hist_flat = Tensor<float>({1, 3 * scn.n_history});
    for (int i = 0; i < scn.n_history; ++i) {
        item.hist_flat[3 * i + 0] = static_cast<float>(scn.ego_history[static_cast<std::size_t>(i)].x);
        item.hist_flat[3 * i + 1] = static_cast<float>(scn.ego_history[static_cast<std::size_t>(i)].y);
        item.hist_flat[3 * i + 2] = static_cast<float>(scn.ego_history[static_cast<std::size_t>(i)].psi);
    }
    item.status = Tensor<float>({1, 2});
    item.status[0] = static_cast<float>(scn.ego_status.v);
    item.status[1] = static_cast<float>(scn.ego_status.a);
    item.gt_future = backbone::future_tensor<float>(scn);
    item.scn = std::move(scn);
    return item;
}

void write_run_report(const Paths& paths, int stage, const json& extra) {
    json j = extra;
    j["stage"] = stage;
    write_text_atomic(paths.report(stage), j.dump(2));
}

struct TrainLog {
    std::ofstream file;
    explicit TrainLog(const fs::path& path, const std::string& header, bool append) {
        fs::create_directories(path.parent_path());
        file.open(path, append ? std::ios::app : std::ios::trunc);
        if (!append) file << header << "\n";
    }
};

/// Smoothed loss from a training CSV: mean of the first/last `window`
/// entries of the given column.
std::pair<double, double> smoothed_endpoints(const fs::path& csv, int column, int window) {
    std::ifstream f(csv);
    std::string line;
    std::getline(f, line);  // header
    std::vector<double> vals;
    while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (int c = 0; c <= column; ++c) std::getline(ss, cell, ',');
        vals.push_back(std::stod(cell));
    }
    if (vals.empty()) return {0.0, 0.0};
    const int w = std::min<int>(window, static_cast<int>(vals.size()));
    double first = 0, last = 0;
    for (int i = 0; i < w; ++i) {
        first += vals[static_cast<std::size_t>(i)];
        last += vals[vals.size() - 1 - static_cast<std::size_t>(i)];
    }
    return {first / w, last / w};
}

void check_hash(const std::string& artifact, const std::string& found, const RunConfig& cfg, bool allow) {
    if (found != cfg.hash_hex()) {
        const std::string msg = artifact + " was produced under config hash " + found +
                                " but the current config hashes to " + cfg.hash_hex();
        if (!allow) throw ConfigError(msg + " (pass --force to proceed)");
        std::fprintf(stderr, "warning: %s\n", msg.c_str());
    }
}

json read_meta(const fs::path& path) {
    if (!fs::exists(path)) throw MissingPrerequisite("missing checkpoint metadata: " + path.string());
    return json::parse(read_text(path));
}

}  // namespace

// ---------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------

const std::vector<int>& Dataset::split(const std::string& name) const {
    if (name == "train") return train_idx;
    if (name == "val") return val_idx;
    if (name == "test") return test_idx;
    throw std::invalid_argument("unknown split: " + name);
}

void cmd_gen_data(const RunConfig& cfg, const Paths& paths) {
    fs::create_directories(paths.data / "scenarios");
    sim::DatasetManifest manifest = sim::build_dataset(
        cfg.n_scenarios, {cfg.split_train, cfg.split_val, cfg.split_test},
        {cfg.kind_lane_keep, cfg.kind_left_turn, cfg.kind_right_turn, cfg.kind_car_follow, cfg.kind_overtake},
        cfg.seed);
    manifest.config_hash = cfg.hash_hex();
    const sim::SimParams sp = cfg.sim_params();
    for (const auto& e : manifest.entries) {
        const sim::Scenario scn = sim::generate_scenario(e.seed, e.kind, sp);
        write_text_atomic(paths.data / e.file, sim::scenario_to_json(scn));
    }
    write_text_atomic(paths.manifest(), sim::manifest_to_json(manifest));
}

Dataset load_dataset(const RunConfig& cfg, const Paths& paths, bool allow_hash_mismatch) {
    if (!fs::exists(paths.manifest())) {
        throw MissingPrerequisite("dataset manifest not found: " + paths.manifest().string() +
                                  " (run gen-data first)");
    }
    Dataset ds;
    ds.manifest = sim::manifest_from_json(read_text(paths.manifest()));
    check_hash("dataset " + paths.manifest().string(), ds.manifest.config_hash, cfg, allow_hash_mismatch);
    const wm::PromptTokenizer tok;
    for (const auto& e : ds.manifest.entries) {
        const fs::path file = paths.data / e.file;
        if (!fs::exists(file)) throw MissingPrerequisite("scenario file missing: " + file.string());
        PreparedScenario item = prepare_scenario(sim::scenario_from_json(read_text(file)), cfg, tok);
        const int idx = static_cast<int>(ds.items.size());
        ds.items.push_back(std::move(item));
        if (e.split == "train") ds.train_idx.push_back(idx);
        else if (e.split == "val") ds.val_idx.push_back(idx);
        else ds.test_idx.push_back(idx);
    }
    return ds;
}

void compute_latents(Dataset& ds, const std::vector<int>& indices, const wm::Stage1Model<float>& model,
                     const RunConfig& cfg) {
    const sim::SimParams sp = cfg.sim_params();
    for (int idx : indices) {
        PreparedScenario& item = ds.items[static_cast<std::size_t>(idx)];
        if (!item.latents.empty()) continue;
        item.latents = Tensor<float>({item.scn.steps(), cfg.latent_dim});
        for (int t = 0; t < item.scn.steps(); ++t) {
            const Tensor<float> patches = wm::patchify<float>(sim::render_observation(item.scn, t, sp),
                                                              cfg.patch_size);
            const Tensor<float> lat = model.ae.encode_frame(patches);
            std::copy_n(lat.data(), cfg.latent_dim,
                        item.latents.data() + static_cast<std::int64_t>(t) * cfg.latent_dim);
        }
    }
}

// ---------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------

namespace {

void save_stage1(const Paths& paths, const RunConfig& cfg, wm::Stage1Model<float>& model, AdamW<float>& opt,
                 int step, std::uint64_t seed, double recon) {
    std::vector<std::pair<std::string, Tensor<float>>> tensors = dump_params(model.ae_params);
    for (auto& kv : dump_params(model.params)) tensors.push_back(kv);
    for (auto& kv : opt.state_tensors()) tensors.push_back(kv);
    write_tensor_blob(paths.stage_ckpt(1), tensors);
    json meta;
    meta["stage"] = 1;
    meta["step"] = step;
    meta["seed"] = seed;
    meta["config_hash"] = cfg.hash_hex();
    meta["recon_val_mse"] = recon;
    write_text_atomic(paths.stage_meta(1), meta.dump(2));
}

void load_adam_state(AdamW<float>& opt, const std::map<std::string, Tensor<float>>& blob,
                     const ParamStore<float>& ps, int step) {
    for (Param<float>* p : ps.params()) {
        auto m = blob.find("adam.m." + p->name);
        auto v = blob.find("adam.v." + p->name);
        if (m != blob.end() && v != blob.end()) opt.load_state(p->name, m->second, v->second);
    }
    opt.set_step_count(step);
}

/// Parameters+optimizer for stage 1 loaded from disk into a fresh model.
void load_stage1(const RunConfig& cfg, const fs::path& ckpt, const fs::path& meta_path,
                 wm::Stage1Model<float>& model, AdamW<float>* opt, int* step, bool allow_hash_mismatch) {
    if (!fs::exists(ckpt)) {
        throw MissingPrerequisite("stage-1 checkpoint not found: " + ckpt.string() + " (run train --stage 1)");
    }
    const json meta = read_meta(meta_path);
    check_hash("checkpoint " + ckpt.string(), meta.at("config_hash").get<std::string>(), cfg,
               allow_hash_mismatch);
    const auto blob = read_tensor_blob<float>(ckpt);
    load_params(model.ae_params, blob);
    load_params(model.params, blob);
    if (opt) load_adam_state(*opt, blob, model.params, meta.at("step").get<int>());
    if (step) *step = meta.at("step").get<int>();
}

double ae_validation_mse(wm::Stage1Model<float>& model, Dataset& ds, const RunConfig& cfg) {
    const sim::SimParams sp = cfg.sim_params();
    const auto& idx = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
    const int n = std::min<int>(24, static_cast<int>(idx.size()));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const PreparedScenario& item = ds.items[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        Rng rng = Rng::derived(cfg.seed, "ae.val", static_cast<std::uint64_t>(i));
        const int t = static_cast<int>(rng.index(item.scn.steps()));
        const Tensor<float> patches = wm::patchify<float>(sim::render_observation(item.scn, t, sp),
                                                          cfg.patch_size);
        Tape<float> tape;
        auto rec = model.ae.decode(tape, model.ae.encode(tape, tape.constant(patches)));
        total += mse_loss(rec, tape.constant(patches)).item();
    }
    return total / n;
}

}  // namespace

Stage1Result train_stage1(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume,
                          bool allow_hash_mismatch) {
    const auto start = std::chrono::steady_clock::now();
    DirLock lock(paths.run);
    Dataset ds = load_dataset(cfg, paths, allow_hash_mismatch);
    if (ds.train_idx.empty()) throw MissingPrerequisite("dataset has no training split");

    Rng init = Rng::derived(seed, "stage1.init");
    wm::Stage1Model<float> model(cfg, init);
    AdamW<float> opt({cfg.stage1_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    int start_step = 0;
    double recon = 0.0;

    const bool resuming = resume && fs::exists(paths.stage_ckpt(1));
    if (resuming) {
        load_stage1(cfg, paths.stage_ckpt(1), paths.stage_meta(1), model, &opt, &start_step,
                    allow_hash_mismatch);
        recon = read_meta(paths.stage_meta(1)).value("recon_val_mse", 0.0);
    } else {
        // autoencoder pretraining by reconstruction, then frozen
        AdamW<float> ae_opt({cfg.ae_lr, 0.9, 0.999, 1e-8, 0.0});
        const sim::SimParams sp = cfg.sim_params();
        for (int step = 0; step < cfg.ae_train_steps; ++step) {
            Rng rng = Rng::derived(seed, "ae.step", static_cast<std::uint64_t>(step));
            model.ae_params.zero_grad();
            Tape<float> tape;
            std::vector<Value<float>> losses;
            for (int b = 0; b < cfg.ae_batch; ++b) {
                const int idx = ds.train_idx[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(ds.train_idx.size())))];
                const PreparedScenario& item = ds.items[static_cast<std::size_t>(idx)];
                const int t = static_cast<int>(rng.index(item.scn.steps()));
                const Tensor<float> patches =
                    wm::patchify<float>(sim::render_observation(item.scn, t, sp), cfg.patch_size);
                auto rec = model.ae.decode(tape, model.ae.encode(tape, tape.constant(patches)));
                losses.push_back(mse_loss(rec, tape.constant(patches)));
            }
            Value<float> loss = losses[0];
            for (std::size_t i = 1; i < losses.size(); ++i) loss = add(loss, losses[i]);
            loss = scale(loss, 1.0f / cfg.ae_batch);
            tape.backward(loss);
            ae_opt.step(model.ae_params);
        }
        recon = ae_validation_mse(model, ds, cfg);
    }
    model.ae_params.set_trainable(false);

    std::vector<int> latent_idx = ds.train_idx;
    latent_idx.insert(latent_idx.end(), ds.val_idx.begin(), ds.val_idx.end());
    compute_latents(ds, latent_idx, model, cfg);

    TrainLog log(paths.train_log(1), "step,loss,lr", resuming);
    for (int step = start_step; step < cfg.stage1_train_steps; ++step) {
        Rng rng = Rng::derived(seed, "stage1.step", static_cast<std::uint64_t>(step));
        model.params.zero_grad();
        Tape<float> tape;
        std::vector<Value<float>> losses;
        for (int b = 0; b < cfg.stage1_batch; ++b) {
            const int idx = ds.train_idx[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(ds.train_idx.size())))];
            const PreparedScenario& item = ds.items[static_cast<std::size_t>(idx)];
            Tensor<float> z_h({cfg.n_history, cfg.latent_dim}), z_f({cfg.horizon, cfg.latent_dim});
            std::copy_n(item.latents.data(), z_h.numel(), z_h.data());
            std::copy_n(item.latents.data() + z_h.numel(), z_f.numel(), z_f.data());
            const double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
            const Tensor<float> eps = rng.normal_tensor<float>({cfg.horizon, cfg.latent_dim});
            const auto pf = wm::perturb_future(z_f, eps, sigma);
            auto cond = model.cond_encoder.forward(tape, item.cond_ids, item.cond_real);
            auto v = model.velocity.forward(tape, tape.constant(z_h), tape.constant(pf.z_tilde), cond,
                                            item.cond_real, sigma);
            losses.push_back(wm::flow_loss(tape, v, pf.v_target, cfg.n_history, cfg.horizon));
        }
        Value<float> loss = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) loss = add(loss, losses[i]);
        loss = scale(loss, 1.0f / cfg.stage1_batch);
        const double loss_val = loss.item();
        if (!std::isfinite(loss_val)) {
            throw TrainingDiverged("stage 1 diverged at step " + std::to_string(step) +
                                   " (last periodic checkpoint retained)");
        }
        tape.backward(loss);
        opt.step(model.params);
        log.file << step << "," << fmt("%.6f", loss_val) << "," << fmt("%.6g", cfg.stage1_lr) << "\n";
        if ((step + 1) % cfg.checkpoint_every == 0) {
            save_stage1(paths, cfg, model, opt, step + 1, seed, recon);
        }
    }
    log.file.flush();
    save_stage1(paths, cfg, model, opt, cfg.stage1_train_steps, seed, recon);

    const auto [first, last] = smoothed_endpoints(paths.train_log(1), 1, 50);
    Stage1Result res{first, last, recon, cfg.stage1_train_steps};
    write_run_report(paths, 1,
                     {{"steps_completed", cfg.stage1_train_steps},
                      {"initial_loss", first},
                      {"final_loss", last},
                      {"recon_val_mse", recon},
                      {"seed", seed},
                      {"wall_sec", wall_seconds(start)},
                      {"config_hash", cfg.hash_hex()}});
    return res;
}

double stage1_val_loss(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool shuffle_prompts) {
    Dataset ds = load_dataset(cfg, paths, true);
    Rng shell(0);
    wm::Stage1Model<float> model(cfg, shell);
    load_stage1(cfg, paths.stage_ckpt(1), paths.stage_meta(1), model, nullptr, nullptr, true);
    compute_latents(ds, ds.val_idx, model, cfg);

    const auto& idx = ds.val_idx;
    if (idx.empty()) throw MissingPrerequisite("dataset has no validation split");
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const PreparedScenario& item = ds.items[static_cast<std::size_t>(idx[i])];
        // rotated prompts: every item sees a different scenario's prompt
        const PreparedScenario& donor = ds.items[static_cast<std::size_t>(idx[(i + 1) % idx.size()])];
        const std::vector<int>& ids = shuffle_prompts ? donor.cond_ids : item.cond_ids;
        const int real = shuffle_prompts ? donor.cond_real : item.cond_real;
        Rng rng = Rng::derived(seed, "stage1.val", static_cast<std::uint64_t>(idx[i]));
        for (int rep = 0; rep < 2; ++rep) {
            Tensor<float> z_h({cfg.n_history, cfg.latent_dim}), z_f({cfg.horizon, cfg.latent_dim});
            std::copy_n(item.latents.data(), z_h.numel(), z_h.data());
            std::copy_n(item.latents.data() + z_h.numel(), z_f.numel(), z_f.data());
            const double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
            const Tensor<float> eps = rng.normal_tensor<float>({cfg.horizon, cfg.latent_dim});
            const auto pf = wm::perturb_future(z_f, eps, sigma);
            Tape<float> tape;
            auto cond = model.cond_encoder.forward(tape, ids, real);
            auto v = model.velocity.forward(tape, tape.constant(z_h), tape.constant(pf.z_tilde), cond, real,
                                            sigma);
            total += wm::flow_loss(tape, v, pf.v_target, cfg.n_history, cfg.horizon).item();
            ++count;
        }
    }
    return total / count;
}

// ---------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------

namespace {

struct Stage2Bundle {
    ParamStore<float> ps;
    backbone::ExpertBackbone<float> bb;
    backbone::AdapterSet<float> adapters;

    Stage2Bundle(const RunConfig& cfg, std::uint64_t init_seed) {
        Rng rng = Rng::derived(init_seed, "stage2.init");
        bb = backbone::ExpertBackbone<float>(ps, cfg, cfg.enabled_experts(), rng);
        adapters = backbone::AdapterSet<float>(ps, cfg.d_model, cfg.sim_params().sem_dim(),
                                               sim::SimParams::kGeoDim, cfg.cond_dim, cfg.horizon, rng);
    }
};

std::string experts_string(const RunConfig& cfg) {
    std::string s;
    for (const auto& name : backbone::expert_order()) {
        const auto enabled = cfg.enabled_experts();
        if (std::find(enabled.begin(), enabled.end(), name) == enabled.end()) continue;
        if (!s.empty()) s += ",";
        s += name;
    }
    return s;
}

void save_stage2(const Paths& paths, const RunConfig& cfg, Stage2Bundle& bundle, AdamW<float>& opt, int step,
                 std::uint64_t seed) {
    auto tensors = dump_params(bundle.ps);
    for (auto& kv : opt.state_tensors()) tensors.push_back(kv);
    write_tensor_blob(paths.stage_ckpt(2), tensors);
    json meta;
    meta["stage"] = 2;
    meta["step"] = step;
    meta["seed"] = seed;
    meta["config_hash"] = cfg.hash_hex();
    meta["experts"] = experts_string(cfg);
    meta["k_per_step"] = cfg.k_per_step;
    meta["horizon"] = cfg.horizon;
    meta["d_model"] = cfg.d_model;
    write_text_atomic(paths.stage_meta(2), meta.dump(2));
}

void validate_stage2_meta(const json& meta, const RunConfig& cfg) {
    if (meta.at("experts").get<std::string>() != experts_string(cfg) ||
        meta.at("k_per_step").get<int>() != cfg.k_per_step || meta.at("horizon").get<int>() != cfg.horizon ||
        meta.at("d_model").get<int>() != cfg.d_model) {
        throw ConfigError("stage-2 checkpoint expert-token configuration does not match the current config (" +
                          meta.at("experts").get<std::string>() + " vs " + experts_string(cfg) + ")");
    }
}

void load_stage2(const RunConfig& cfg, const Paths& paths, Stage2Bundle& bundle, AdamW<float>* opt, int* step,
                 bool allow_hash_mismatch) {
    if (!fs::exists(paths.stage_ckpt(2))) {
        throw MissingPrerequisite("stage-2 checkpoint not found: " + paths.stage_ckpt(2).string() +
                                  " (run train --stage 2)");
    }
    const json meta = read_meta(paths.stage_meta(2));
    check_hash("checkpoint " + paths.stage_ckpt(2).string(), meta.at("config_hash").get<std::string>(), cfg,
               allow_hash_mismatch);
    validate_stage2_meta(meta, cfg);
    const auto blob = read_tensor_blob<float>(paths.stage_ckpt(2));
    load_params(bundle.ps, blob);
    if (opt) load_adam_state(*opt, blob, bundle.ps, meta.at("step").get<int>());
    if (step) *step = meta.at("step").get<int>();
}

bool expert_enabled(const RunConfig& cfg, const std::string& name) {
    const auto enabled = cfg.enabled_experts();
    return std::find(enabled.begin(), enabled.end(), name) != enabled.end();
}

}  // namespace

Stage2Result train_stage2(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume,
                          const std::optional<fs::path>& stage1_ckpt, bool allow_hash_mismatch) {
    const auto start = std::chrono::steady_clock::now();
    DirLock lock(paths.run);
    Dataset ds = load_dataset(cfg, paths, allow_hash_mismatch);

    // frozen stage-1 world model (needed by the dynamic branch)
    Rng s1rng = Rng::derived(seed, "stage1.shell");
    wm::Stage1Model<float> stage1(cfg, s1rng);
    const fs::path s1_ckpt = stage1_ckpt.value_or(paths.stage_ckpt(1));
    const fs::path s1_meta = fs::path(s1_ckpt).replace_extension(".json");
    const bool need_dyn = expert_enabled(cfg, "dyn");
    if (need_dyn) {
        load_stage1(cfg, s1_ckpt, s1_meta, stage1, nullptr, nullptr, allow_hash_mismatch);
        stage1.ae_params.set_trainable(false);
        stage1.params.set_trainable(false);
        compute_latents(ds, ds.train_idx, stage1, cfg);
    }

    Stage2Bundle bundle(cfg, seed);
    AdamW<float> opt({cfg.stage2_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    int start_step = 0;
    const bool resuming = resume && fs::exists(paths.stage_ckpt(2));
    if (resuming) load_stage2(cfg, paths, bundle, &opt, &start_step, allow_hash_mismatch);

    TrainLog log(paths.train_log(2), "step,loss,l_sem,l_geo,l_dyn,l_traj", resuming);
    double final_loss = 0.0;
    for (int step = start_step; step < cfg.stage2_train_steps; ++step) {
        Rng rng = Rng::derived(seed, "stage2.step", static_cast<std::uint64_t>(step));
        bundle.ps.zero_grad();
        Tape<float> tape;
        Value<float> loss{};
        double parts_acc[4] = {0, 0, 0, 0};
        bool first_item = true;
        for (int b = 0; b < cfg.stage2_batch; ++b) {
            const int idx = ds.train_idx[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(ds.train_idx.size())))];
            const PreparedScenario& item = ds.items[static_cast<std::size_t>(idx)];
            const backbone::TokenLayout lay = bundle.bb.layout(item.task_real);
            auto bund = bundle.bb.forward(
                tape, bundle.bb.assemble(tape, item.patches_current, item.task_ids, lay), lay);
            std::vector<std::pair<double, Value<float>>> parts;
            if (expert_enabled(cfg, "sem")) {
                const Tensor<float> z = backbone::pool_expert_target<float>(item.sem_future, cfg.k_per_step);
                auto l = backbone::semantic_loss(tape, bund.experts.at("sem"), z, bundle.adapters,
                                                 cfg.lambda_l1, cfg.lambda_cos, cfg.smooth_l1_beta);
                parts.push_back({cfg.w_sem, l});
                parts_acc[0] += l.item();
            }
            if (expert_enabled(cfg, "geo")) {
                const Tensor<float> z = backbone::pool_expert_target<float>(item.geo_future, cfg.k_per_step);
                auto l = backbone::geometric_loss(tape, bund.experts.at("geo"), z, bundle.adapters);
                parts.push_back({cfg.w_geo, l});
                parts_acc[1] += l.item();
            }
            if (need_dyn) {
                Tensor<float> z_h({cfg.n_history, cfg.latent_dim}), z_f({cfg.horizon, cfg.latent_dim});
                std::copy_n(item.latents.data(), z_h.numel(), z_h.data());
                std::copy_n(item.latents.data() + z_h.numel(), z_f.numel(), z_f.data());
                const double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
                const Tensor<float> eps = rng.normal_tensor<float>({cfg.horizon, cfg.latent_dim});
                const auto pf = wm::perturb_future(z_f, eps, sigma);
                auto l = backbone::dynamic_loss(tape, bund.experts.at("dyn"), bundle.adapters,
                                                stage1.velocity, z_h, pf);
                parts.push_back({cfg.w_dyn, l});
                parts_acc[2] += l.item();
            }
            {
                auto pred = backbone::trajectory_head(tape, bund.experts.at("traj"), bundle.adapters,
                                                      cfg.horizon);
                auto l = backbone::trajectory_loss(tape, pred, item.gt_future);
                parts.push_back({cfg.w_traj, l});
                parts_acc[3] += l.item();
            }
            Value<float> item_loss = backbone::total_loss(parts);
            loss = first_item ? item_loss : add(loss, item_loss);
            first_item = false;
        }
        loss = scale(loss, 1.0f / cfg.stage2_batch);
        final_loss = loss.item();
        if (!std::isfinite(final_loss)) {
            throw TrainingDiverged("stage 2 diverged at step " + std::to_string(step) +
                                   " (last periodic checkpoint retained)");
        }
        tape.backward(loss);
        opt.step(bundle.ps);
        log.file << step << "," << fmt("%.6f", final_loss);
        for (double p : parts_acc) log.file << "," << fmt("%.6f", p / cfg.stage2_batch);
        log.file << "\n";
        if ((step + 1) % cfg.checkpoint_every == 0) save_stage2(paths, cfg, bundle, opt, step + 1, seed);
    }
    log.file.flush();
    save_stage2(paths, cfg, bundle, opt, cfg.stage2_train_steps, seed);
    write_run_report(paths, 2,
                     {{"steps_completed", cfg.stage2_train_steps},
                      {"final_loss", final_loss},
                      {"experts", experts_string(cfg)},
                      {"seed", seed},
                      {"wall_sec", wall_seconds(start)},
                      {"config_hash", cfg.hash_hex()}});
    return Stage2Result{final_loss, cfg.stage2_train_steps};
}

AlignmentStats stage2_alignment(const RunConfig& cfg, const Paths& paths, std::uint64_t seed,
                                const std::string& split, bool untrained, bool allow_hash_mismatch) {
    Dataset ds = load_dataset(cfg, paths, allow_hash_mismatch);
    Stage2Bundle bundle(cfg, untrained ? seed + 991 : seed);
    if (!untrained) load_stage2(cfg, paths, bundle, nullptr, nullptr, allow_hash_mismatch);

    auto row_cosine = [](const Tensor<float>& a, const Tensor<float>& b) {
        double total = 0.0;
        int rows = 0;
        for (int r = 0; r < a.dim(0); ++r) {
            double dot = 0, na = 0, nb = 0;
            for (int c = 0; c < a.dim(1); ++c) {
                dot += a.at(r, c) * b.at(r, c);
                na += a.at(r, c) * a.at(r, c);
                nb += b.at(r, c) * b.at(r, c);
            }
            if (na <= 1e-12 || nb <= 1e-12) continue;  // zero-norm targets are skipped
            total += dot / std::sqrt(na * nb);
            ++rows;
        }
        return rows ? total / rows : 0.0;
    };

    AlignmentStats stats;
    const auto& idx = ds.split(split);
    int n = 0;
    const metrics::MetricBounds bounds = cfg.metric_bounds();
    (void)bounds;
    for (int i : idx) {
        const PreparedScenario& item = ds.items[static_cast<std::size_t>(i)];
        Tape<float> tape;
        const backbone::TokenLayout lay = bundle.bb.layout(item.task_real);
        auto bund = bundle.bb.forward(tape, bundle.bb.assemble(tape, item.patches_current, item.task_ids, lay),
                                      lay);
        if (lay.has_expert("sem")) {
            const Tensor<float> z = backbone::pool_expert_target<float>(item.sem_future, cfg.k_per_step);
            stats.cos_sem += row_cosine(bundle.adapters.semantic(tape, bund.experts.at("sem")).val(), z);
        }
        if (lay.has_expert("geo")) {
            const Tensor<float> z = backbone::pool_expert_target<float>(item.geo_future, cfg.k_per_step);
            stats.cos_geo += row_cosine(bundle.adapters.geometric(tape, bund.experts.at("geo")).val(), z);
        }
        auto pred = backbone::trajectory_head(tape, bund.experts.at("traj"), bundle.adapters, cfg.horizon);
        metrics::Trajectory traj;
        for (int k = 0; k < cfg.horizon; ++k) {
            traj.push_back({pred.val().at(k, 0), pred.val().at(k, 1), pred.val().at(k, 2)});
        }
        stats.head_ade += metrics::ade_fde(traj, metrics::gt_trajectory(item.scn)).first;
        stats.baseline_ade +=
            metrics::ade_fde(metrics::baseline_constant_velocity(item.scn), metrics::gt_trajectory(item.scn))
                .first;
        ++n;
    }
    if (n == 0) throw MissingPrerequisite("split '" + split + "' is empty");
    stats.cos_sem /= n;
    stats.cos_geo /= n;
    stats.head_ade /= n;
    stats.baseline_ade /= n;
    return stats;
}

// ---------------------------------------------------------------------
// Stage 3
// ---------------------------------------------------------------------

namespace {

planner::PlannerInputs<float> planner_inputs_for(const PreparedScenario& item, Stage2Bundle& bundle,
                                                 const RunConfig& cfg) {
    planner::PlannerInputs<float> in;
    Tape<float> tape;
    const backbone::TokenLayout lay = bundle.bb.layout(item.task_real);
    auto bund = bundle.bb.forward(tape, bundle.bb.assemble(tape, item.patches_current, item.task_ids, lay), lay);
    in.ctx = bund.ctx.val().clone();
    in.ctx_real = bundle.bb.n_patches + lay.text_real;
    for (const auto& [name, seg] : lay.experts) {
        in.expert_hidden[name] = bund.experts.at(name).val().clone();
    }
    in.sem_tokens = item.sem_now;
    in.geo_tokens = item.geo_now;
    in.hist_flat = item.hist_flat;
    in.status = item.status;
    (void)cfg;
    return in;
}

void save_stage3(const Paths& paths, const RunConfig& cfg, planner::PlannerModel<float>& model,
                 AdamW<float>& opt, int step, std::uint64_t seed) {
    auto tensors = dump_params(model.params);
    for (auto& kv : opt.state_tensors()) tensors.push_back(kv);
    write_tensor_blob(paths.stage_ckpt(3), tensors);
    json meta;
    meta["stage"] = 3;
    meta["step"] = step;
    meta["seed"] = seed;
    meta["config_hash"] = cfg.hash_hex();
    meta["experts"] = experts_string(cfg);
    meta["ranges"] = {{"x_min", model.ranges.x_min}, {"x_max", model.ranges.x_max},
                      {"y_min", model.ranges.y_min}, {"y_max", model.ranges.y_max},
                      {"psi_min", model.ranges.psi_min}, {"psi_max", model.ranges.psi_max}};
    meta["fusion_alpha"] = model.fusion_alpha();
    write_text_atomic(paths.stage_meta(3), meta.dump(2));
}

void load_stage3(const RunConfig& cfg, const Paths& paths, planner::PlannerModel<float>& model,
                 AdamW<float>* opt, int* step, bool allow_hash_mismatch) {
    if (!fs::exists(paths.stage_ckpt(3))) {
        throw MissingPrerequisite("stage-3 checkpoint not found: " + paths.stage_ckpt(3).string() +
                                  " (run train --stage 3)");
    }
    const json meta = read_meta(paths.stage_meta(3));
    check_hash("checkpoint " + paths.stage_ckpt(3).string(), meta.at("config_hash").get<std::string>(), cfg,
               allow_hash_mismatch);
    if (meta.at("experts").get<std::string>() != experts_string(cfg)) {
        throw ConfigError("stage-3 checkpoint expert set does not match the current config");
    }
    load_params(model.params, read_tensor_blob<float>(paths.stage_ckpt(3)));
    const auto& r = meta.at("ranges");
    model.ranges = {r.at("x_min"), r.at("x_max"), r.at("y_min"), r.at("y_max"), r.at("psi_min"), r.at("psi_max")};
    if (opt) load_adam_state(*opt, read_tensor_blob<float>(paths.stage_ckpt(3)), model.params,
                             meta.at("step").get<int>());
    if (step) *step = meta.at("step").get<int>();
}

}  // namespace

Stage3Result train_stage3(const RunConfig& cfg, const Paths& paths, std::uint64_t seed, bool resume,
                          bool allow_hash_mismatch) {
    const auto start = std::chrono::steady_clock::now();
    DirLock lock(paths.run);
    Dataset ds = load_dataset(cfg, paths, allow_hash_mismatch);

    Stage2Bundle bundle(cfg, seed);
    load_stage2(cfg, paths, bundle, nullptr, nullptr, allow_hash_mismatch);
    bundle.ps.set_trainable(false);
    const std::uint64_t backbone_hash_before = bundle.ps.content_hash();

    std::vector<const sim::Scenario*> train_scns;
    for (int i : ds.train_idx) train_scns.push_back(&ds.items[static_cast<std::size_t>(i)].scn);
    Rng init = Rng::derived(seed, "stage3.init");
    planner::PlannerModel<float> model(cfg, cfg.d_model, init);
    model.ranges = planner::compute_ranges(train_scns);

    AdamW<float> opt({cfg.stage3_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    int start_step = 0;
    const bool resuming = resume && fs::exists(paths.stage_ckpt(3));
    if (resuming) load_stage3(cfg, paths, model, &opt, &start_step, allow_hash_mismatch);

    // the backbone is frozen, so its outputs are precomputed once per item
    std::vector<planner::PlannerInputs<float>> inputs;
    inputs.reserve(ds.train_idx.size());
    for (int i : ds.train_idx) inputs.push_back(planner_inputs_for(ds.items[static_cast<std::size_t>(i)], bundle, cfg));

    std::string alpha_header;
    for (int e = 0; e < model.n_experts(); ++e) alpha_header += ",alpha_" + model.experts[static_cast<std::size_t>(e)];
    TrainLog log(paths.train_log(3), "step,loss,l_diff,l_fusion" + alpha_header, resuming);

    double final_loss = 0.0;
    for (int step = start_step; step < cfg.stage3_train_steps; ++step) {
        Rng rng = Rng::derived(seed, "stage3.step", static_cast<std::uint64_t>(step));
        model.params.zero_grad();
        Tape<float> tape;
        Value<float> loss{};
        double diff_acc = 0, fusion_acc = 0;
        bool first = true;
        for (int b = 0; b < cfg.stage3_batch; ++b) {
            const std::size_t pick = static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(ds.train_idx.size())));
            const PreparedScenario& item = ds.items[static_cast<std::size_t>(ds.train_idx[pick])];
            const Tensor<float> a_norm = model.ranges.normalize<float>(item.gt_future);
            const double tau = planner::sample_tau(rng, cfg.logit_normal_mu, cfg.logit_normal_s);
            const Tensor<float> eps = rng.normal_tensor<float>({cfg.horizon, 3});
            const auto noisy = planner::make_noisy_action(a_norm, eps, tau);
            std::map<std::string, Tensor<float>> a_tau;
            for (const auto& name : model.experts) a_tau[name] = noisy.a_tau;
            auto preds = model.denoise(tape, inputs[pick], a_tau, tau);
            const auto pl = planner::planner_loss(tape, model, preds, a_norm, cfg.lambda_fusion);
            diff_acc += pl.diff.item();
            fusion_acc += pl.fusion.item();
            loss = first ? pl.total : add(loss, pl.total);
            first = false;
        }
        loss = scale(loss, 1.0f / cfg.stage3_batch);
        final_loss = loss.item();
        if (!std::isfinite(final_loss)) {
            throw TrainingDiverged("stage 3 diverged at step " + std::to_string(step) +
                                   " (last periodic checkpoint retained)");
        }
        tape.backward(loss);
        opt.step(model.params);
        log.file << step << "," << fmt("%.6f", final_loss) << "," << fmt("%.6f", diff_acc / cfg.stage3_batch)
                 << "," << fmt("%.6f", fusion_acc / cfg.stage3_batch);
        for (double a : model.fusion_alpha()) log.file << "," << fmt("%.6f", a);
        log.file << "\n";
        if ((step + 1) % cfg.checkpoint_every == 0) save_stage3(paths, cfg, model, opt, step + 1, seed);
    }
    log.file.flush();
    if (bundle.ps.content_hash() != backbone_hash_before) {
        throw std::logic_error("stage 3 modified the frozen backbone parameters");
    }
    save_stage3(paths, cfg, model, opt, cfg.stage3_train_steps, seed);
    write_run_report(paths, 3,
                     {{"steps_completed", cfg.stage3_train_steps},
                      {"final_loss", final_loss},
                      {"fusion_alpha", model.fusion_alpha()},
                      {"experts", experts_string(cfg)},
                      {"seed", seed},
                      {"wall_sec", wall_seconds(start)},
                      {"config_hash", cfg.hash_hex()}});
    return Stage3Result{final_loss, model.fusion_alpha(), cfg.stage3_train_steps};
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

std::string to_string(PlannerKind k) {
    switch (k) {
        case PlannerKind::GroundTruth: return "gt";
        case PlannerKind::Baseline: return "baseline";
        case PlannerKind::Stage2Head: return "head";
        default: return "planner";
    }
}

EvalSummary run_eval(const RunConfig& cfg, const Paths& paths, PlannerKind kind, const std::string& split,
                     int steps_override, bool emit_svg, bool allow_hash_mismatch) {
    Dataset ds = load_dataset(cfg, paths, allow_hash_mismatch);
    const metrics::MetricBounds bounds = cfg.metric_bounds();
    const int steps = steps_override > 0 ? steps_override : cfg.stage3_sample_steps;

    std::optional<Stage2Bundle> bundle;
    std::optional<planner::PlannerModel<float>> model;
    if (kind == PlannerKind::Stage2Head || kind == PlannerKind::Planner) {
        bundle.emplace(cfg, cfg.seed);
        load_stage2(cfg, paths, *bundle, nullptr, nullptr, allow_hash_mismatch);
    }
    if (kind == PlannerKind::Planner) {
        Rng init = Rng::derived(cfg.seed, "stage3.shell");
        model.emplace(cfg, cfg.d_model, init);
        load_stage3(cfg, paths, *model, nullptr, nullptr, allow_hash_mismatch);
    }

    auto plan = [&](const PreparedScenario& item, int id) -> metrics::Trajectory {
        switch (kind) {
            case PlannerKind::GroundTruth:
                return metrics::gt_trajectory(item.scn);
            case PlannerKind::Baseline:
                return metrics::baseline_constant_velocity(item.scn);
            case PlannerKind::Stage2Head: {
                Tape<float> tape;
                const backbone::TokenLayout lay = bundle->bb.layout(item.task_real);
                auto bund = bundle->bb.forward(
                    tape, bundle->bb.assemble(tape, item.patches_current, item.task_ids, lay), lay);
                auto pred = backbone::trajectory_head(tape, bund.experts.at("traj"), bundle->adapters,
                                                      cfg.horizon);
                metrics::Trajectory traj;
                for (int k = 0; k < cfg.horizon; ++k)
                    traj.push_back({pred.val().at(k, 0), pred.val().at(k, 1), pred.val().at(k, 2)});
                return traj;
            }
            default: {
                // per-scenario inference noise derives from (config seed, id)
                const auto in = planner_inputs_for(item, *bundle, cfg);
                return planner::infer_trajectory(*model, in, steps,
                                                 Rng::mix(cfg.seed, 0x517u + static_cast<std::uint64_t>(id)));
            }
        }
    };

    const std::vector<int>& idx = ds.split(split);
    if (idx.empty()) throw MissingPrerequisite("split '" + split + "' is empty");

    const std::string tag = to_string(kind) + "_" + split + (steps_override > 0 ? "_s" + std::to_string(steps) : "");
    fs::create_directories(paths.run);
    const fs::path csv_path = paths.run / ("eval_" + tag + ".csv");
    std::string csv = "# config_hash=" + cfg.hash_hex() + "\n";
    csv += "scenario_id,nc,dac,ttc,comfort,ep,pdms,ade,fde\n";

    EvalSummary sum;
    sum.count = static_cast<int>(idx.size());
    const fs::path svg_dir = paths.run / ("eval_" + tag + "_svg");
    if (emit_svg) fs::create_directories(svg_dir);

    // wall time covers planning + scoring only, so step-count comparisons
    // are not drowned by dataset loading
    const auto start = std::chrono::steady_clock::now();
    int svg_left = cfg.eval_max_svg;
    for (int i : idx) {
        const PreparedScenario& item = ds.items[static_cast<std::size_t>(i)];
        const metrics::Trajectory traj = plan(item, i);
        const metrics::MetricReport r = metrics::evaluate_trajectory(traj, item.scn, bounds);
        char row[256];
        std::snprintf(row, sizeof(row), "%d,%.0f,%.0f,%.0f,%.0f,%.6f,%.4f,%.6f,%.6f\n", i, r.nc, r.dac, r.ttc,
                      r.comfort, r.ep, r.pdms * 100.0, r.ade, r.fde);
        csv += row;
        sum.nc += r.nc;
        sum.dac += r.dac;
        sum.ttc += r.ttc;
        sum.comfort += r.comfort;
        sum.ep += r.ep;
        sum.pdms_x100 += r.pdms * 100.0;
        sum.ade += r.ade;
        sum.fde += r.fde;
        if (emit_svg && svg_left > 0) {
            --svg_left;
            const std::string art = svg::scenario_svg(
                item.scn, {{"gt", metrics::gt_trajectory(item.scn)},
                           {"planned", traj},
                           {"baseline", metrics::baseline_constant_velocity(item.scn)}});
            write_text_atomic(svg_dir / ("scn_" + std::to_string(i) + ".svg"), art);
        }
    }
    sum.nc /= sum.count;
    sum.dac /= sum.count;
    sum.ttc /= sum.count;
    sum.comfort /= sum.count;
    sum.ep /= sum.count;
    sum.pdms_x100 /= sum.count;
    sum.ade /= sum.count;
    sum.fde /= sum.count;
    sum.wall_sec = wall_seconds(start);
    sum.csv = csv_path;
    write_text_atomic(csv_path, csv);

    json agg;
    agg["planner"] = to_string(kind);
    agg["split"] = split;
    agg["count"] = sum.count;
    agg["steps"] = (kind == PlannerKind::Planner) ? steps : 0;
    agg["mean_nc"] = sum.nc;
    agg["mean_dac"] = sum.dac;
    agg["mean_ttc"] = sum.ttc;
    agg["mean_comfort"] = sum.comfort;
    agg["mean_ep"] = sum.ep;
    agg["mean_pdms_x100"] = sum.pdms_x100;
    agg["mean_ade"] = sum.ade;
    agg["mean_fde"] = sum.fde;
    agg["wall_sec"] = sum.wall_sec;
    agg["config_hash"] = cfg.hash_hex();
    write_text_atomic(paths.run / ("eval_" + tag + ".json"), agg.dump(2));
    return sum;
}

// ---------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------

AblateReport run_ablate(const RunConfig& cfg, const Paths& paths, const std::vector<std::string>& axes,
                        int n_seeds) {
    if (!fs::exists(paths.manifest())) cmd_gen_data(cfg, paths);

    const bool do_experts = std::find(axes.begin(), axes.end(), "experts") != axes.end();
    const bool do_steps = std::find(axes.begin(), axes.end(), "steps") != axes.end();
    const std::vector<std::string> cells = {"traj", "geo,traj", "sem,geo,traj", "sem,geo,dyn,traj"};

    AblateReport rep;
    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < n_seeds; ++s) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(s));

    // stage 1 is expert-independent: one run per seed, shared by all cells
    for (std::uint64_t seed : seeds) {
        Paths p1{paths.data, paths.run / "ablate" / ("stage1_seed" + std::to_string(seed))};
        if (!fs::exists(p1.stage_ckpt(1))) train_stage1(cfg, p1, seed, false, true);
    }

    auto cell_paths = [&](const std::string& cell, std::uint64_t seed) {
        std::string label = cell;
        std::replace(label.begin(), label.end(), ',', '+');
        return Paths{paths.data, paths.run / "ablate" / label / ("seed" + std::to_string(seed))};
    };

    if (do_experts) {
        for (const auto& cell : cells) {
            AblateCell out;
            out.axis = "experts";
            out.label = cell;
            for (std::uint64_t seed : seeds) {
                RunConfig c = cfg;
                c.experts = cell;
                const Paths cp = cell_paths(cell, seed);
                const Paths p1{paths.data, paths.run / "ablate" / ("stage1_seed" + std::to_string(seed))};
                if (!fs::exists(cp.stage_ckpt(2))) {
                    train_stage2(c, cp, seed, false, p1.stage_ckpt(1), true);
                }
                if (!fs::exists(cp.stage_ckpt(3))) train_stage3(c, cp, seed, false, true);
                const EvalSummary ev = run_eval(c, cp, PlannerKind::Planner, "test", -1, false, true);
                out.pdms.push_back(ev.pdms_x100);
                out.mean_wall_sec += ev.wall_sec;
            }
            out.mean = std::accumulate(out.pdms.begin(), out.pdms.end(), 0.0) / out.pdms.size();
            double var = 0;
            for (double v : out.pdms) var += (v - out.mean) * (v - out.mean);
            out.stddev = std::sqrt(var / out.pdms.size());
            out.mean_wall_sec /= static_cast<double>(out.pdms.size());
            rep.cells.push_back(out);
        }
    }

    if (do_steps) {
        for (int steps : {5, 10, 20}) {
            AblateCell out;
            out.axis = "steps";
            out.label = "steps=" + std::to_string(steps);
            for (std::uint64_t seed : seeds) {
                RunConfig c = cfg;
                c.experts = cells.back();
                const Paths cp = cell_paths(cells.back(), seed);
                const Paths p1{paths.data, paths.run / "ablate" / ("stage1_seed" + std::to_string(seed))};
                if (!fs::exists(cp.stage_ckpt(2))) {
                    train_stage2(c, cp, seed, false, p1.stage_ckpt(1), true);
                }
                if (!fs::exists(cp.stage_ckpt(3))) train_stage3(c, cp, seed, false, true);
                const EvalSummary ev = run_eval(c, cp, PlannerKind::Planner, "test", steps, false, true);
                out.pdms.push_back(ev.pdms_x100);
                out.mean_wall_sec += ev.wall_sec;
            }
            out.mean = std::accumulate(out.pdms.begin(), out.pdms.end(), 0.0) / out.pdms.size();
            double var = 0;
            for (double v : out.pdms) var += (v - out.mean) * (v - out.mean);
            out.stddev = std::sqrt(var / out.pdms.size());
            out.mean_wall_sec /= static_cast<double>(out.pdms.size());
            rep.cells.push_back(out);
        }
    }
    write_ablate_report(rep, cfg, paths);
    return rep;
}

void write_ablate_report(const AblateReport& rep, const RunConfig& cfg, const Paths& paths) {
    json j;
    j["config_hash"] = cfg.hash_hex();
    json cells = json::array();
    std::string csv = "axis,cell,mean_pdms,std_pdms,seeds,mean_eval_wall_sec\n";
    for (const auto& c : rep.cells) {
        cells.push_back({{"axis", c.axis},
                         {"cell", c.label},
                         {"pdms", c.pdms},
                         {"mean", c.mean},
                         {"stddev", c.stddev},
                         {"mean_eval_wall_sec", c.mean_wall_sec}});
        csv += c.axis + "," + c.label + "," + fmt("%.4f", c.mean) + "," + fmt("%.4f", c.stddev) + "," +
               std::to_string(c.pdms.size()) + "," + fmt("%.3f", c.mean_wall_sec) + "\n";
    }
    j["cells"] = cells;
    fs::create_directories(paths.run);
    write_text_atomic(paths.run / "ablate_report.json", j.dump(2));
    write_text_atomic(paths.run / "ablate_report.csv", csv);
}

// ---------------------------------------------------------------------
// Single-scenario planning
// ---------------------------------------------------------------------

void cmd_plan(const RunConfig& cfg, const Paths& paths, const fs::path& scenario_json,
              const fs::path& out_trajectory, int steps_override, bool allow_hash_mismatch) {
    if (!fs::exists(scenario_json)) throw MissingPrerequisite("scenario file not found: " + scenario_json.string());
    const wm::PromptTokenizer tok;
    PreparedScenario item = prepare_scenario(sim::scenario_from_json(read_text(scenario_json)), cfg, tok);

    Stage2Bundle bundle(cfg, cfg.seed);
    load_stage2(cfg, paths, bundle, nullptr, nullptr, allow_hash_mismatch);
    Rng init = Rng::derived(cfg.seed, "stage3.shell");
    planner::PlannerModel<float> model(cfg, cfg.d_model, init);
    load_stage3(cfg, paths, model, nullptr, nullptr, allow_hash_mismatch);

    const auto in = planner_inputs_for(item, bundle, cfg);
    const int steps = steps_override > 0 ? steps_override : cfg.stage3_sample_steps;
    const metrics::Trajectory traj = planner::infer_trajectory(model, in, steps, Rng::mix(cfg.seed, item.scn.seed));

    json j;
    j["config_hash"] = cfg.hash_hex();
    j["steps"] = steps;
    json rows = json::array();
    for (const auto& p : traj) rows.push_back(json::array({p.x, p.y, p.psi}));
    j["trajectory"] = rows;
    write_text_atomic(out_trajectory, j.dump(2));
}

}  // namespace minidrive::pipeline
