#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "minidrive/pipeline.hpp"
#include "minidrive/serialize.hpp"

using namespace minidrive;
using namespace minidrive::pipeline;
namespace fs = std::filesystem;

namespace {

RunConfig micro_config() {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.n_scenarios = 24;
    cfg.split_train = 0.7;
    cfg.split_val = 0.15;
    cfg.split_test = 0.15;
    cfg.grid_size = 32;
    cfg.anchor_row = 8;
    cfg.anchor_col = 16;
    cfg.patch_size = 16;
    cfg.latent_dim = 8;
    cfg.cond_dim = 16;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.wm_layers = 1;
    cfg.backbone_layers = 1;
    cfg.planner_layers = 1;
    cfg.max_cond_tokens = 48;
    cfg.max_text_tokens = 48;
    cfg.queries_per_source = 4;
    cfg.ae_train_steps = 10;
    cfg.ae_batch = 2;
    cfg.stage1_train_steps = 14;
    cfg.stage1_batch = 2;
    cfg.stage2_train_steps = 10;
    cfg.stage2_batch = 2;
    cfg.stage3_train_steps = 10;
    cfg.stage3_batch = 2;
    cfg.checkpoint_every = 7;
    cfg.stage3_sample_steps = 3;
    cfg.eval_max_svg = 2;
    cfg.validate();
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int count_lines(const fs::path& p) {
    std::ifstream f(p);
    int n = 0;
    std::string line;
    while (std::getline(f, line)) ++n;
    return n;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("gen-data: deterministic manifest, one file per scenario") {
    const RunConfig cfg = micro_config();
    TempDir dir("minidrive_pipe_gen");
    const Paths paths{dir.path, dir.path};
    cmd_gen_data(cfg, paths);
    CHECK(fs::exists(paths.manifest()));
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir.path / "scenarios")) {
        (void)e;
        ++files;
    }
    CHECK(files == cfg.n_scenarios);

    const std::string m1 = read_text(paths.manifest());
    cmd_gen_data(cfg, paths);
    CHECK(read_text(paths.manifest()) == m1);

    const Dataset ds = load_dataset(cfg, paths);
    CHECK(static_cast<int>(ds.items.size()) == cfg.n_scenarios);
    CHECK(ds.train_idx.size() + ds.val_idx.size() + ds.test_idx.size() == static_cast<std::size_t>(cfg.n_scenarios));
}

TEST_CASE("load_dataset: missing manifest and hash mismatch") {
    const RunConfig cfg = micro_config();
    TempDir dir("minidrive_pipe_missing");
    const Paths paths{dir.path, dir.path};
    CHECK_THROWS_AS(load_dataset(cfg, paths), MissingPrerequisite);
    cmd_gen_data(cfg, paths);
    RunConfig other = cfg;
    other.stage1_lr *= 2.0;  // different hash
    CHECK_THROWS_AS(load_dataset(other, paths), ConfigError);
    CHECK_NOTHROW(load_dataset(other, paths, true));
}

TEST_CASE("full micro pipeline: training chain, determinism, reports") {
    const RunConfig cfg = micro_config();
    TempDir dir("minidrive_pipe_full");
    const Paths paths{dir.path, dir.path};
    cmd_gen_data(cfg, paths);

    // stage ordering is enforced
    CHECK_THROWS_WITH_AS(train_stage3(cfg, paths, cfg.seed), doctest::Contains("stage-2"), MissingPrerequisite);
    CHECK_THROWS_WITH_AS(train_stage2(cfg, paths, cfg.seed), doctest::Contains("stage-1"), MissingPrerequisite);

    const Stage1Result s1 = train_stage1(cfg, paths, cfg.seed);
    CHECK(fs::exists(paths.stage_ckpt(1)));
    CHECK(count_lines(paths.train_log(1)) == cfg.stage1_train_steps + 1);  // header + rows
    CHECK(s1.recon_val_mse >= 0.0);

    // identical seed/config in a fresh directory: identical loss curve
    {
        TempDir dir2("minidrive_pipe_repeat");
        const Paths paths2{dir2.path, dir2.path};
        cmd_gen_data(cfg, paths2);
        train_stage1(cfg, paths2, cfg.seed);
        CHECK(read_text(paths2.train_log(1)) == read_text(paths.train_log(1)));
    }

    // checkpoint reload gives identical validation losses
    const double val_a = stage1_val_loss(cfg, paths, cfg.seed, false);
    const double val_b = stage1_val_loss(cfg, paths, cfg.seed, false);
    CHECK(val_a == val_b);
    const double val_shuffled = stage1_val_loss(cfg, paths, cfg.seed, true);
    CHECK(std::isfinite(val_shuffled));

    const Stage2Result s2 = train_stage2(cfg, paths, cfg.seed);
    CHECK(fs::exists(paths.stage_ckpt(2)));
    CHECK(std::isfinite(s2.final_loss));

    // expert-token configuration is validated on load
    RunConfig wrong = cfg;
    wrong.experts = "traj";
    CHECK_THROWS_AS(train_stage3(wrong, paths, cfg.seed, false, true), ConfigError);

    const Stage3Result s3 = train_stage3(cfg, paths, cfg.seed);
    CHECK(fs::exists(paths.stage_ckpt(3)));
    CHECK(s3.fusion_alpha.size() == 4);
    double alpha_sum = 0;
    for (double a : s3.fusion_alpha) {
        alpha_sum += a;
        CHECK(a > 0.0);
    }
    CHECK(alpha_sum == doctest::Approx(1.0).epsilon(1e-6));

    // fusion weights start uniform and stay normalized through training
    const auto log3 = read_lines(paths.train_log(3));
    REQUIRE(log3.size() >= 2);
    {
        std::stringstream ss(log3[1]);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 8);  // step, loss, diff, fusion, 4 alphas
        for (int e = 0; e < 4; ++e) {
            CHECK(std::stod(cells[static_cast<std::size_t>(4 + e)]) == doctest::Approx(0.25).epsilon(2e-3));
        }
        for (std::size_t row = 1; row < log3.size(); ++row) {
            std::stringstream rs(log3[row]);
            std::vector<double> vals;
            std::string c;
            while (std::getline(rs, c, ',')) vals.push_back(std::stod(c));
            CHECK(vals[4] + vals[5] + vals[6] + vals[7] == doctest::Approx(1.0).epsilon(1e-5));
        }
    }

    // stage-3 report carries the fusion weights
    const std::string rep3 = read_text(paths.report(3));
    CHECK(rep3.find("fusion_alpha") != std::string::npos);

    // ground truth as planner: perfect PDMS on every scenario, byte-identical reruns
    const EvalSummary gt1 = run_eval(cfg, paths, PlannerKind::GroundTruth, "test");
    CHECK(gt1.pdms_x100 == doctest::Approx(100.0));
    const std::string csv1 = read_text(gt1.csv);
    const EvalSummary gt2 = run_eval(cfg, paths, PlannerKind::GroundTruth, "test");
    CHECK(read_text(gt2.csv) == csv1);
    for (const auto& line : read_lines(gt1.csv)) {
        if (line.empty() || line[0] == '#' || line.rfind("scenario_id", 0) == 0) continue;
        CHECK(line.find(",100.0000,") != std::string::npos);
    }

    // trained planners produce finite metrics deterministically
    const EvalSummary head = run_eval(cfg, paths, PlannerKind::Stage2Head, "test");
    CHECK(std::isfinite(head.ade));
    const EvalSummary plan1 = run_eval(cfg, paths, PlannerKind::Planner, "test");
    const EvalSummary plan2 = run_eval(cfg, paths, PlannerKind::Planner, "test");
    CHECK(read_text(plan1.csv) == read_text(plan2.csv));

    // SVG overlays: exactly three trajectory polylines per scenario
    const EvalSummary svg_eval = run_eval(cfg, paths, PlannerKind::Planner, "test", -1, true);
    (void)svg_eval;
    const fs::path svg_dir = dir.path / "eval_planner_test_svg";
    REQUIRE(fs::exists(svg_dir));
    int svg_count = 0;
    for (const auto& e : fs::directory_iterator(svg_dir)) {
        const std::string body = read_text(e.path());
        std::size_t at = 0;
        int polylines = 0;
        while ((at = body.find("<polyline", at)) != std::string::npos) {
            ++polylines;
            at += 9;
        }
        CHECK(polylines == 3);
        ++svg_count;
    }
    CHECK(svg_count == cfg.eval_max_svg);

    // stage-2 alignment stats are computable on the held-out split
    const AlignmentStats st = stage2_alignment(cfg, paths, cfg.seed, "test");
    CHECK(std::isfinite(st.cos_sem));
    CHECK(std::isfinite(st.baseline_ade));

    // single-scenario planning CLI surface
    const fs::path scn_file = dir.path / "scenarios" / "scn_000000.json";
    const fs::path traj_file = dir.path / "plan.json";
    cmd_plan(cfg, paths, scn_file, traj_file);
    const auto traj_json = nlohmann::json::parse(read_text(traj_file));
    CHECK(traj_json.at("trajectory").size() == static_cast<std::size_t>(cfg.horizon));
}

TEST_CASE("resume continues the loss curve exactly") {
    RunConfig cfg = micro_config();
    TempDir dir_a("minidrive_pipe_resume_a");
    TempDir dir_b("minidrive_pipe_resume_b");
    const Paths pa{dir_a.path, dir_a.path};
    const Paths pb{dir_b.path, dir_b.path};
    cmd_gen_data(cfg, pa);
    cmd_gen_data(cfg, pb);

    train_stage1(cfg, pa, cfg.seed);  // uninterrupted reference

    RunConfig half = cfg;
    half.stage1_train_steps = 7;  // "interrupted" run
    train_stage1(half, pb, cfg.seed, false, true);
    train_stage1(cfg, pb, cfg.seed, true, true);  // resume to the full step count

    const auto la = read_lines(pa.train_log(1));
    const auto lb = read_lines(pb.train_log(1));
    REQUIRE(la.size() == lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i] == lb[i]);
}

TEST_CASE("training lock is exclusive") {
    const RunConfig cfg = micro_config();
    TempDir dir("minidrive_pipe_lock");
    const Paths paths{dir.path, dir.path};
    cmd_gen_data(cfg, paths);
    std::ofstream lock(dir.path / ".train.lock");
    lock << "held\n";
    lock.close();
    CHECK_THROWS_AS(train_stage1(cfg, paths, cfg.seed), LockError);
}
