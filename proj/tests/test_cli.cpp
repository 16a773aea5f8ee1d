#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "minidrive/config.hpp"
#include "minidrive/serialize.hpp"

// Process-level checks of the CLI surface: flags and exit codes.
// The binary path arrives through a compile definition.

namespace fs = std::filesystem;
using namespace minidrive;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MINIDRIVE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_micro_config(const fs::path& p, int extra_bad_key = 0) {
    std::ofstream f(p);
    f << "seed = 3\nn_scenarios = 8\ngrid_size = 32\nanchor_row = 8\nanchor_col = 16\n"
         "latent_dim = 8\ncond_dim = 16\nd_model = 32\nheads = 2\nwm_layers = 1\n"
         "backbone_layers = 1\nplanner_layers = 1\nmax_cond_tokens = 48\nmax_text_tokens = 48\n"
         "queries_per_source = 2\nae_train_steps = 2\nae_batch = 1\nstage1_train_steps = 2\n"
         "stage1_batch = 1\nstage2_train_steps = 2\nstage2_batch = 1\nstage3_train_steps = 2\n"
         "stage3_batch = 1\nstage3_sample_steps = 2\n";
    if (extra_bad_key) f << "definitely_not_a_key = 1\n";
}

}  // namespace

TEST_CASE("config errors exit with code 2") {
    TempDir dir("minidrive_cli_cfgerr");
    CHECK(run_cli("gen-data --config " + (dir.path / "does_not_exist.toml").string()) == 2);
    write_micro_config(dir.path / "bad.toml", 1);
    CHECK(run_cli("gen-data --config " + (dir.path / "bad.toml").string() + " --out " + dir.path.string()) == 2);
}

TEST_CASE("missing prerequisites exit with code 3") {
    TempDir dir("minidrive_cli_prereq");
    write_micro_config(dir.path / "cfg.toml");
    const std::string common = " --config " + (dir.path / "cfg.toml").string() + " --out " + dir.path.string();
    CHECK(run_cli("train --stage 1" + common) == 3);  // no dataset yet
    CHECK(run_cli("gen-data" + common) == 0);
    CHECK(run_cli("train --stage 2" + common) == 3);  // stage 1 missing
    CHECK(run_cli("train --stage 3" + common) == 3);
    CHECK(run_cli("eval --planner planner --split test" + common) == 3);
}

TEST_CASE("happy path: gen, train 1-3, eval, plan, plot") {
    TempDir dir("minidrive_cli_happy");
    write_micro_config(dir.path / "cfg.toml");
    const std::string common = " --config " + (dir.path / "cfg.toml").string() + " --out " + dir.path.string();
    REQUIRE(run_cli("gen-data" + common) == 0);
    CHECK(run_cli("train --stage 1" + common) == 0);
    CHECK(run_cli("train --stage 2" + common) == 0);
    CHECK(run_cli("train --stage 3" + common) == 0);
    CHECK(run_cli("eval --planner gt --split test" + common) == 0);
    CHECK(fs::exists(dir.path / "eval_gt_test.csv"));
    const fs::path scn = dir.path / "scenarios" / "scn_000000.json";
    CHECK(run_cli("plan --scenario " + scn.string() + " --out-file " + (dir.path / "traj.json").string() +
                  common) == 0);
    CHECK(run_cli("plot --scenario " + scn.string() + " --traj " + (dir.path / "traj.json").string() +
                  " --out-file " + (dir.path / "scene.svg").string() + common) == 0);
    CHECK(fs::exists(dir.path / "scene.svg"));
    CHECK(run_cli("plot" + common) == 2);  // neither --scenario nor --log
}
