// Command-line entry point: dataset generation, the three training stages,
// evaluation, ablations and plots, all driven by one flat config file.
//
// Exit codes: 0 success, 2 config error, 3 missing prerequisite, 1 other.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>

#include "minidrive/config.hpp"
#include "minidrive/pipeline.hpp"
#include "minidrive/serialize.hpp"
#include "minidrive/svg.hpp"

namespace fs = std::filesystem;
using namespace minidrive;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::string data_dir;
    std::optional<std::uint64_t> seed;
    bool force = false;

    RunConfig load() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
        if (seed) cfg.seed = *seed;
        cfg.validate();
        return cfg;
    }

    pipeline::Paths paths() const {
        return pipeline::Paths{data_dir.empty() ? fs::path(out_dir) : fs::path(data_dir), fs::path(out_dir)};
    }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (flat key = value)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--data", args.data_dir, "dataset directory (defaults to --out)");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_flag("--force", args.force, "proceed across config-hash mismatches");
}

int dispatch(const std::function<void()>& fn) {
    try {
        fn();
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const pipeline::MissingPrerequisite& e) {
        std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

void print_summary(const pipeline::EvalSummary& s, const std::string& name) {
    std::printf("%s: n=%d pdms=%.2f nc=%.3f dac=%.3f ttc=%.3f comfort=%.3f ep=%.3f ade=%.3f fde=%.3f\n",
                name.c_str(), s.count, s.pdms_x100, s.nc, s.dac, s.ttc, s.comfort, s.ep, s.ade, s.fde);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"minidrive: synthetic driving world model, expert-token backbone, diffusion planner"};
    app.require_subcommand(1);

    CommonArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen-data", "generate the scenario dataset");
    add_common(gen, gen_args);

    CommonArgs train_args;
    int train_stage = 1;
    bool train_resume = false;
    CLI::App* train = app.add_subcommand("train", "train one pipeline stage");
    train->add_option("--stage", train_stage, "stage to train (1, 2 or 3)")->required()->check(CLI::Range(1, 3));
    train->add_flag("--resume", train_resume, "resume from the stage checkpoint");
    add_common(train, train_args);

    CommonArgs eval_args;
    std::string eval_split = "test";
    std::string eval_planner = "planner";
    int eval_steps = -1;
    bool eval_svg = false;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a planner on a split");
    eval->add_option("--split", eval_split, "train | val | test");
    eval->add_option("--planner", eval_planner, "gt | baseline | head | planner");
    eval->add_option("--steps", eval_steps, "denoising steps override");
    eval->add_flag("--svg", eval_svg, "emit trajectory-overlay SVGs");
    add_common(eval, eval_args);

    CommonArgs ablate_args;
    std::string ablate_axes = "experts,steps";
    int ablate_seeds = 3;
    CLI::App* ablate = app.add_subcommand("ablate", "run ablation grids");
    ablate->add_option("--axes", ablate_axes, "comma list of axes: experts, steps");
    ablate->add_option("--seeds", ablate_seeds, "number of seeds per cell");
    add_common(ablate, ablate_args);

    CommonArgs plot_args;
    std::string plot_scenario, plot_traj, plot_log, plot_out = "plot.svg";
    CLI::App* plot = app.add_subcommand("plot", "emit an SVG for a scenario or a training log");
    plot->add_option("--scenario", plot_scenario, "scenario JSON to draw");
    plot->add_option("--traj", plot_traj, "trajectory JSON overlay");
    plot->add_option("--log", plot_log, "training-log CSV to chart");
    plot->add_option("--out-file", plot_out, "output SVG path");
    add_common(plot, plot_args);

    CommonArgs plan_args;
    std::string plan_scenario, plan_out = "trajectory.json";
    int plan_steps = -1;
    CLI::App* plan = app.add_subcommand("plan", "plan a single scenario JSON with the trained planner");
    plan->add_option("--scenario", plan_scenario, "scenario JSON")->required();
    plan->add_option("--out-file", plan_out, "trajectory JSON path");
    plan->add_option("--steps", plan_steps, "denoising steps override");
    add_common(plan, plan_args);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        return dispatch([&] {
            const RunConfig cfg = gen_args.load();
            pipeline::cmd_gen_data(cfg, gen_args.paths());
            std::printf("dataset: %d scenarios under %s (config %s)\n", cfg.n_scenarios,
                        gen_args.paths().data.string().c_str(), cfg.hash_hex().c_str());
        });
    }
    if (train->parsed()) {
        return dispatch([&] {
            const RunConfig cfg = train_args.load();
            const std::uint64_t seed = train_args.seed.value_or(cfg.seed);
            const pipeline::Paths paths = train_args.paths();
            if (train_stage == 1) {
                const auto r = pipeline::train_stage1(cfg, paths, seed, train_resume, train_args.force);
                std::printf("stage 1 done: loss %.4f -> %.4f (recon %.4f)\n", r.initial_loss, r.final_loss,
                            r.recon_val_mse);
            } else if (train_stage == 2) {
                const auto r = pipeline::train_stage2(cfg, paths, seed, train_resume, std::nullopt,
                                                      train_args.force);
                std::printf("stage 2 done: loss %.4f\n", r.final_loss);
            } else {
                const auto r = pipeline::train_stage3(cfg, paths, seed, train_resume, train_args.force);
                std::printf("stage 3 done: loss %.4f, fusion alpha:", r.final_loss);
                for (double a : r.fusion_alpha) std::printf(" %.3f", a);
                std::printf("\n");
            }
        });
    }
    if (eval->parsed()) {
        return dispatch([&] {
            const RunConfig cfg = eval_args.load();
            pipeline::PlannerKind kind;
            if (eval_planner == "gt") kind = pipeline::PlannerKind::GroundTruth;
            else if (eval_planner == "baseline") kind = pipeline::PlannerKind::Baseline;
            else if (eval_planner == "head") kind = pipeline::PlannerKind::Stage2Head;
            else if (eval_planner == "planner") kind = pipeline::PlannerKind::Planner;
            else throw ConfigError("unknown planner '" + eval_planner + "'");
            const auto s = pipeline::run_eval(cfg, eval_args.paths(), kind, eval_split, eval_steps, eval_svg,
                                              eval_args.force);
            print_summary(s, eval_planner + "/" + eval_split);
        });
    }
    if (ablate->parsed()) {
        return dispatch([&] {
            const RunConfig cfg = ablate_args.load();
            std::vector<std::string> axes;
            std::string cur;
            for (char c : ablate_axes + ",") {
                if (c == ',') {
                    if (!cur.empty()) axes.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            const auto rep = pipeline::run_ablate(cfg, ablate_args.paths(), axes, ablate_seeds);
            for (const auto& cell : rep.cells) {
                std::printf("%s %-18s pdms %.2f +- %.2f\n", cell.axis.c_str(), cell.label.c_str(), cell.mean,
                            cell.stddev);
            }
        });
    }
    if (plot->parsed()) {
        return dispatch([&] {
            if (!plot_scenario.empty()) {
                const sim::Scenario scn = sim::scenario_from_json(read_text(plot_scenario));
                std::vector<std::pair<std::string, metrics::Trajectory>> trajs;
                trajs.push_back({"gt", metrics::gt_trajectory(scn)});
                if (!plot_traj.empty()) {
                    const auto j = nlohmann::json::parse(read_text(plot_traj));
                    metrics::Trajectory t;
                    for (const auto& row : j.at("trajectory"))
                        t.push_back({row.at(0).get<double>(), row.at(1).get<double>(), row.at(2).get<double>()});
                    trajs.push_back({"planned", t});
                }
                write_text_atomic(plot_out, svg::scenario_svg(scn, trajs));
            } else if (!plot_log.empty()) {
                std::ifstream f(plot_log);
                if (!f) throw pipeline::MissingPrerequisite("training log not found: " + plot_log);
                std::string line;
                std::getline(f, line);
                std::vector<std::pair<double, double>> pts;
                while (std::getline(f, line)) {
                    const auto c1 = line.find(',');
                    const auto c2 = line.find(',', c1 + 1);
                    pts.push_back({std::stod(line.substr(0, c1)), std::stod(line.substr(c1 + 1, c2 - c1 - 1))});
                }
                write_text_atomic(plot_out, svg::curve_svg(pts, "loss"));
            } else {
                throw ConfigError("plot: pass --scenario or --log");
            }
            std::printf("wrote %s\n", plot_out.c_str());
        });
    }
    if (plan->parsed()) {
        return dispatch([&] {
            const RunConfig cfg = plan_args.load();
            pipeline::cmd_plan(cfg, plan_args.paths(), plan_scenario, plan_out, plan_steps, plan_args.force);
            std::printf("wrote %s\n", plan_out.c_str());
        });
    }
    return 0;
}
