#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "arlab/arlab.hpp"

using namespace arlab;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out;
    int64_t seed = -1;
    int64_t steps = -1;
    double cfg_weight = -1;
    int64_t ar_iters = -1;
    std::string head;
    std::string backbone;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--seed", f.seed, "run seed (overrides config)");
    cmd->add_option("--out", f.out, "output directory (overrides config)");
    cmd->add_option("--steps", f.steps,
                    "training steps (train) or denoising steps (sample/oracle)");
    cmd->add_option("--cfg-weight", f.cfg_weight, "terminal CFG weight");
    cmd->add_option("--ar-iters", f.ar_iters, "autoregressive iterations K");
    cmd->add_option("--head", f.head, "head kind: shortcut | fm | cvae");
    cmd->add_option("--backbone", f.backbone, "backbone kind: masked | causal");
}

RunConfig resolve(const CommonFlags& f, bool steps_are_training) {
    RunConfig c = f.config_path.empty() ? RunConfig{} : config::load(f.config_path);
    if (f.seed >= 0) c.seed = uint64_t(f.seed);
    if (!f.out.empty()) c.out_dir = f.out;
    if (f.steps > 0) (steps_are_training ? c.steps : c.sample_steps) = f.steps;
    if (f.cfg_weight >= 0) c.cfg_weight = f.cfg_weight;
    if (f.ar_iters > 0) c.ar_iters = f.ar_iters;
    if (!f.head.empty()) c.head = f.head;
    if (!f.backbone.empty()) c.backbone = f.backbone;
    c.finalize();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Autoregressive generation laboratory for continuous token grids"};
    app.require_subcommand(1);

    CommonFlags f;
    std::string checkpoint;
    std::string ckpt_shortcut, ckpt_fm;
    bool corrupt_backward = false;

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of all primitives");
    add_common(gradcheck, f);
    gradcheck->add_flag("--corrupt-backward", corrupt_backward,
                        "test fixture: corrupt one backward rule so the audit must fail");

    CLI::App* train = app.add_subcommand("train", "train a model; emits loss CSV and checkpoints");
    add_common(train, f);

    CLI::App* sample = app.add_subcommand("sample", "generate token grids from a checkpoint");
    add_common(sample, f);
    sample->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();

    CLI::App* ablate = app.add_subcommand("ablate-steps", "sweep denoising steps for trained heads");
    add_common(ablate, f);
    ablate->add_option("--ckpt-shortcut", ckpt_shortcut, "shortcut-head checkpoint");
    ablate->add_option("--ckpt-fm", ckpt_fm, "flow-matching-only checkpoint");

    CLI::App* cost = app.add_subcommand("cost", "emit the analytic inference-cost grid");
    add_common(cost, f);

    CLI::App* oracle = app.add_subcommand("oracle", "conditional-mean comparison against the Gaussian oracle");
    add_common(oracle, f);
    oracle->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gradcheck->parsed()) {
            auto rows = trainer::gradcheck_cmd(corrupt_backward, &std::cout);
            bool ok = true;
            for (auto& r : rows) ok = ok && r.pass;
            std::cout << (ok ? "gradcheck: all passed" : "gradcheck: FAILURES") << "\n";
            return ok ? 0 : 1;
        }
        if (train->parsed()) {
            RunConfig c = resolve(f, true);
            auto outputs = trainer::train(c, &std::cout);
            std::cout << "final checkpoint: " << outputs.final_checkpoint << "\n";
            return 0;
        }
        if (sample->parsed()) {
            RunConfig c = resolve(f, false);
            trainer::sample_cmd(c, checkpoint, &std::cout);
            return 0;
        }
        if (ablate->parsed()) {
            RunConfig c = resolve(f, false);
            std::vector<std::pair<std::string, std::string>> kinds;
            if (!ckpt_shortcut.empty()) kinds.emplace_back("shortcut", ckpt_shortcut);
            if (!ckpt_fm.empty()) kinds.emplace_back("fm", ckpt_fm);
            if (kinds.empty()) throw std::runtime_error("ablate-steps: provide at least one checkpoint");
            trainer::ablate_cmd(c, kinds, &std::cout);
            return 0;
        }
        if (cost->parsed()) {
            RunConfig c = resolve(f, false);
            trainer::cost_cmd(c, &std::cout);
            return 0;
        }
        if (oracle->parsed()) {
            RunConfig c = resolve(f, false);
            auto report = trainer::oracle_cmd(c, checkpoint, &std::cout);
            std::cout << "calibration mean err " << report.calibration_mean_err << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
