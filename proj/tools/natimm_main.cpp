#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "natimm/trainer.hpp"

using namespace natimm;

namespace {

struct CliOptions {
    std::string config_path;
    std::string seed;
    std::string delta;
    std::string steps;
    std::string out;
    std::string ckpt;
};

void add_common(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--config", opt.config_path, "run configuration file")->required();
    cmd->add_option("--seed", opt.seed, "override the run seed");
    cmd->add_option("--delta", opt.delta, "visual position increment: auto, sweep, or 1, 1/2, ... 1/256");
    cmd->add_option("--steps", opt.steps, "override the training step count");
    cmd->add_option("--out", opt.out, "output checkpoint path");
    cmd->add_option("--ckpt", opt.ckpt, "input checkpoint path");
}

RunConfig build_config(Stage stage, const CliOptions& opt) {
    RunConfig cfg = parse_config_file(opt.config_path);
    cfg.stage = stage;
    if (!opt.seed.empty()) apply_config_kv(cfg, "seed", opt.seed);
    if (!opt.steps.empty()) apply_config_kv(cfg, "steps", opt.steps);
    if (!opt.out.empty()) cfg.ckpt_out = opt.out;
    if (!opt.ckpt.empty()) cfg.ckpt_in = opt.ckpt;
    if (!opt.delta.empty()) {
        if (opt.delta == "auto") {
            cfg.delta_policy = DeltaPolicy::automatic;
        } else if (opt.delta == "sweep") {
            cfg.delta_policy = DeltaPolicy::sweep;
        } else {
            cfg.delta_policy = DeltaPolicy::fixed;
            cfg.delta_value = parse_delta(opt.delta);
        }
    }
    return cfg;
}

void print_summary(const RunSummary& s) {
    std::cout << stage_str(s.stage) << ": ran " << s.steps_run << " steps";
    if (s.skipped_steps) std::cout << " (" << s.skipped_steps << " skipped)";
    if (s.steps_run) std::cout << ", final loss " << s.final_loss;
    if (!s.ckpt_out.empty()) std::cout << ", checkpoint -> " << s.ckpt_out;
    if (!s.metrics_out.empty()) std::cout << ", metrics -> " << s.metrics_out;
    std::cout << "\n";
}

int dispatch(Stage stage, const CliOptions& opt) {
    RunConfig cfg = build_config(stage, opt);
    switch (stage) {
        case Stage::pretrain: print_summary(run_pretrain(cfg)); break;
        case Stage::sft: print_summary(run_sft(cfg)); break;
        case Stage::mpo: print_summary(run_mpo(cfg)); break;
        case Stage::prm: print_summary(run_prm(cfg)); break;
        case Stage::eval: {
            EvalReport rep = run_eval(cfg);
            for (const auto& r : rep.rows) {
                std::printf("delta=%-8s text_acc=%.4f caption_acc=%.4f caption_em=%.4f reasoning_acc=%.4f margin=%.4f\n",
                            r.delta_label.c_str(), r.text_accuracy, r.caption_accuracy, r.caption_exact_match,
                            r.reasoning_answer_accuracy, r.margin_mean);
            }
            break;
        }
        case Stage::bon: {
            BonSummary s = run_bon(cfg);
            std::cout << "bon: N=" << cfg.bon_n << " critic=" << cfg.bon_critic << " accuracy=" << s.accuracy << " ("
                      << s.correct << "/" << s.questions << ")";
            if (!s.report_path.empty()) std::cout << ", report -> " << s.report_path;
            std::cout << "\n";
            break;
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"natimm: a desk-scale multimodal language model training stack"};
    app.require_subcommand(1);

    const std::pair<const char*, Stage> stages[] = {
        {"pretrain", Stage::pretrain}, {"sft", Stage::sft}, {"mpo", Stage::mpo},
        {"prm", Stage::prm},           {"bon", Stage::bon}, {"eval", Stage::eval},
    };
    CliOptions opts[6];
    for (size_t i = 0; i < 6; ++i) {
        CLI::App* cmd = app.add_subcommand(stages[i].first);
        add_common(cmd, opts[i]);
    }

    CLI11_PARSE(app, argc, argv);

    for (size_t i = 0; i < 6; ++i) {
        if (!app.get_subcommand(stages[i].first)->parsed()) continue;
        try {
            return dispatch(stages[i].second, opts[i]);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 1;
        } catch (const DataError& e) {
            std::cerr << "data error: " << e.what() << "\n";
            return 2;
        } catch (const NumericError& e) {
            std::cerr << "numeric failure: " << e.what() << "\n";
            return 3;
        } catch (const CapacityError& e) {
            std::cerr << "capacity error: " << e.what() << "\n";
            return 4;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 1;
}
