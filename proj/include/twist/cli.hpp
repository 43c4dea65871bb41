#pragma once

// Command-line entry point: data generation, the two training phases, router
// training, evaluation, ablations and dataset statistics. Exit codes: 0 on
// success, 1 on validation errors (bad flags, configs, malformed inputs),
// 2 on runtime failures. TWIST_THREADS caps the worker pool (default 1); a
// subcommand writes only to the paths named in its flags.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "twist/ablate.hpp"
#include "twist/evalproto.hpp"
#include "twist/model.hpp"
#include "twist/router.hpp"
#include "twist/scoutgen.hpp"
#include "twist/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace twist::cli {

struct CliConfig {
    ModelConfig model;
    RunConfig run;
    GenConfig gen;
};

inline StepContext step_context_from_name(const std::string& s) {
    if (s == "full_context") return StepContext::FullContext;
    if (s == "within_step") return StepContext::WithinStep;
    throw ValidationError("unknown stepwise context '" + s + "'");
}

// Config file: {"model": {...}, "run": {...}, "gen": {...}}; every key
// optional, command-line flags override file values.
inline CliConfig load_cli_config(const std::string& path) {
    CliConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError("config is not valid JSON: " + path);
    try {
        if (j.contains("model")) cfg.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("run")) {
            const auto& r = j.at("run");
            if (r.contains("seed")) cfg.run.seed = r.at("seed").get<std::uint64_t>();
            if (r.contains("epochs")) cfg.run.epochs = r.at("epochs").get<int>();
            if (r.contains("batch_size")) cfg.run.batch_size = r.at("batch_size").get<int>();
            if (r.contains("lr")) cfg.run.lr = r.at("lr").get<float>();
            if (r.contains("lambda")) cfg.run.lambda = r.at("lambda").get<float>();
            if (r.contains("grad_clip")) cfg.run.grad_clip = r.at("grad_clip").get<float>();
            if (r.contains("weight_decay")) cfg.run.weight_decay = r.at("weight_decay").get<float>();
            if (r.contains("eval_cadence")) cfg.run.eval_cadence = r.at("eval_cadence").get<int>();
            if (r.contains("stepwise_context"))
                cfg.run.stepwise_context = step_context_from_name(r.at("stepwise_context").get<std::string>());
        }
        if (j.contains("gen")) {
            const auto& g = j.at("gen");
            if (g.contains("neg_ratio")) cfg.gen.neg_ratio = g.at("neg_ratio").get<double>();
            if (g.contains("max_objects")) cfg.gen.max_objects = g.at("max_objects").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    cfg.model.validate();
    return cfg;
}

namespace detail_cli {

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw Error("write failed for '" + path + "'");
}

inline std::vector<std::pair<std::string, TaskKind>> router_data(const std::vector<Sample>& samples) {
    std::vector<std::pair<std::string, TaskKind>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.emplace_back(s.prompt, s.task);
    return out;
}

} // namespace detail_cli

inline int run_command(int argc, const char* const* argv) {
    CLI::App app{"TWIST desk-scale training and evaluation"};
    app.require_subcommand(1);
    int threads = env_thread_count(1);

    // gen-data
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a dataset JSONL file");
    GenConfig gen_cfg;
    std::string gen_out, gen_task = "vg";
    gen_cmd->add_option("--seed", gen_cfg.seed, "Generation seed");
    gen_cmd->add_option("--n", gen_cfg.count, "Number of positive samples")->required();
    gen_cmd->add_option("--neg-ratio", gen_cfg.neg_ratio, "Negative samples as a fraction of positives");
    gen_cmd->add_option("--max-objects", gen_cfg.max_objects, "Objects per scene (1..4)");
    gen_cmd->add_option("--task", gen_task, "Sample family: iu or vg")
        ->check(CLI::IsMember({"iu", "vg"}));
    gen_cmd->add_option("--out", gen_out, "Output JSONL path")->required();

    // pretrain / finetune share most flags
    std::string tr_config, tr_data, tr_out, tr_log, tr_ckpt, tr_stepctx;
    std::optional<std::uint64_t> tr_seed;
    std::optional<int> tr_epochs, tr_batch;
    std::optional<float> tr_lr, tr_lambda;
    bool tr_control = false;
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", tr_config, "JSON config file");
        cmd->add_option("--data", tr_data, "Training dataset JSONL")->required();
        cmd->add_option("--out", tr_out, "Checkpoint output path")->required();
        cmd->add_option("--log", tr_log, "Training log JSONL path");
        cmd->add_option("--seed", tr_seed, "Run seed (overrides config)");
        cmd->add_option("--epochs", tr_epochs, "Epochs (overrides config)");
        cmd->add_option("--batch-size", tr_batch, "Batch size (overrides config)");
        cmd->add_option("--lr", tr_lr, "Learning rate (overrides config)");
        cmd->add_option("--lambda", tr_lambda, "Gating regularizer weight");
    };
    auto* pre_cmd = app.add_subcommand("pretrain", "Train the IU base model");
    add_train_flags(pre_cmd);
    auto* ft_cmd = app.add_subcommand("finetune", "Grounding fine-tune from a pretrain checkpoint");
    add_train_flags(ft_cmd);
    ft_cmd->add_option("--ckpt", tr_ckpt, "Pretrain checkpoint")->required();
    ft_cmd->add_option("--stepwise-context", tr_stepctx, "full_context or within_step")
        ->check(CLI::IsMember({"full_context", "within_step"}));
    ft_cmd->add_flag("--control", tr_control,
                     "Unfrozen control baseline: fine-tune every parameter, no twin path");

    // router-train
    std::string rt_data, rt_out, rt_test;
    int rt_epochs = 3;
    std::uint64_t rt_seed = 0;
    auto* rt_cmd = app.add_subcommand("router-train", "Train the IU/VG task router");
    rt_cmd->add_option("--data", rt_data, "Dataset JSONL with prompts")->required();
    rt_cmd->add_option("--out", rt_out, "Router JSON output")->required();
    rt_cmd->add_option("--test-data", rt_test, "Held-out dataset for the accuracy line");
    rt_cmd->add_option("--epochs", rt_epochs, "Perceptron epochs");
    rt_cmd->add_option("--seed", rt_seed, "Shuffle seed");

    // eval
    std::string ev_ckpt, ev_data, ev_report, ev_syn;
    std::optional<float> ev_alpha;
    auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
    ev_cmd->add_option("--data", ev_data, "Evaluation dataset JSONL")->required();
    ev_cmd->add_option("--report", ev_report, "EvalReport JSON output path")->required();
    ev_cmd->add_option("--synonyms", ev_syn, "alias<TAB>category synonym file");
    ev_cmd->add_option("--alpha-override", ev_alpha, "Force alpha in VG mode (0..1)");

    // ablate
    std::string ab_which, ab_out, ab_ckpt, ab_data, ab_config;
    AblateConfig ab_cfg;
    auto* ab_cmd = app.add_subcommand("ablate", "Run a named ablation and emit a comparison JSON");
    ab_cmd->add_option("--which", ab_which, "alpha_zero, stepwise_vs_flat, experts, negatives or scaling")
        ->required()
        ->check(CLI::IsMember({"alpha_zero", "stepwise_vs_flat", "experts", "negatives", "scaling"}));
    ab_cmd->add_option("--out", ab_out, "Comparison JSON output path")->required();
    ab_cmd->add_option("--ckpt", ab_ckpt, "Finetuned checkpoint (alpha_zero)");
    ab_cmd->add_option("--data", ab_data, "Eval dataset providing scenes (alpha_zero)");
    ab_cmd->add_option("--config", ab_config, "JSON config file for the base model");
    ab_cmd->add_option("--seed", ab_cfg.seed, "Experiment seed");
    ab_cmd->add_option("--train-samples", ab_cfg.train_samples, "Fine-tune samples per run");
    ab_cmd->add_option("--epochs", ab_cfg.epochs, "Fine-tune epochs per run");
    ab_cmd->add_option("--pretrain-samples", ab_cfg.pretrain_samples, "Base pretrain samples");
    ab_cmd->add_option("--pretrain-epochs", ab_cfg.pretrain_epochs, "Base pretrain epochs");
    ab_cmd->add_option("--seeds", ab_cfg.n_seeds, "Seeds per variant");
    ab_cmd->add_option("--eval-scenes", ab_cfg.eval_scenes, "Held-out scenes for grounding eval");

    // stats
    std::string st_data;
    auto* st_cmd = app.add_subcommand("stats", "Print dataset statistics as JSON");
    st_cmd->add_option("--data", st_data, "Dataset JSONL")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen_cmd->parsed()) {
            gen_cfg.task = task_from_name(gen_task);
            if (gen_cfg.count < 1) throw ValidationError("gen-data: --n must be >= 1");
            if (gen_cfg.max_objects < 1 || gen_cfg.max_objects > 4)
                throw ValidationError("gen-data: --max-objects must be in [1,4]");
            write_dataset(gen_out, generate_dataset(gen_cfg));
            std::cout << "wrote " << gen_out << "\n";
            return 0;
        }

        if (pre_cmd->parsed() || ft_cmd->parsed()) {
            CliConfig cfg = load_cli_config(tr_config);
            RunConfig rc = cfg.run;
            if (tr_seed) rc.seed = *tr_seed;
            if (tr_epochs) rc.epochs = *tr_epochs;
            if (tr_batch) rc.batch_size = *tr_batch;
            if (tr_lambda) rc.lambda = *tr_lambda;
            if (!tr_stepctx.empty()) rc.stepwise_context = step_context_from_name(tr_stepctx);
            rc.control_unfrozen = tr_control;
            auto data = read_dataset(tr_data);

            Model model;
            if (pre_cmd->parsed()) {
                rc.phase = Phase::Pretrain;
                rc.lr = tr_lr ? *tr_lr : (tr_config.empty() ? 3e-4f : cfg.run.lr);
                model = init_model(cfg.model, rc.seed);
            } else {
                rc.phase = Phase::Finetune;
                rc.lr = tr_lr ? *tr_lr : 1e-4f;
                model = load_checkpoint(tr_ckpt).model;
            }
            OptimState optim;
            Pcg32 rng;
            TrainLog log = train(model, data, rc, &optim, &rng);
            save_checkpoint(model, &optim, &rng, tr_out);
            if (!tr_log.empty()) log.write_jsonl(tr_log);
            if (!log.epochs.empty())
                std::cout << phase_label(rc.phase) << " done: loss " << log.epochs.back().loss
                          << ", alpha_mean " << log.epochs.back().alpha_mean << "\n";
            return 0;
        }

        if (rt_cmd->parsed()) {
            Router router;
            router.train(detail_cli::router_data(read_dataset(rt_data)), rt_epochs, rt_seed);
            router.save(rt_out);
            if (!rt_test.empty())
                std::cout << "held-out accuracy "
                          << router.accuracy(detail_cli::router_data(read_dataset(rt_test))) << "\n";
            return 0;
        }

        if (ev_cmd->parsed()) {
            Model model = load_checkpoint(ev_ckpt).model;
            auto data = read_dataset(ev_data);
            EvalOptions opts;
            opts.threads = threads;
            SynonymTable syn;
            if (!ev_syn.empty()) {
                syn = SynonymTable::load(ev_syn);
                opts.synonyms = &syn;
            }
            if (ev_alpha) {
                if (*ev_alpha < 0.0f || *ev_alpha > 1.0f)
                    throw ValidationError("eval: --alpha-override outside [0,1]");
                opts.alpha_override = ev_alpha;
            }
            EvalReport report = evaluate_model(model, data, opts);
            detail_cli::write_json(ev_report, report.to_json());
            std::cout << "rec_acc " << report.rec_acc << ", ap50 " << report.ap50
                      << ", iu_exact_match " << report.iu_exact_match << ", invalid_f1 "
                      << report.invalid_f1 << "\n";
            return 0;
        }

        if (ab_cmd->parsed()) {
            ab_cfg.threads = threads;
            if (!ab_config.empty()) ab_cfg.model = load_cli_config(ab_config).model;
            nlohmann::json result;
            if (ab_which == "alpha_zero") {
                if (ab_ckpt.empty()) throw ValidationError("ablate alpha_zero: --ckpt is required");
                Model model = load_checkpoint(ab_ckpt).model;
                std::vector<Scene> scenes;
                if (!ab_data.empty()) {
                    std::set<std::uint64_t> seen;
                    for (const auto& s : read_dataset(ab_data))
                        if (s.task == TaskKind::VG && !s.negative && seen.insert(s.scene.seed).second)
                            scenes.push_back(s.scene);
                } else {
                    for (int i = 0; i < ab_cfg.eval_scenes; ++i)
                        scenes.push_back(generate_scene(derive_seed(ab_cfg.seed, 900, static_cast<std::uint64_t>(i)),
                                                        ab_cfg.max_objects));
                }
                if (scenes.empty()) throw ValidationError("ablate alpha_zero: no evaluation scenes");
                result = ablate_alpha_zero(model, scenes, threads);
            } else if (ab_which == "stepwise_vs_flat") {
                result = ablate_stepwise_vs_flat(ab_cfg);
            } else if (ab_which == "experts") {
                result = ablate_experts(ab_cfg);
            } else if (ab_which == "negatives") {
                result = ablate_negatives(ab_cfg);
            } else {
                result = ablate_scaling(ab_cfg);
            }
            detail_cli::write_json(ab_out, result);
            std::cout << result.dump() << "\n";
            return 0;
        }

        if (st_cmd->parsed()) {
            std::cout << stats_to_json(dataset_stats(read_dataset(st_data))).dump() << "\n";
            return 0;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ArgError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const VocabError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const TemplateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const StateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}

} // namespace twist::cli
