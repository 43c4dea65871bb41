#pragma once

// Desk-scale ablation experiments, each reproducing one structural result:
// alpha-gating collapse, stepwise vs flat supervision, number of grounding
// experts, negative supervision, and dataset scaling. Every runner is
// deterministic in its config and returns a comparison JSON. Independent
// training runs are distributed across workers; each run stays
// single-threaded, so results do not depend on the worker count.

#include <cstdint>
#include <string>
#include <vector>

#include "twist/evalproto.hpp"
#include "twist/model.hpp"
#include "twist/threads.hpp"
#include "twist/trainer.hpp"

#include "json.hpp"

namespace twist {

// In-memory deep copy via the parameter walk.
inline Model clone_model(const Model& src) {
    Model dst = init_model(src.cfg, 0);
    dst.phase = src.phase;
    if (src.vg_active()) ensure_vg_structure(dst);
    auto sp = src.named_params();
    auto dp = dst.named_params();
    for (std::size_t i = 0; i < sp.size(); ++i) dp[i].second.vec() = sp[i].second.vec();
    return dst;
}

struct AblateConfig {
    std::uint64_t seed = 0;
    int threads = 1;

    ModelConfig model; // base architecture for the self-contained runners

    int pretrain_samples = 3000;
    int pretrain_epochs = 3;
    float pretrain_lr = 3e-4f;

    int train_samples = 1500;
    int epochs = 3;
    int batch_size = 32;
    float lr = 1e-4f;
    float lambda = 0.01f;
    double neg_ratio = 0.05;

    int eval_scenes = 150; // held-out scenes; every object becomes a query
    int n_seeds = 3;
    int max_objects = 4;
};

namespace detail_ablate {

inline std::vector<Scene> heldout_scenes(std::uint64_t seed, int n, int max_objects) {
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        scenes.push_back(generate_scene(derive_seed(seed, 900, static_cast<std::uint64_t>(i)), max_objects));
    return scenes;
}

inline std::vector<Sample> finetune_data(std::uint64_t seed, int count, double neg_ratio, int max_objects) {
    GenConfig gc;
    gc.seed = seed;
    gc.count = count;
    gc.neg_ratio = neg_ratio;
    gc.max_objects = max_objects;
    gc.task = TaskKind::VG;
    return generate_dataset(gc);
}

inline Model pretrain_base(const AblateConfig& cfg) {
    GenConfig gc;
    gc.seed = derive_seed(cfg.seed, 901, 0);
    gc.count = cfg.pretrain_samples;
    gc.task = TaskKind::IU;
    gc.max_objects = cfg.max_objects;
    Model m = init_model(cfg.model, derive_seed(cfg.seed, 902, 0));
    RunConfig rc;
    rc.seed = derive_seed(cfg.seed, 903, 0);
    rc.phase = Phase::Pretrain;
    rc.epochs = cfg.pretrain_epochs;
    rc.batch_size = cfg.batch_size;
    rc.lr = cfg.pretrain_lr;
    rc.lambda = cfg.lambda;
    train(m, generate_dataset(gc), rc);
    return m;
}

struct FinetuneJob {
    Model model;                 // cloned base, possibly with a modified config
    std::vector<Sample> data;
    RunConfig rc;
};

inline void run_finetune(FinetuneJob& job) { train(job.model, job.data, job.rc); }

inline RunConfig finetune_rc(const AblateConfig& cfg, std::uint64_t run_seed) {
    RunConfig rc;
    rc.seed = run_seed;
    rc.phase = Phase::Finetune;
    rc.epochs = cfg.epochs;
    rc.batch_size = cfg.batch_size;
    rc.lr = cfg.lr;
    rc.lambda = cfg.lambda;
    return rc;
}

} // namespace detail_ablate

// Evaluates one finetuned checkpoint with the learned alphas and with alpha
// forced to 0 (pure grounding branch); the paper-structure expectation is a
// collapse of AP50 under the override.
inline nlohmann::json ablate_alpha_zero(const Model& finetuned, const std::vector<Scene>& scenes,
                                        int threads) {
    EvalOptions learned;
    learned.threads = threads;
    GroundingEval with_learned = run_grounding_eval(finetuned, scenes, learned);
    EvalOptions zero = learned;
    zero.alpha_override = 0.0f;
    GroundingEval with_zero = run_grounding_eval(finetuned, scenes, zero);
    return nlohmann::json{
        {"alpha_mean_learned", finetuned.alpha_mean()},
        {"ap50_learned", with_learned.ap.ap50},
        {"ap50_alpha0", with_zero.ap.ap50},
        {"rec_learned", with_learned.rec},
        {"rec_alpha0", with_zero.rec},
        {"ratio", with_learned.ap.ap50 > 0 ? with_zero.ap.ap50 / with_learned.ap.ap50 : 0.0},
    };
}

// Stepwise supervision vs flat supervision with the reasoning steps stripped
// down to the final answer, over n_seeds paired runs from one shared base.
inline nlohmann::json ablate_stepwise_vs_flat(const AblateConfig& cfg) {
    Model base = detail_ablate::pretrain_base(cfg);
    auto scenes = detail_ablate::heldout_scenes(cfg.seed, cfg.eval_scenes, cfg.max_objects);

    std::vector<detail_ablate::FinetuneJob> jobs;
    for (int s = 0; s < cfg.n_seeds; ++s) {
        auto data = detail_ablate::finetune_data(derive_seed(cfg.seed, 910, static_cast<std::uint64_t>(s)),
                                                 cfg.train_samples, cfg.neg_ratio, cfg.max_objects);
        std::vector<Sample> flat = data;
        for (auto& sample : flat)
            if (!sample.steps.empty()) sample.steps = {sample.answer};

        detail_ablate::FinetuneJob stepwise{clone_model(base), std::move(data),
                                            detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 911, static_cast<std::uint64_t>(s)))};
        detail_ablate::FinetuneJob flat_job{clone_model(base), std::move(flat),
                                            detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 911, static_cast<std::uint64_t>(s)))};
        jobs.push_back(std::move(stepwise));
        jobs.push_back(std::move(flat_job));
    }
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) { detail_ablate::run_finetune(jobs[i]); });

    EvalOptions opts;
    opts.threads = cfg.threads;
    nlohmann::json per_seed = nlohmann::json::array();
    double mean_step = 0.0, mean_flat = 0.0;
    for (int s = 0; s < cfg.n_seeds; ++s) {
        double rec_step = run_grounding_eval(jobs[static_cast<std::size_t>(2 * s)].model, scenes, opts).rec;
        double rec_flat = run_grounding_eval(jobs[static_cast<std::size_t>(2 * s + 1)].model, scenes, opts).rec;
        per_seed.push_back({{"seed", s}, {"rec_stepwise", rec_step}, {"rec_flat", rec_flat}});
        mean_step += rec_step / cfg.n_seeds;
        mean_flat += rec_flat / cfg.n_seeds;
    }
    return nlohmann::json{{"rec_stepwise_mean", mean_step},
                          {"rec_flat_mean", mean_flat},
                          {"per_seed", std::move(per_seed)}};
}

// 1 vs 2 vs 4 grounding experts from a shared pretrained base.
inline nlohmann::json ablate_experts(const AblateConfig& cfg, const std::vector<int>& counts = {1, 2, 4}) {
    Model base = detail_ablate::pretrain_base(cfg);
    auto scenes = detail_ablate::heldout_scenes(cfg.seed, cfg.eval_scenes, cfg.max_objects);

    std::vector<detail_ablate::FinetuneJob> jobs;
    for (int count : counts) {
        for (int s = 0; s < cfg.n_seeds; ++s) {
            detail_ablate::FinetuneJob job{clone_model(base),
                                           detail_ablate::finetune_data(derive_seed(cfg.seed, 920, static_cast<std::uint64_t>(s)),
                                                                        cfg.train_samples, cfg.neg_ratio, cfg.max_objects),
                                           detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 921, static_cast<std::uint64_t>(s)))};
            job.model.cfg.vg_experts = count; // per-layer top-k clamps to the expert count
            jobs.push_back(std::move(job));
        }
    }
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) { detail_ablate::run_finetune(jobs[i]); });

    EvalOptions opts;
    opts.threads = cfg.threads;
    nlohmann::json by_count = nlohmann::json::array();
    std::size_t ji = 0;
    for (int count : counts) {
        double mean_rec = 0.0;
        nlohmann::json seeds = nlohmann::json::array();
        for (int s = 0; s < cfg.n_seeds; ++s, ++ji) {
            double rec = run_grounding_eval(jobs[ji].model, scenes, opts).rec;
            seeds.push_back(rec);
            mean_rec += rec / cfg.n_seeds;
        }
        by_count.push_back({{"experts", count}, {"rec_mean", mean_rec}, {"rec_per_seed", std::move(seeds)}});
    }
    return nlohmann::json{{"by_count", std::move(by_count)}};
}

// With vs without negative supervision: invalid-question F1 on held-out
// negatives plus the AP50-on-positives comparison.
inline nlohmann::json ablate_negatives(const AblateConfig& cfg) {
    Model base = detail_ablate::pretrain_base(cfg);
    auto scenes = detail_ablate::heldout_scenes(cfg.seed, cfg.eval_scenes, cfg.max_objects);

    auto with_neg = detail_ablate::finetune_data(derive_seed(cfg.seed, 930, 0), cfg.train_samples,
                                                 cfg.neg_ratio, cfg.max_objects);
    std::vector<Sample> pos_only;
    for (const auto& s : with_neg)
        if (!s.negative) pos_only.push_back(s);

    std::vector<detail_ablate::FinetuneJob> jobs;
    jobs.push_back({clone_model(base), with_neg, detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 931, 0))});
    jobs.push_back({clone_model(base), pos_only, detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 931, 0))});
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) { detail_ablate::run_finetune(jobs[i]); });

    // held-out invalid/valid queries
    std::vector<Sample> heldout_neg, heldout_pos;
    for (int i = 0; i < 200; ++i) {
        Scene sc = generate_scene(derive_seed(cfg.seed, 932, static_cast<std::uint64_t>(i)), cfg.max_objects);
        heldout_neg.push_back(make_negative_sample(sc, derive_seed(cfg.seed, 933, static_cast<std::uint64_t>(i))));
        heldout_pos.push_back(make_vg_sample(sc, derive_seed(cfg.seed, 934, static_cast<std::uint64_t>(i))));
    }
    EvalOptions opts;
    opts.threads = cfg.threads;
    InvalidF1Result f1_with = run_invalid_f1(jobs[0].model, heldout_neg, heldout_pos, opts);
    InvalidF1Result f1_without = run_invalid_f1(jobs[1].model, heldout_neg, heldout_pos, opts);
    GroundingEval ap_with = run_grounding_eval(jobs[0].model, scenes, opts);
    GroundingEval ap_without = run_grounding_eval(jobs[1].model, scenes, opts);
    return nlohmann::json{{"invalid_f1_with_negatives", f1_with.f1},
                          {"invalid_f1_without_negatives", f1_without.f1},
                          {"ap50_with_negatives", ap_with.ap.ap50},
                          {"ap50_without_negatives", ap_without.ap.ap50},
                          {"rec_with_negatives", ap_with.rec},
                          {"rec_without_negatives", ap_without.rec}};
}

// Fine-tune set scaling; mIoU per size on a shared held-out set.
inline nlohmann::json ablate_scaling(const AblateConfig& cfg,
                                     const std::vector<int>& sizes = {256, 1000, 4000, 16000}) {
    Model base = detail_ablate::pretrain_base(cfg);
    auto scenes = detail_ablate::heldout_scenes(cfg.seed, cfg.eval_scenes, cfg.max_objects);

    std::vector<detail_ablate::FinetuneJob> jobs;
    for (int size : sizes)
        jobs.push_back({clone_model(base),
                        detail_ablate::finetune_data(derive_seed(cfg.seed, 940, 0), size, cfg.neg_ratio,
                                                     cfg.max_objects),
                        detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 941, 0))});
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) { detail_ablate::run_finetune(jobs[i]); });

    EvalOptions opts;
    opts.threads = cfg.threads;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        GroundingEval ge = run_grounding_eval(jobs[i].model, scenes, opts);
        rows.push_back({{"size", sizes[i]}, {"miou", ge.miou.miou}, {"rec", ge.rec}});
    }
    return nlohmann::json{{"by_size", std::move(rows)}};
}

// Catastrophic-forgetting control: fine-tune every parameter of a pretrained
// model on VG data, then compare IU-mode outputs against the pretrained ones.
inline nlohmann::json run_forgetting_control(const Model& pretrained, const AblateConfig& cfg,
                                             const std::vector<Sample>& iu_prompts) {
    Model control = clone_model(pretrained);
    RunConfig rc = detail_ablate::finetune_rc(cfg, derive_seed(cfg.seed, 950, 0));
    rc.control_unfrozen = true;
    rc.lr = cfg.pretrain_lr; // full-parameter training uses the pretrain step size
    train(control, detail_ablate::finetune_data(derive_seed(cfg.seed, 951, 0), cfg.train_samples,
                                                cfg.neg_ratio, cfg.max_objects),
          rc);
    EvalOptions opts;
    opts.threads = cfg.threads;
    auto before = run_iu_outputs(pretrained, iu_prompts, opts);
    auto after = run_iu_outputs(control, iu_prompts, opts);
    return nlohmann::json{{"iu_exact_match_control", forget_check(before, after)}};
}

} // namespace twist
