#pragma once

// Regularized next-token loss, the gating load-balance regularizer R(g), and
// the step-by-step loss in both context modes.
//
// R(g) per MoE layer is E * sum_i f_i * P_i where f_i is the fraction of
// tokens whose top-1 expert is i (non-differentiable) and P_i the mean
// post-top-k gate probability of expert i (differentiable); layers are
// averaged. R is 1 under perfectly balanced routing and E when everything
// lands on one expert.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "twist/errors.hpp"
#include "twist/tensor.hpp"
#include "twist/vocab.hpp"

namespace twist {

struct GateStats {
    Tensor gates;                      // [T, E] post-top-k probabilities, on the tape
    std::vector<double> top1_fraction; // f_i per expert, ties toward lowest index
    int tokens = 0;
    std::string layer;                 // diagnostic label
};

// Fills top1_fraction from the gate values.
inline void finalize_gate_stats(GateStats& st) {
    int t_len = st.gates.dim(0), e = st.gates.dim(1);
    st.tokens = t_len;
    st.top1_fraction.assign(static_cast<std::size_t>(e), 0.0);
    for (int t = 0; t < t_len; ++t) {
        const float* row = st.gates.data() + static_cast<std::size_t>(t) * e;
        int best = 0;
        for (int j = 1; j < e; ++j)
            if (row[j] > row[best]) best = j;
        st.top1_fraction[static_cast<std::size_t>(best)] += 1.0;
    }
    for (auto& f : st.top1_fraction) f /= std::max(1, t_len);
}

// Scalar R(g) for reporting.
inline double gating_regularizer(const std::vector<GateStats>& stats) {
    if (stats.empty()) throw ArgError("gating_regularizer: no gate stats");
    double total = 0.0;
    for (const auto& st : stats) {
        if (st.tokens < 1) throw ArgError("gating_regularizer: stats cover no tokens");
        int e = st.gates.dim(1);
        double r = 0.0;
        for (int i = 0; i < e; ++i) {
            double p = 0.0;
            for (int t = 0; t < st.tokens; ++t)
                p += static_cast<double>(st.gates.data()[static_cast<std::size_t>(t) * e + i]);
            p /= st.tokens;
            r += st.top1_fraction[static_cast<std::size_t>(i)] * p;
        }
        total += r * e;
    }
    return total / static_cast<double>(stats.size());
}

// Differentiable R(g); gradient flows through the mean gate probabilities.
inline Tensor gating_regularizer_t(Graph& g, const std::vector<GateStats>& stats) {
    if (stats.empty()) throw ArgError("gating_regularizer: no gate stats");
    Tensor acc;
    for (const auto& st : stats) {
        if (st.tokens < 1) throw ArgError("gating_regularizer: stats cover no tokens");
        int e = st.gates.dim(1);
        Tensor p = mean_rows(g, st.gates);
        std::vector<float> w(static_cast<std::size_t>(e));
        for (int i = 0; i < e; ++i)
            w[static_cast<std::size_t>(i)] = static_cast<float>(st.top1_fraction[static_cast<std::size_t>(i)] * e);
        Tensor r = inner_const(g, p, w);
        acc = acc.defined() ? add(g, acc, r) : r;
    }
    return scale(g, acc, 1.0f / static_cast<float>(stats.size()));
}

enum class StepContext { FullContext, WithinStep };

struct LossConfig {
    float lambda = 0.01f;
    StepContext stepwise_context = StepContext::FullContext;
    std::vector<float> step_weights; // empty = uniform

    void validate() const {
        if (lambda < 0.0f) throw ValidationError("loss: lambda must be >= 0");
        for (float w : step_weights)
            if (!(w > 0.0f)) throw ValidationError("loss: step weights must be positive");
    }
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0; // weighted cross-entropy part
    double rg = 0.0; // R(g) value (unscaled by lambda)
    std::vector<double> per_step; // mean CE per step, when stepwise
};

// Shift-aligned targets for a serialized sample: position p predicts token
// p+1; prompt and visual positions stay masked (-1).
inline std::vector<int> shifted_targets(const TokenizedSample& ts) {
    int t_len = static_cast<int>(ts.tokens.size());
    std::vector<int> targets(static_cast<std::size_t>(t_len), -1);
    for (int p = 0; p + 1 < t_len; ++p)
        if (p + 1 >= ts.target_start) targets[static_cast<std::size_t>(p)] = ts.tokens[static_cast<std::size_t>(p) + 1];
    return targets;
}

// Mean cross-entropy over supervised positions plus lambda * R(g).
inline Tensor next_token_loss(Graph& g, const Tensor& logits, const std::vector<int>& targets,
                              const std::vector<GateStats>& stats, const LossConfig& cfg,
                              LossBreakdown* parts = nullptr) {
    cfg.validate();
    int t_len = logits.dim(0);
    if (static_cast<int>(targets.size()) != t_len) throw DimError("next_token_loss: target length");
    int n_sup = 0;
    for (int v : targets) n_sup += (v >= 0);
    if (n_sup == 0) throw ArgError("next_token_loss: all positions masked");
    std::vector<float> w(static_cast<std::size_t>(t_len), 0.0f);
    for (int p = 0; p < t_len; ++p)
        if (targets[static_cast<std::size_t>(p)] >= 0) w[static_cast<std::size_t>(p)] = 1.0f / static_cast<float>(n_sup);
    Tensor loss = cross_entropy_weighted(g, logits, targets, w);
    double ce_val = loss.item64();
    double rg_val = 0.0;
    if (!stats.empty()) {
        rg_val = gating_regularizer(stats);
        if (cfg.lambda > 0.0f) loss = add(g, loss, scale(g, gating_regularizer_t(g, stats), cfg.lambda));
    }
    if (parts) {
        parts->total = loss.item64();
        parts->ce = ce_val;
        parts->rg = rg_val;
    }
    return loss;
}

namespace detail_loss {

// Weighted stepwise CE on one forward's logits. Step j's tokens t in
// [s_j, e_j) are predicted at positions t-1 and weighted w_j / sum_k w_k*N_k,
// so uniform weights reduce to the flat per-token mean over the identical
// forward pass.
inline Tensor stepwise_ce(Graph& g, const Tensor& logits, const TokenizedSample& ts,
                          const LossConfig& cfg, std::vector<double>* per_step) {
    int t_len = static_cast<int>(ts.tokens.size());
    if (logits.dim(0) != t_len) throw DimError("stepwise_loss: logits/sample length mismatch");
    int j_steps = ts.seg.steps();
    std::vector<float> sw = cfg.step_weights;
    if (sw.empty()) sw.assign(static_cast<std::size_t>(j_steps), 1.0f);
    if (static_cast<int>(sw.size()) != j_steps)
        throw ArgError("stepwise_loss: got " + std::to_string(sw.size()) + " weights for " +
                       std::to_string(j_steps) + " steps");
    ts.seg.validate(ts.target_start, t_len);

    double z = 0.0;
    for (int j = 0; j < j_steps; ++j)
        z += static_cast<double>(sw[static_cast<std::size_t>(j)]) *
             (ts.seg.ranges[static_cast<std::size_t>(j)].end - ts.seg.ranges[static_cast<std::size_t>(j)].start);

    std::vector<int> targets(static_cast<std::size_t>(t_len), -1);
    std::vector<float> w(static_cast<std::size_t>(t_len), 0.0f);
    for (int j = 0; j < j_steps; ++j) {
        const auto& r = ts.seg.ranges[static_cast<std::size_t>(j)];
        for (int t = r.start; t < r.end; ++t) {
            targets[static_cast<std::size_t>(t - 1)] = ts.tokens[static_cast<std::size_t>(t)];
            w[static_cast<std::size_t>(t - 1)] = static_cast<float>(sw[static_cast<std::size_t>(j)] / z);
        }
    }
    std::vector<float> ce_pos;
    Tensor loss = cross_entropy_weighted(g, logits, targets, w, &ce_pos);
    if (per_step) {
        per_step->assign(static_cast<std::size_t>(j_steps), 0.0);
        for (int j = 0; j < j_steps; ++j) {
            const auto& r = ts.seg.ranges[static_cast<std::size_t>(j)];
            double s = 0.0;
            for (int t = r.start; t < r.end; ++t) s += static_cast<double>(ce_pos[static_cast<std::size_t>(t - 1)]);
            (*per_step)[static_cast<std::size_t>(j)] = s / (r.end - r.start);
        }
    }
    return loss;
}

} // namespace detail_loss

// Full-context stepwise loss over precomputed logits.
inline Tensor stepwise_loss_from_logits(Graph& g, const Tensor& logits, const TokenizedSample& ts,
                                        const std::vector<GateStats>& stats, const LossConfig& cfg,
                                        LossBreakdown* parts = nullptr) {
    cfg.validate();
    std::vector<double> per_step;
    Tensor loss = detail_loss::stepwise_ce(g, logits, ts, cfg, &per_step);
    double ce_val = loss.item64();
    double rg_val = 0.0;
    if (!stats.empty()) {
        rg_val = gating_regularizer(stats);
        if (cfg.lambda > 0.0f) loss = add(g, loss, scale(g, gating_regularizer_t(g, stats), cfg.lambda));
    }
    if (parts) {
        parts->total = loss.item64();
        parts->ce = ce_val;
        parts->rg = rg_val;
        parts->per_step = std::move(per_step);
    }
    return loss;
}

// Runs the model via `fwd` and applies the configured stepwise mode.
//
// FullContext: one forward over the whole sequence. WithinStep: step j sees
// image tokens + prompt + its own tokens only (prior steps dropped), one
// forward per step recorded on the same tape.
using ForwardFn =
    std::function<Tensor(Graph&, const std::vector<int>& tokens, std::vector<GateStats>* stats)>;

inline Tensor stepwise_loss(Graph& g, const ForwardFn& fwd, const TokenizedSample& ts,
                            const LossConfig& cfg, LossBreakdown* parts = nullptr) {
    cfg.validate();
    if (cfg.stepwise_context == StepContext::FullContext) {
        std::vector<GateStats> stats;
        Tensor logits = fwd(g, ts.tokens, &stats);
        return stepwise_loss_from_logits(g, logits, ts, stats, cfg, parts);
    }

    int j_steps = ts.seg.steps();
    std::vector<float> sw = cfg.step_weights;
    if (sw.empty()) sw.assign(static_cast<std::size_t>(j_steps), 1.0f);
    if (static_cast<int>(sw.size()) != j_steps) throw ArgError("stepwise_loss: step weight count");
    ts.seg.validate(ts.target_start, static_cast<int>(ts.tokens.size()));
    double z = 0.0;
    for (int j = 0; j < j_steps; ++j)
        z += static_cast<double>(sw[static_cast<std::size_t>(j)]) *
             (ts.seg.ranges[static_cast<std::size_t>(j)].end - ts.seg.ranges[static_cast<std::size_t>(j)].start);

    Tensor total;
    double ce_val = 0.0, rg_val = 0.0;
    std::vector<double> per_step(static_cast<std::size_t>(j_steps), 0.0);
    for (int j = 0; j < j_steps; ++j) {
        const auto& r = ts.seg.ranges[static_cast<std::size_t>(j)];
        std::vector<int> sub(ts.tokens.begin(), ts.tokens.begin() + ts.target_start);
        sub.insert(sub.end(), ts.tokens.begin() + r.start, ts.tokens.begin() + r.end);
        std::vector<GateStats> stats;
        Tensor logits = fwd(g, sub, &stats);
        int sub_len = static_cast<int>(sub.size());
        std::vector<int> targets(static_cast<std::size_t>(sub_len), -1);
        std::vector<float> w(static_cast<std::size_t>(sub_len), 0.0f);
        int n_j = r.end - r.start;
        for (int t = ts.target_start; t < sub_len; ++t) {
            targets[static_cast<std::size_t>(t - 1)] = sub[static_cast<std::size_t>(t)];
            w[static_cast<std::size_t>(t - 1)] = static_cast<float>(sw[static_cast<std::size_t>(j)] / z);
        }
        std::vector<float> ce_pos;
        Tensor loss_j = cross_entropy_weighted(g, logits, targets, w, &ce_pos);
        double s = 0.0;
        for (int t = ts.target_start; t < sub_len; ++t) s += static_cast<double>(ce_pos[static_cast<std::size_t>(t - 1)]);
        per_step[static_cast<std::size_t>(j)] = s / n_j;
        ce_val += loss_j.item64();
        if (!stats.empty()) {
            rg_val += gating_regularizer(stats) / j_steps;
            if (cfg.lambda > 0.0f)
                loss_j = add(g, loss_j, scale(g, gating_regularizer_t(g, stats), cfg.lambda / static_cast<float>(j_steps)));
        }
        total = total.defined() ? add(g, total, loss_j) : loss_j;
    }
    if (parts) {
        parts->total = total.item64();
        parts->ce = ce_val;
        parts->rg = rg_val;
        parts->per_step = std::move(per_step);
    }
    return total;
}

} // namespace twist
