#pragma once

// Decoder-only transformer with interleaved dense-FFN and twin-expert MoE
// blocks. The twin layer blends a frozen image-understanding MoE with a
// trainable visual-grounding MoE through a learnable per-layer alpha:
//     l = alpha * (moe_iu(LN(x)) + x) + (1 - alpha) * (moe_vg(LN(x)) + x)
// Inference overrides alpha to 1 for image-understanding prompts and masks
// the grounding token set, which makes IU behaviour exactly frozen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "twist/errors.hpp"
#include "twist/losses.hpp"
#include "twist/rng.hpp"
#include "twist/scoutgen.hpp"
#include "twist/tensor.hpp"
#include "twist/vocab.hpp"

#include "json.hpp"

namespace twist {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 4;
    std::vector<int> moe_block_indices = {1, 3};
    int iu_experts = 4;
    int vg_experts = 2;
    int top_k = 2;
    int ffn_hidden = 256;
    int max_seq_len = 160;
    int coord_bins = 64;
    float ln_eps = 1e-5f;

    void validate() const {
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw ValidationError("config: d_model must be divisible by n_heads");
        if (n_blocks < 1 || ffn_hidden < 1 || max_seq_len < 68)
            throw ValidationError("config: bad block/hidden/seq settings");
        if (iu_experts < 1 || vg_experts < 1) throw ValidationError("config: expert counts must be >= 1");
        if (top_k < 1 || top_k > iu_experts)
            throw ValidationError("config: top_k must be in [1, iu_experts]");
        int prev = -1;
        for (int ix : moe_block_indices) {
            if (ix < 0 || ix >= n_blocks || ix <= prev)
                throw ValidationError("config: moe_block_indices must be sorted, unique, in range");
            prev = ix;
        }
        if (coord_bins < 2 || kCanvas % coord_bins != 0)
            throw ValidationError("config: coord_bins must divide the canvas size");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"d_model", d_model},     {"n_heads", n_heads},
                              {"n_blocks", n_blocks},   {"moe_block_indices", moe_block_indices},
                              {"iu_experts", iu_experts}, {"vg_experts", vg_experts},
                              {"top_k", top_k},         {"ffn_hidden", ffn_hidden},
                              {"max_seq_len", max_seq_len}, {"coord_bins", coord_bins},
                              {"ln_eps", ln_eps}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            c.d_model = j.at("d_model").get<int>();
            c.n_heads = j.at("n_heads").get<int>();
            c.n_blocks = j.at("n_blocks").get<int>();
            c.moe_block_indices = j.at("moe_block_indices").get<std::vector<int>>();
            c.iu_experts = j.at("iu_experts").get<int>();
            c.vg_experts = j.at("vg_experts").get<int>();
            c.top_k = j.at("top_k").get<int>();
            c.ffn_hidden = j.at("ffn_hidden").get<int>();
            c.max_seq_len = j.at("max_seq_len").get<int>();
            c.coord_bins = j.at("coord_bins").get<int>();
            if (j.contains("ln_eps")) c.ln_eps = j.at("ln_eps").get<float>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

struct Expert {
    Tensor w1, b1, w2, b2;
};

struct MoELayer {
    std::vector<Expert> experts;
    Tensor gate_w; // [d, E]
    int top_k = 1;

    int expert_count() const { return static_cast<int>(experts.size()); }
    int effective_k() const { return std::min(top_k, expert_count()); }
};

struct TwinExpertLayer {
    MoELayer iu;
    MoELayer vg;
    Tensor alpha_raw; // scalar; alpha = sigmoid(alpha_raw)
    bool vg_active = false;

    float alpha() const { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(alpha_raw.item())))); }
};

struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    bool is_moe = false;
    Expert ffn;          // dense blocks
    TwinExpertLayer twin; // MoE blocks
};

enum class ModelPhase { Fresh, Pretrained, Finetuned };

inline std::string phase_name(ModelPhase p) {
    switch (p) {
        case ModelPhase::Fresh: return "fresh";
        case ModelPhase::Pretrained: return "pretrained";
        case ModelPhase::Finetuned: return "finetuned";
    }
    return "";
}

inline ModelPhase phase_from_name(const std::string& s) {
    if (s == "fresh") return ModelPhase::Fresh;
    if (s == "pretrained") return ModelPhase::Pretrained;
    if (s == "finetuned") return ModelPhase::Finetuned;
    throw FormatError("unknown model phase '" + s + "'");
}

struct Model {
    ModelConfig cfg;
    Vocabulary vocab;
    Tensor tok_emb, pos_emb;
    std::vector<Block> blocks;
    Tensor lnf_g, lnf_b;
    Tensor head_w; // untied output head [d, V]
    ModelPhase phase = ModelPhase::Fresh;

    Model() : vocab(64) {}

    bool vg_active() const {
        for (const auto& b : blocks)
            if (b.is_moe && b.twin.vg_active) return true;
        return false;
    }

    std::vector<const TwinExpertLayer*> twin_layers() const {
        std::vector<const TwinExpertLayer*> out;
        for (const auto& b : blocks)
            if (b.is_moe) out.push_back(&b.twin);
        return out;
    }

    double alpha_mean() const {
        double s = 0.0;
        int n = 0;
        for (const auto& b : blocks)
            if (b.is_moe) {
                s += b.twin.alpha();
                ++n;
            }
        return n ? s / n : 0.0;
    }

    // Deterministic parameter walk; names are the checkpoint contract.
    // VG parameters appear only once the twin layers are active.
    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto put = [&out](std::string name, const Tensor& t) { out.emplace_back(std::move(name), t); };
        auto put_expert = [&](const std::string& prefix, const Expert& e) {
            put(prefix + ".w1", e.w1);
            put(prefix + ".b1", e.b1);
            put(prefix + ".w2", e.w2);
            put(prefix + ".b2", e.b2);
        };
        auto put_moe = [&](const std::string& prefix, const MoELayer& m) {
            put(prefix + ".gate", m.gate_w);
            for (int i = 0; i < m.expert_count(); ++i)
                put_expert(prefix + ".e" + std::to_string(i), m.experts[static_cast<std::size_t>(i)]);
        };
        put("tok_emb", tok_emb);
        put("pos_emb", pos_emb);
        for (int i = 0; i < cfg.n_blocks; ++i) {
            const Block& b = blocks[static_cast<std::size_t>(i)];
            std::string p = "block" + std::to_string(i);
            put(p + ".ln1.g", b.ln1_g);
            put(p + ".ln1.b", b.ln1_b);
            put(p + ".attn.wq", b.wq);
            put(p + ".attn.bq", b.bq);
            put(p + ".attn.wk", b.wk);
            put(p + ".attn.bk", b.bk);
            put(p + ".attn.wv", b.wv);
            put(p + ".attn.bv", b.bv);
            put(p + ".attn.wo", b.wo);
            put(p + ".attn.bo", b.bo);
            put(p + ".ln2.g", b.ln2_g);
            put(p + ".ln2.b", b.ln2_b);
            if (b.is_moe) {
                put_moe(p + ".iu", b.twin.iu);
                if (b.twin.vg_active) {
                    put_moe(p + ".vg", b.twin.vg);
                    put(p + ".alpha_raw", b.twin.alpha_raw);
                }
            } else {
                put_expert(p + ".ffn", b.ffn);
            }
        }
        put("lnf.g", lnf_g);
        put("lnf.b", lnf_b);
        put("head.w", head_w);
        return out;
    }
};

namespace detail_model {

inline Tensor gauss(Pcg32& rng, Shape shape, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = static_cast<float>(rng.next_gaussian() * stddev);
    return t;
}

inline Expert init_expert(Pcg32& rng, int d, int hidden) {
    Expert e;
    e.w1 = gauss(rng, {d, hidden}, 0.02);
    e.b1 = Tensor::zeros({hidden}, true);
    e.w2 = gauss(rng, {hidden, d}, 0.02);
    e.b2 = Tensor::zeros({d}, true);
    return e;
}

inline MoELayer init_moe(Pcg32& rng, int d, int hidden, int experts, int top_k) {
    MoELayer m;
    m.top_k = top_k;
    m.gate_w = gauss(rng, {d, experts}, 0.02);
    for (int i = 0; i < experts; ++i) m.experts.push_back(init_expert(rng, d, hidden));
    return m;
}

} // namespace detail_model

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.vocab = Vocabulary(cfg.coord_bins);
    Pcg32 rng(seed, 0x40de1u);
    int d = cfg.d_model, v = m.vocab.size();
    m.tok_emb = detail_model::gauss(rng, {v, d}, 0.02);
    m.pos_emb = detail_model::gauss(rng, {cfg.max_seq_len, d}, 0.02);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        Block b;
        b.ln1_g = Tensor::full({d}, 1.0f, true);
        b.ln1_b = Tensor::zeros({d}, true);
        b.wq = detail_model::gauss(rng, {d, d}, 0.02);
        b.bq = Tensor::zeros({d}, true);
        b.wk = detail_model::gauss(rng, {d, d}, 0.02);
        b.bk = Tensor::zeros({d}, true);
        b.wv = detail_model::gauss(rng, {d, d}, 0.02);
        b.bv = Tensor::zeros({d}, true);
        b.wo = detail_model::gauss(rng, {d, d}, 0.02);
        b.bo = Tensor::zeros({d}, true);
        b.ln2_g = Tensor::full({d}, 1.0f, true);
        b.ln2_b = Tensor::zeros({d}, true);
        b.is_moe = std::find(cfg.moe_block_indices.begin(), cfg.moe_block_indices.end(), i) !=
                   cfg.moe_block_indices.end();
        if (b.is_moe) {
            b.twin.iu = detail_model::init_moe(rng, d, cfg.ffn_hidden, cfg.iu_experts, cfg.top_k);
            b.twin.alpha_raw = Tensor::zeros({1}, true);
            b.twin.vg_active = false;
        } else {
            b.ffn = detail_model::init_expert(rng, d, cfg.ffn_hidden);
        }
        m.blocks.push_back(std::move(b));
    }
    m.lnf_g = Tensor::full({d}, 1.0f, true);
    m.lnf_b = Tensor::zeros({d}, true);
    m.head_w = detail_model::gauss(rng, {d, v}, 0.02);
    return m;
}

// --- forward -----------------------------------------------------------------

struct ForwardOptions {
    std::optional<float> alpha_override; // in [0,1]; 1 selects the IU path exactly
    int forced_expert = -1;              // test hook: route every token to one expert
};

// Top-k expert selection per token: largest gate logits, ties toward the
// lowest expert index. Returns per-expert ascending token lists.
inline std::vector<std::vector<int>> route_tokens(const Tensor& gate_logits, int k) {
    int t_len = gate_logits.dim(0), e = gate_logits.dim(1);
    std::vector<std::vector<int>> by_expert(static_cast<std::size_t>(e));
    std::vector<int> order(static_cast<std::size_t>(e));
    for (int t = 0; t < t_len; ++t) {
        const float* row = gate_logits.data() + static_cast<std::size_t>(t) * e;
        for (int j = 0; j < e; ++j) order[static_cast<std::size_t>(j)] = j;
        std::stable_sort(order.begin(), order.end(), [row](int a, int b) { return row[a] > row[b]; });
        for (int j = 0; j < k; ++j) by_expert[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])].push_back(t);
    }
    return by_expert;
}

// y = sum_i g_i(x) * e_i(x) with post-top-k softmax gates. Tokens are
// dispatched to their selected experts and scattered back, so each expert
// only runs on its routed tokens.
inline Tensor moe_forward(Graph& g, const MoELayer& layer, const Tensor& x, GateStats* stats,
                          int forced_expert = -1) {
    int t_len = x.dim(0);
    int e = layer.expert_count();
    Tensor gates;
    std::vector<std::vector<int>> routed;
    if (forced_expert >= 0) {
        if (forced_expert >= e) throw ArgError("moe_forward: forced expert out of range");
        gates = Tensor::zeros({t_len, e});
        for (int t = 0; t < t_len; ++t) gates.data()[static_cast<std::size_t>(t) * e + forced_expert] = 1.0f;
        routed.assign(static_cast<std::size_t>(e), {});
        for (int t = 0; t < t_len; ++t) routed[static_cast<std::size_t>(forced_expert)].push_back(t);
    } else {
        Tensor gate_logits = matmul(g, x, layer.gate_w);
        routed = route_tokens(gate_logits, layer.effective_k());
        gates = softmax(g, top_k_mask(g, gate_logits, layer.effective_k()), -1);
    }
    if (stats) {
        stats->gates = gates;
        finalize_gate_stats(*stats);
    }
    Tensor y;
    for (int i = 0; i < e; ++i) {
        const auto& idx = routed[static_cast<std::size_t>(i)];
        if (idx.empty()) continue;
        const Expert& ex = layer.experts[static_cast<std::size_t>(i)];
        Tensor xg = gather_rows(g, x, idx);
        Tensor h = linear(g, xg, ex.w1, ex.b1);
        h = gelu(g, h);
        h = linear(g, h, ex.w2, ex.b2);
        h = mul_rows(g, h, gather_col(g, gates, idx, i));
        Tensor contrib = scatter_add_rows(g, h, idx, t_len);
        y = y.defined() ? add(g, y, contrib) : contrib;
    }
    return y;
}

// Twin-expert block tail on the post-attention hidden state x_hat:
//     l = alpha*(moe_iu(LN(x_hat)) + x_hat) + (1-alpha)*(moe_vg(LN(x_hat)) + x_hat)
// An override of exactly 1 (or 0) computes only the corresponding branch, so
// IU-mode outputs are bit-identical to the pre-twin block.
inline Tensor twin_forward(Graph& g, const Block& block, const Tensor& x_hat,
                           std::optional<float> alpha_override, float ln_eps,
                           std::vector<GateStats>* stats, const std::string& label,
                           int forced_expert = -1) {
    if (alpha_override && (*alpha_override < 0.0f || *alpha_override > 1.0f))
        throw ArgError("twin_forward: alpha override outside [0,1]");
    const TwinExpertLayer& twin = block.twin;
    Tensor h = layer_norm(g, x_hat, block.ln2_g, block.ln2_b, ln_eps);

    auto branch = [&](const MoELayer& moe, const char* tag) {
        GateStats st;
        Tensor y = moe_forward(g, moe, h, stats ? &st : nullptr, forced_expert);
        if (stats) {
            st.layer = label + tag;
            stats->push_back(std::move(st));
        }
        return add(g, y, x_hat);
    };

    if (!twin.vg_active) return branch(twin.iu, ".iu");
    if (alpha_override && *alpha_override == 1.0f) return branch(twin.iu, ".iu");
    if (alpha_override && *alpha_override == 0.0f) return branch(twin.vg, ".vg");

    Tensor l_iu = branch(twin.iu, ".iu");
    Tensor l_vg = branch(twin.vg, ".vg");
    Tensor alpha = alpha_override ? Tensor::scalar(*alpha_override) : sigmoid(g, twin.alpha_raw);
    return convex_mix(g, alpha, l_iu, l_vg);
}

// Causal decoder forward; returns next-token logits at every position.
inline Tensor decoder_forward(Graph& g, const Model& m, const std::vector<int>& tokens,
                              const ForwardOptions& opts = {}, std::vector<GateStats>* stats = nullptr) {
    int t_len = static_cast<int>(tokens.size());
    if (t_len > m.cfg.max_seq_len)
        throw ArgError("decoder_forward: sequence of " + std::to_string(t_len) + " exceeds max_seq_len");
    if (t_len < 2 + kVisualTokens) throw ArgError("decoder_forward: sequence too short for the visual prefix");
    for (int id : tokens)
        if (id < 0 || id >= m.vocab.size()) throw VocabError("decoder_forward: unknown token id " + std::to_string(id));
    if (tokens[0] != Vocabulary::Bos || tokens[1] != Vocabulary::Img)
        throw ArgError("decoder_forward: sequence must begin <bos> <img>");
    for (int i = 0; i < kVisualTokens; ++i)
        if (!m.vocab.is_patch(tokens[static_cast<std::size_t>(i) + 2]))
            throw ArgError("decoder_forward: positions 2..65 must be visual tokens");

    int heads = m.cfg.n_heads;
    float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(m.cfg.d_model / heads));
    Tensor x = embed(g, m.tok_emb, m.pos_emb, tokens);
    for (int bi = 0; bi < m.cfg.n_blocks; ++bi) {
        const Block& b = m.blocks[static_cast<std::size_t>(bi)];
        Tensor a = layer_norm(g, x, b.ln1_g, b.ln1_b, m.cfg.ln_eps);
        Tensor q = split_heads(g, linear(g, a, b.wq, b.bq), heads);
        Tensor k = split_heads(g, linear(g, a, b.wk, b.bk), heads);
        Tensor v = split_heads(g, linear(g, a, b.wv, b.bv), heads);
        Tensor scores = scale(g, bmm_nt(g, q, k), inv_sqrt_hd);
        Tensor probs = causal_softmax(g, scores);
        Tensor ctx = merge_heads(g, bmm(g, probs, v));
        x = add(g, x, linear(g, ctx, b.wo, b.bo));

        if (b.is_moe) {
            x = twin_forward(g, b, x, opts.alpha_override, m.cfg.ln_eps, stats,
                             "block" + std::to_string(bi), opts.forced_expert);
        } else {
            Tensor h = layer_norm(g, x, b.ln2_g, b.ln2_b, m.cfg.ln_eps);
            h = linear(g, h, b.ffn.w1, b.ffn.b1);
            h = gelu(g, h);
            h = linear(g, h, b.ffn.w2, b.ffn.b2);
            x = add(g, x, h);
        }
    }
    x = layer_norm(g, x, m.lnf_g, m.lnf_b, m.cfg.ln_eps);
    return matmul(g, x, m.head_w);
}

// Keeps only stats whose label ends in the given suffix (".iu" or ".vg").
inline std::vector<GateStats> filter_stats(const std::vector<GateStats>& stats, const std::string& suffix) {
    std::vector<GateStats> out;
    for (const auto& st : stats)
        if (st.layer.size() >= suffix.size() &&
            st.layer.compare(st.layer.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(st);
    return out;
}

// --- generation --------------------------------------------------------------

struct GenResult {
    std::vector<int> tokens;      // newly generated tokens (includes <eos> when reached)
    std::vector<float> logprobs;  // log p of each emitted token under the decoded distribution
};

// Greedy decoding. IU mode pins alpha to 1 on every twin layer and masks the
// grounding token set G, so IU outputs cannot contain grounding tokens and do
// not depend on any grounding-tuned parameter. VG mode uses the learned
// alphas. Ties break toward the lowest token id.
inline GenResult generate(const Model& m, const std::vector<int>& prompt, TaskKind mode, int max_new,
                          std::optional<float> alpha_override = std::nullopt) {
    GenResult res;
    std::vector<int> seq = prompt;
    ForwardOptions opts;
    if (mode == TaskKind::IU)
        opts.alpha_override = 1.0f;
    else
        opts.alpha_override = alpha_override;
    int v = m.vocab.size();
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.size()) >= m.cfg.max_seq_len) break;
        Graph g(false);
        Tensor logits = decoder_forward(g, m, seq, opts);
        const float* row = logits.data() + static_cast<std::size_t>(seq.size() - 1) * v;
        std::vector<float> masked(row, row + v);
        if (mode == TaskKind::IU) {
            for (int id = 0; id < v; ++id)
                if (m.vocab.is_grounding_token(id)) masked[static_cast<std::size_t>(id)] = -std::numeric_limits<float>::infinity();
        }
        int best = 0;
        for (int id = 1; id < v; ++id)
            if (masked[static_cast<std::size_t>(id)] > masked[static_cast<std::size_t>(best)]) best = id;
        // log-softmax at the chosen token over the effective distribution
        float mx = masked[static_cast<std::size_t>(best)];
        double denom = 0.0;
        for (int id = 0; id < v; ++id) {
            float val = masked[static_cast<std::size_t>(id)];
            if (std::isfinite(val)) denom += std::exp(static_cast<double>(val) - mx);
        }
        res.tokens.push_back(best);
        res.logprobs.push_back(static_cast<float>(-std::log(denom)));
        seq.push_back(best);
        if (best == Vocabulary::Eos) break;
    }
    return res;
}

// --- grounding fine-tune wiring -----------------------------------------------

// Copies the pretrained IU mixture into the VG mixture: expert i gets IU
// expert (i mod iu_experts), the VG gate keeps the matching IU gate columns,
// and alpha starts at 0 (alpha = 0.5).
inline void init_vg_from_iu(Model& m) {
    if (m.phase == ModelPhase::Fresh) throw StateError("init_vg_from_iu: model has not been pretrained");
    for (auto& b : m.blocks) {
        if (!b.is_moe) continue;
        TwinExpertLayer& twin = b.twin;
        int iu_n = twin.iu.expert_count();
        twin.vg.experts.clear();
        twin.vg.top_k = std::min(m.cfg.top_k, m.cfg.vg_experts);
        for (int i = 0; i < m.cfg.vg_experts; ++i) {
            const Expert& src = twin.iu.experts[static_cast<std::size_t>(i % iu_n)];
            Expert e;
            e.w1 = src.w1.clone();
            e.b1 = src.b1.clone();
            e.w2 = src.w2.clone();
            e.b2 = src.b2.clone();
            twin.vg.experts.push_back(std::move(e));
        }
        int d = m.cfg.d_model;
        twin.vg.gate_w = Tensor::zeros({d, m.cfg.vg_experts}, true);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < m.cfg.vg_experts; ++c)
                twin.vg.gate_w.data()[static_cast<std::size_t>(r) * m.cfg.vg_experts + c] =
                    twin.iu.gate_w.data()[static_cast<std::size_t>(r) * iu_n + (c % iu_n)];
        twin.alpha_raw = Tensor::zeros({1}, true);
        twin.vg_active = true;
    }
}

// Trainable set for the grounding phase: all moe_vg parameters plus the
// per-layer alpha scalars. Everything else stays frozen.
inline std::vector<std::uint8_t> freeze_for_grounding(const Model& m) {
    if (!m.vg_active()) throw StateError("freeze_for_grounding: VG mixture not initialized");
    auto params = m.named_params();
    std::vector<std::uint8_t> mask(params.size(), 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params[i].first;
        if (name.find(".vg.") != std::string::npos || name.find(".alpha_raw") != std::string::npos)
            mask[i] = 1;
    }
    return mask;
}

inline std::vector<std::uint8_t> trainable_all(const Model& m) {
    return std::vector<std::uint8_t>(m.named_params().size(), 1);
}

} // namespace twist
