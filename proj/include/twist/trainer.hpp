#pragma once

// AdamW optimization, the two-phase schedule (IU pretrain, grounding
// fine-tune), run logging, and the checkpoint format:
//   "TWST1\n" | u32 LE metadata length | JSON metadata | raw f32 LE blobs
// The metadata carries the config, phase, a name/shape/offset tensor table,
// optimizer hyperparameters and moment offsets, and the RNG state.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "twist/errors.hpp"
#include "twist/losses.hpp"
#include "twist/model.hpp"
#include "twist/rng.hpp"
#include "twist/scoutgen.hpp"

#include "json.hpp"

namespace twist {

struct AdamWConfig {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

struct OptimState {
    AdamWConfig cfg;
    long step = 0;
    std::vector<std::vector<float>> m, v; // aligned with the parameter walk

    void init(const std::vector<std::pair<std::string, Tensor>>& params) {
        m.clear();
        v.clear();
        step = 0;
        for (const auto& [name, t] : params) {
            m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
            v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
        }
    }
};

// Standard AdamW with decoupled weight decay, applied only where the mask is
// set; frozen parameters are untouched byte-wise.
inline void adamw_step(const std::vector<std::pair<std::string, Tensor>>& params, OptimState& st,
                       const std::vector<std::uint8_t>& mask) {
    if (params.size() != st.m.size() || params.size() != mask.size())
        throw ArgError("adamw_step: parameter/state/mask size mismatch");
    ++st.step;
    double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (!mask[pi]) continue;
        Tensor t = params[pi].second;
        if (st.m[pi].size() != static_cast<std::size_t>(t.numel()))
            throw ArgError("adamw_step: moment shape mismatch for " + params[pi].first);
        const std::vector<float>& gv = t.grad_vec();
        float* w = t.data();
        float* mp = st.m[pi].data();
        float* vp = st.v[pi].data();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            double gval = gv.empty() ? 0.0 : static_cast<double>(gv[static_cast<std::size_t>(i)]);
            double mval = b1 * static_cast<double>(mp[i]) + (1.0 - b1) * gval;
            double vval = b2 * static_cast<double>(vp[i]) + (1.0 - b2) * gval * gval;
            mp[i] = static_cast<float>(mval);
            vp[i] = static_cast<float>(vval);
            double mhat = mval / bc1;
            double vhat = vval / bc2;
            double upd = mhat / (std::sqrt(vhat) + static_cast<double>(st.cfg.eps)) +
                         static_cast<double>(st.cfg.weight_decay) * static_cast<double>(w[i]);
            w[i] = static_cast<float>(static_cast<double>(w[i]) - static_cast<double>(st.cfg.lr) * upd);
        }
    }
}

// Global-norm clip over masked gradients. Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                             const std::vector<std::uint8_t>& mask, double max_norm) {
    double sq = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (!mask[pi]) continue;
        for (float gv : params[pi].second.grad_vec()) sq += static_cast<double>(gv) * gv;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        float s = static_cast<float>(max_norm / norm);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            if (!mask[pi]) continue;
            Tensor t = params[pi].second;
            if (!t.has_grad()) continue;
            float* gp = t.grad();
            for (std::int64_t i = 0; i < t.numel(); ++i) gp[i] *= s;
        }
    }
    return norm;
}

// --- run configuration ----------------------------------------------------------

enum class Phase { Pretrain, Finetune };

inline std::string phase_label(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

struct RunConfig {
    std::uint64_t seed = 0;
    Phase phase = Phase::Pretrain;
    int epochs = 5;
    int batch_size = 32;
    float lr = 3e-4f;
    float lambda = 0.01f;
    StepContext stepwise_context = StepContext::FullContext;
    int eval_cadence = 0;          // epochs between eval-hook calls, 0 = off
    float grad_clip = 1.0f;        // 0 disables clipping
    float weight_decay = 0.01f;
    bool control_unfrozen = false; // baseline: fine-tune everything, no twin path

    void validate() const {
        if (!(lr > 0.0f)) throw ValidationError("run: lr must be > 0");
        if (batch_size < 1) throw ValidationError("run: batch_size must be >= 1");
        if (epochs < 0) throw ValidationError("run: epochs must be >= 0");
        if (lambda < 0.0f) throw ValidationError("run: lambda must be >= 0");
    }
};

struct EpochLog {
    int epoch = 0;
    std::string phase;
    double loss = 0.0;
    double rg = 0.0;
    double alpha_mean = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;

    void write_jsonl(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot open log '" + path + "' for writing");
        for (const auto& e : epochs)
            out << nlohmann::json{{"epoch", e.epoch}, {"phase", e.phase}, {"loss", e.loss},
                                  {"rg", e.rg},       {"alpha_mean", e.alpha_mean}}
                       .dump()
                << "\n";
    }
};

namespace detail_train {

inline std::uint64_t fnv64_bytes(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                 const std::vector<std::uint8_t>& mask, bool hash_frozen) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (static_cast<bool>(mask[i]) == hash_frozen) continue;
        const Tensor& t = params[i].second;
        h = fnv64_bytes(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float), h);
    }
    return h;
}

} // namespace detail_train

using EvalHook = std::function<void(int epoch, const Model&)>;

// Two-phase training. Pretrain: all parameters, IU samples, next-token loss.
// Finetune: init_vg_from_iu + freeze_for_grounding, VG(+negative) samples,
// stepwise loss. The control_unfrozen flag instead fine-tunes every
// parameter on VG data through the plain IU path (the catastrophic-forgetting
// baseline). Fixed seeds give byte-reproducible weights.
inline TrainLog train(Model& m, const std::vector<Sample>& data, const RunConfig& cfg,
                      OptimState* optim_out = nullptr, Pcg32* rng_out = nullptr,
                      const EvalHook& eval_hook = nullptr) {
    cfg.validate();
    if (data.empty()) throw ValidationError("train: empty dataset");
    for (const auto& s : data) {
        if (cfg.phase == Phase::Pretrain && s.task != TaskKind::IU)
            throw ValidationError("train: pretrain phase expects IU samples only (got " + s.id + ")");
        if (cfg.phase == Phase::Finetune && s.task != TaskKind::VG)
            throw ValidationError("train: finetune phase expects VG samples only (got " + s.id + ")");
    }
    if (cfg.phase == Phase::Finetune && m.phase == ModelPhase::Fresh)
        throw StateError("train: finetune requires a pretrained checkpoint");

    std::vector<std::uint8_t> mask;
    if (cfg.phase == Phase::Finetune && !cfg.control_unfrozen) {
        if (!m.vg_active()) init_vg_from_iu(m);
        mask = freeze_for_grounding(m);
    }
    auto params = m.named_params();
    if (mask.empty()) mask.assign(params.size(), 1);

    // Frozen tensors do not need weight gradients at all; dropping their
    // requires_grad flag skips those backward products. Activation gradients
    // still flow through the frozen layers. Restored on exit.
    struct GradFlagGuard {
        std::vector<Tensor> tensors;
        ~GradFlagGuard() {
            for (auto& t : tensors) t.set_requires_grad(true);
        }
    } guard;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask[i]) {
            params[i].second.set_requires_grad(false);
            guard.tensors.push_back(params[i].second);
        }
    }

    OptimState optim;
    optim.cfg.lr = cfg.lr;
    optim.cfg.weight_decay = cfg.weight_decay;
    optim.init(params);

    // Serialize once; oversized samples are a dataset contract violation.
    std::vector<TokenizedSample> encoded;
    encoded.reserve(data.size());
    for (const auto& s : data) {
        TokenizedSample ts = encode_sample(m.vocab, s);
        if (static_cast<int>(ts.tokens.size()) > m.cfg.max_seq_len)
            throw ValidationError("train: sample " + s.id + " exceeds max_seq_len");
        encoded.push_back(std::move(ts));
    }

    LossConfig loss_cfg;
    loss_cfg.lambda = cfg.lambda;
    loss_cfg.stepwise_context = cfg.stepwise_context;

    // R(g) regularizes the gates that actually train in this phase.
    std::string stats_suffix =
        (cfg.phase == Phase::Pretrain || cfg.control_unfrozen) ? ".iu" : ".vg";

    ForwardFn fwd = [&m, &stats_suffix](Graph& g, const std::vector<int>& tokens,
                                        std::vector<GateStats>* stats) {
        std::vector<GateStats> all;
        Tensor logits = decoder_forward(g, m, tokens, {}, stats ? &all : nullptr);
        if (stats) *stats = filter_stats(all, stats_suffix);
        return logits;
    };

    std::uint64_t frozen_hash = detail_train::hash_params(params, mask, true);

    Pcg32 rng(cfg.seed, 0x7a1137u);
    TrainLog log;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Deterministic shuffle keyed by (seed, epoch).
        Pcg32 shuffle_rng(cfg.seed, 0x5u + static_cast<std::uint64_t>(epoch) * 2u + 1u);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.bounded(static_cast<std::uint32_t>(i))]);

        double epoch_loss = 0.0, epoch_rg = 0.0;
        std::size_t n_samples = 0, n_rg = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            float inv_b = 1.0f / static_cast<float>(end - start);
            for (auto& [name, t] : params) t.zero_grad();
            for (std::size_t bi = start; bi < end; ++bi) {
                const TokenizedSample& ts = encoded[order[bi]];
                Graph g;
                LossBreakdown parts;
                Tensor loss;
                if (cfg.phase == Phase::Pretrain) {
                    std::vector<GateStats> stats;
                    Tensor logits = fwd(g, ts.tokens, &stats);
                    loss = next_token_loss(g, logits, shifted_targets(ts), stats, loss_cfg, &parts);
                } else {
                    loss = stepwise_loss(g, fwd, ts, loss_cfg, &parts);
                }
                epoch_loss += parts.total;
                if (parts.rg > 0.0) {
                    epoch_rg += parts.rg;
                    ++n_rg;
                }
                ++n_samples;
                backward(g, scale(g, loss, inv_b));
            }
            if (cfg.grad_clip > 0.0f) clip_grad_norm(params, mask, cfg.grad_clip);
            adamw_step(params, optim, mask);
        }

        if (detail_train::hash_params(params, mask, true) != frozen_hash)
            throw StateError("train: frozen parameters changed during epoch " + std::to_string(epoch + 1));

        EpochLog el;
        el.epoch = epoch + 1;
        el.phase = phase_label(cfg.phase);
        el.loss = n_samples ? epoch_loss / static_cast<double>(n_samples) : 0.0;
        el.rg = n_rg ? epoch_rg / static_cast<double>(n_rg) : 0.0;
        el.alpha_mean = m.alpha_mean();
        log.epochs.push_back(el);
        if (eval_hook && cfg.eval_cadence > 0 && (epoch + 1) % cfg.eval_cadence == 0)
            eval_hook(epoch + 1, m);
    }

    m.phase = cfg.phase == Phase::Pretrain ? ModelPhase::Pretrained : ModelPhase::Finetuned;
    if (optim_out) *optim_out = std::move(optim);
    if (rng_out) *rng_out = rng;
    return log;
}

// --- checkpoints -------------------------------------------------------------------

inline constexpr char kCkptMagic[6] = {'T', 'W', 'S', 'T', '1', '\n'};

inline void save_checkpoint(const Model& m, const OptimState* optim, const Pcg32* rng,
                            const std::string& path) {
    auto params = m.named_params();
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    }
    nlohmann::json meta{{"version", 1},
                        {"config", m.cfg.to_json()},
                        {"phase", phase_name(m.phase)},
                        {"vg_active", m.vg_active()},
                        {"tensors", std::move(tensors)}};
    if (optim) {
        meta["optim"] = {{"step", optim->step},
                         {"lr", optim->cfg.lr},
                         {"beta1", optim->cfg.beta1},
                         {"beta2", optim->cfg.beta2},
                         {"eps", optim->cfg.eps},
                         {"weight_decay", optim->cfg.weight_decay},
                         {"m_offset", offset},
                         {"v_offset", offset * 2}};
    } else {
        meta["optim"] = nullptr;
    }
    if (rng)
        meta["rng"] = {{"state", rng->state()}, {"inc", rng->inc()}};
    else
        meta["rng"] = nullptr;

    std::string meta_str = meta.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint '" + path + "' for writing");
    out.write(kCkptMagic, sizeof(kCkptMagic));
    std::uint32_t len = static_cast<std::uint32_t>(meta_str.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len)); // little-endian host
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const auto& [name, t] : params)
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (optim) {
        for (const auto& mv : optim->m)
            out.write(reinterpret_cast<const char*>(mv.data()),
                      static_cast<std::streamsize>(mv.size() * sizeof(float)));
        for (const auto& vv : optim->v)
            out.write(reinterpret_cast<const char*>(vv.data()),
                      static_cast<std::streamsize>(vv.size() * sizeof(float)));
    }
    if (!out) throw FormatError("checkpoint write failed for '" + path + "'");
}

struct Checkpoint {
    Model model;
    std::optional<OptimState> optim;
    std::optional<std::pair<std::uint64_t, std::uint64_t>> rng; // state, inc
};

// Creates zero-filled VG structures so a checkpoint's tensor table can be
// filled; init_vg_from_iu covers the training-time path.
inline void ensure_vg_structure(Model& m) {
    for (auto& b : m.blocks) {
        if (!b.is_moe || b.twin.vg_active) continue;
        b.twin.vg.top_k = std::min(m.cfg.top_k, m.cfg.vg_experts);
        b.twin.vg.gate_w = Tensor::zeros({m.cfg.d_model, m.cfg.vg_experts}, true);
        for (int i = 0; i < m.cfg.vg_experts; ++i) {
            Expert e;
            e.w1 = Tensor::zeros({m.cfg.d_model, m.cfg.ffn_hidden}, true);
            e.b1 = Tensor::zeros({m.cfg.ffn_hidden}, true);
            e.w2 = Tensor::zeros({m.cfg.ffn_hidden, m.cfg.d_model}, true);
            e.b2 = Tensor::zeros({m.cfg.d_model}, true);
            b.twin.vg.experts.push_back(std::move(e));
        }
        b.twin.alpha_raw = Tensor::zeros({1}, true);
        b.twin.vg_active = true;
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kCkptMagic) + sizeof(std::uint32_t))
        throw FormatError("checkpoint truncated at offset 0");
    if (std::memcmp(bytes.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
        throw FormatError("bad checkpoint magic at offset 0");
    std::uint32_t meta_len = 0;
    std::memcpy(&meta_len, bytes.data() + sizeof(kCkptMagic), sizeof(meta_len));
    std::size_t header = sizeof(kCkptMagic) + sizeof(std::uint32_t);
    if (bytes.size() < header + meta_len)
        throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()));
    nlohmann::json meta = nlohmann::json::parse(bytes.substr(header, meta_len), nullptr, false);
    if (meta.is_discarded()) throw FormatError("checkpoint metadata is not valid JSON");

    Checkpoint ck;
    try {
        if (meta.at("version").get<int>() != 1)
            throw FormatError("unsupported checkpoint version " + meta.at("version").dump());
        ModelConfig cfg = ModelConfig::from_json(meta.at("config"));
        ck.model = init_model(cfg, 0);
        ck.model.phase = phase_from_name(meta.at("phase").get<std::string>());
        if (meta.at("vg_active").get<bool>()) ensure_vg_structure(ck.model);

        auto params = ck.model.named_params();
        const auto& table = meta.at("tensors");
        if (table.size() != params.size())
            throw FormatError("checkpoint tensor table has " + std::to_string(table.size()) +
                              " entries, expected " + std::to_string(params.size()));
        std::size_t blob_base = header + meta_len;
        std::uint64_t expect_offset = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& entry = table[i];
            if (entry.at("name").get<std::string>() != params[i].first)
                throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" +
                                  entry.at("name").get<std::string>() + "', expected '" + params[i].first + "'");
            if (entry.at("shape").get<Shape>() != params[i].second.shape())
                throw FormatError("checkpoint shape mismatch for " + params[i].first);
            if (entry.at("offset").get<std::uint64_t>() != expect_offset)
                throw FormatError("checkpoint offset mismatch for " + params[i].first);
            expect_offset += static_cast<std::uint64_t>(params[i].second.numel()) * sizeof(float);
        }
        std::uint64_t blob_size = expect_offset;
        bool has_optim = !meta.at("optim").is_null();
        std::uint64_t total = blob_base + blob_size * (has_optim ? 3 : 1);
        if (bytes.size() != total)
            throw FormatError("checkpoint size " + std::to_string(bytes.size()) + " != expected " +
                              std::to_string(total));
        std::uint64_t off = 0;
        for (auto& [name, t] : params) {
            std::memcpy(t.data(), bytes.data() + blob_base + off,
                        static_cast<std::size_t>(t.numel()) * sizeof(float));
            off += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
        }
        if (has_optim) {
            OptimState st;
            const auto& jo = meta.at("optim");
            st.cfg.lr = jo.at("lr").get<float>();
            st.cfg.beta1 = jo.at("beta1").get<float>();
            st.cfg.beta2 = jo.at("beta2").get<float>();
            st.cfg.eps = jo.at("eps").get<float>();
            st.cfg.weight_decay = jo.at("weight_decay").get<float>();
            st.init(params);
            st.step = jo.at("step").get<long>();
            std::size_t mo = blob_base + blob_size, vo = blob_base + 2 * blob_size;
            for (std::size_t i = 0; i < params.size(); ++i) {
                std::size_t nbytes = st.m[i].size() * sizeof(float);
                std::memcpy(st.m[i].data(), bytes.data() + mo, nbytes);
                std::memcpy(st.v[i].data(), bytes.data() + vo, nbytes);
                mo += nbytes;
                vo += nbytes;
            }
            ck.optim = std::move(st);
        }
        if (!meta.at("rng").is_null())
            ck.rng = std::make_pair(meta.at("rng").at("state").get<std::uint64_t>(),
                                    meta.at("rng").at("inc").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    return ck;
}

} // namespace twist
