#pragma once

// Model-driven evaluation protocols: IU exact match, REC over referring
// queries, the object-query grounding protocol (mIoU buckets + COCO-style AP
// from parsed captions), negative-query F1, and the random-box baseline.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "twist/groundeval.hpp"
#include "twist/model.hpp"
#include "twist/scoutgen.hpp"
#include "twist/threads.hpp"

namespace twist {

struct EvalOptions {
    int threads = 1;
    std::optional<float> alpha_override; // VG-mode alpha (alpha-gating ablation)
    int max_new_iu = 8;
    int max_new_vg = 56;
    const SynonymTable* synonyms = nullptr;
};

// IU-mode generations, detokenized; used for both quality (exact match vs the
// reference answer) and forget checking (byte comparison across checkpoints).
inline std::vector<std::string> run_iu_outputs(const Model& m, const std::vector<Sample>& samples,
                                               const EvalOptions& opts = {}) {
    std::vector<std::string> out(samples.size());
    parallel_for(samples.size(), opts.threads, [&](std::size_t i) {
        const Sample& s = samples[i];
        auto prefix = encode_prefix(m.vocab, s.scene, s.prompt);
        GenResult res = generate(m, prefix, TaskKind::IU, opts.max_new_iu);
        out[i] = m.vocab.detokenize(res.tokens);
    });
    return out;
}

inline double iu_exact_match(const std::vector<std::string>& outputs, const std::vector<Sample>& samples) {
    if (outputs.size() != samples.size()) throw ArgError("iu_exact_match: size mismatch");
    if (outputs.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) ok += (outputs[i] == samples[i].answer);
    return static_cast<double>(ok) / static_cast<double>(outputs.size());
}

namespace detail_proto {

// Last box mentioned in the sample's own steps: the anchor restatement for
// "where" samples, the found object for "what"-relation samples.
inline std::optional<BBox> reference_box(const Sample& s) {
    std::optional<BBox> last;
    for (const auto& step : s.steps)
        for (const auto& d : parse_grounded_caption(step)) last = d.box;
    return last;
}

struct GenParse {
    std::string text;
    std::vector<Detection> dets; // scored, image_id unset
    int malformed = 0;
    bool invalid = false; // output contains <invalid>
};

// Scores come from the emitted coordinate tokens: exp(mean log-probability)
// of the four coordinates of each well-formed box group, attached to parsed
// detections in order.
inline GenParse generate_and_parse(const Model& m, const Scene& scene, const std::string& prompt,
                                   const EvalOptions& opts) {
    GenParse gp;
    auto prefix = encode_prefix(m.vocab, scene, prompt);
    GenResult res = generate(m, prefix, TaskKind::VG, opts.max_new_vg, opts.alpha_override);
    gp.text = m.vocab.detokenize(res.tokens);
    ParseDiagnostics diag;
    gp.dets = parse_grounded_caption(gp.text, &diag, &m.vocab);
    gp.malformed = diag.malformed;
    std::vector<float> scores;
    const auto& toks = res.tokens;
    for (std::size_t i = 0; i + 5 < toks.size(); ++i) {
        if (toks[i] == Vocabulary::BoxOpen && m.vocab.is_x(toks[i + 1]) && m.vocab.is_y(toks[i + 2]) &&
            m.vocab.is_x(toks[i + 3]) && m.vocab.is_y(toks[i + 4]) && toks[i + 5] == Vocabulary::BoxClose) {
            double lp = 0.0;
            for (std::size_t k = i + 1; k <= i + 4; ++k) lp += static_cast<double>(res.logprobs[k]);
            scores.push_back(static_cast<float>(std::exp(lp / 4.0)));
        }
        if (toks[i] == Vocabulary::Invalid) gp.invalid = true;
    }
    for (int t : toks)
        if (t == Vocabulary::Invalid) gp.invalid = true;
    for (std::size_t k = 0; k < gp.dets.size() && k < scores.size(); ++k) gp.dets[k].score = scores[k];
    return gp;
}

} // namespace detail_proto

struct RecEvalResult {
    double rec_acc = 0.0;
    std::vector<std::optional<BBox>> preds;
    std::vector<BBox> gts;
};

// One generation per referring query; the prediction is the last box in the
// output, the reference is the last box in the sample's steps.
inline RecEvalResult run_rec_eval(const Model& m, const std::vector<Sample>& positives,
                                  const EvalOptions& opts = {}) {
    RecEvalResult r;
    r.preds.resize(positives.size());
    r.gts.resize(positives.size());
    std::vector<std::optional<BBox>> refs(positives.size());
    for (std::size_t i = 0; i < positives.size(); ++i) refs[i] = detail_proto::reference_box(positives[i]);
    parallel_for(positives.size(), opts.threads, [&](std::size_t i) {
        const Sample& s = positives[i];
        if (!refs[i]) throw ArgError("rec eval: sample " + s.id + " has no reference box");
        auto gp = detail_proto::generate_and_parse(m, s.scene, s.prompt, opts);
        r.preds[i] = gp.dets.empty() ? std::nullopt : std::optional<BBox>(gp.dets.back().box);
        r.gts[i] = *refs[i];
    });
    r.rec_acc = rec_accuracy(r.preds, r.gts);
    return r;
}

struct ObjectQueryResult {
    std::vector<GroundTruthBox> gts;        // every object of every distinct scene
    std::vector<std::optional<BBox>> preds; // last parsed box per object query
    std::vector<Detection> detections;      // all parsed boxes, scored and mapped
    int parsed_total = 0;
    int unmapped = 0;
    MeanIouResult miou;
    CocoApResult ap;
    double unmapped_fraction = 0.0;
};

// The grounded-captioning analog: prompt "where is the <color> <cat>?" for
// every object of every distinct scene, parse all boxes with their phrases,
// map phrases to categories, and score detections against all objects.
// Exact duplicate (category, box) detections per image keep the best score.
inline ObjectQueryResult run_object_queries(const Model& m, const std::vector<Scene>& scenes,
                                            const EvalOptions& opts = {}) {
    ObjectQueryResult r;
    struct Query {
        int scene_ix;
        int obj_ix;
    };
    std::vector<Query> queries;
    for (int si = 0; si < static_cast<int>(scenes.size()); ++si) {
        const Scene& sc = scenes[static_cast<std::size_t>(si)];
        for (int oi = 0; oi < static_cast<int>(sc.objects.size()); ++oi) {
            queries.push_back({si, oi});
            r.gts.push_back({si, sc.objects[static_cast<std::size_t>(oi)].category,
                             sc.objects[static_cast<std::size_t>(oi)].box});
        }
    }
    r.preds.resize(queries.size());
    std::vector<std::vector<Detection>> per_query(queries.size());
    parallel_for(queries.size(), opts.threads, [&](std::size_t qi) {
        const Query& q = queries[qi];
        const Scene& sc = scenes[static_cast<std::size_t>(q.scene_ix)];
        const SceneObject& obj = sc.objects[static_cast<std::size_t>(q.obj_ix)];
        auto gp = detail_proto::generate_and_parse(
            m, sc, "where is the " + obj.color + " " + obj.category + "?", opts);
        r.preds[qi] = gp.dets.empty() ? std::nullopt : std::optional<BBox>(gp.dets.back().box);
        for (auto& d : gp.dets) {
            d.image_id = q.scene_ix;
            d.mapped_category = map_name_to_category(d.phrase, {categories().begin(), categories().end()},
                                                     opts.synonyms);
            per_query[qi].push_back(std::move(d));
        }
    });
    // Deterministic flatten, then per-image de-dup on (category, box).
    std::map<std::tuple<int, std::string, int, int, int, int>, std::size_t> dedup;
    for (auto& dets : per_query) {
        for (auto& d : dets) {
            ++r.parsed_total;
            if (!d.mapped_category) {
                ++r.unmapped;
                continue;
            }
            auto key = std::make_tuple(d.image_id, *d.mapped_category, d.box.x1, d.box.y1, d.box.x2, d.box.y2);
            auto it = dedup.find(key);
            if (it == dedup.end()) {
                dedup[key] = r.detections.size();
                r.detections.push_back(d);
            } else if (d.score > r.detections[it->second].score) {
                r.detections[it->second].score = d.score;
            }
        }
    }
    r.miou = mean_iou_protocol(r.preds, r.gts);
    r.ap = coco_ap(r.detections, r.gts);
    r.unmapped_fraction = r.parsed_total ? static_cast<double>(r.unmapped) / r.parsed_total : 0.0;
    return r;
}

struct InvalidF1Result {
    double f1 = 0.0, precision = 0.0, recall = 0.0;
    int tp = 0, fp = 0, fn = 0;
};

// Invalid-question detection: a query counts as predicted-invalid when the
// output contains <invalid>. Negatives are the positive class.
inline InvalidF1Result run_invalid_f1(const Model& m, const std::vector<Sample>& negatives,
                                      const std::vector<Sample>& positives, const EvalOptions& opts = {}) {
    std::vector<std::uint8_t> neg_pred(negatives.size(), 0), pos_pred(positives.size(), 0);
    parallel_for(negatives.size(), opts.threads, [&](std::size_t i) {
        neg_pred[i] = detail_proto::generate_and_parse(m, negatives[i].scene, negatives[i].prompt, opts).invalid;
    });
    parallel_for(positives.size(), opts.threads, [&](std::size_t i) {
        pos_pred[i] = detail_proto::generate_and_parse(m, positives[i].scene, positives[i].prompt, opts).invalid;
    });
    InvalidF1Result r;
    for (auto v : neg_pred) (v ? r.tp : r.fn) += 1;
    for (auto v : pos_pred) r.fp += v ? 1 : 0;
    r.precision = (r.tp + r.fp) ? static_cast<double>(r.tp) / (r.tp + r.fp) : 0.0;
    r.recall = (r.tp + r.fn) ? static_cast<double>(r.tp) / (r.tp + r.fn) : 0.0;
    r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

// Random-box baseline drawn from the generator's own side/placement
// distribution; the denominator for the "times random" REC margin.
inline double random_box_rec_baseline(const std::vector<BBox>& gts, std::uint64_t seed) {
    Pcg32 rng(seed, 0xba5e11u);
    std::vector<std::optional<BBox>> preds;
    preds.reserve(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
        int w = kMinSide + static_cast<int>(rng.bounded(kMaxSide - kMinSide + 1));
        int h = kMinSide + static_cast<int>(rng.bounded(kMaxSide - kMinSide + 1));
        BBox b;
        b.x1 = static_cast<int>(rng.bounded(static_cast<std::uint32_t>(kCanvas - w + 1)));
        b.y1 = static_cast<int>(rng.bounded(static_cast<std::uint32_t>(kCanvas - h + 1)));
        b.x2 = b.x1 + w;
        b.y2 = b.y1 + h;
        preds.emplace_back(b);
    }
    return rec_accuracy(preds, gts);
}

struct GroundingEval {
    double rec = 0.0; // object-query REC: last parsed box vs the queried object
    MeanIouResult miou;
    CocoApResult ap;
    double unmapped_fraction = 0.0;
};

// One pass of the object-query protocol over held-out scenes, reduced to the
// grounding scores the ablations compare.
inline GroundingEval run_grounding_eval(const Model& m, const std::vector<Scene>& scenes,
                                        const EvalOptions& opts = {}) {
    ObjectQueryResult oq = run_object_queries(m, scenes, opts);
    GroundingEval ge;
    std::vector<BBox> gt_boxes;
    gt_boxes.reserve(oq.gts.size());
    for (const auto& g : oq.gts) gt_boxes.push_back(g.box);
    ge.rec = rec_accuracy(oq.preds, gt_boxes);
    ge.miou = oq.miou;
    ge.ap = oq.ap;
    ge.unmapped_fraction = oq.unmapped_fraction;
    return ge;
}

// Full dataset evaluation: IU exact match over IU samples, REC over positive
// VG prompts, object-query grounding over the distinct positive scenes, and
// invalid-question F1 over negatives vs positives.
inline EvalReport evaluate_model(const Model& m, const std::vector<Sample>& samples,
                                 const EvalOptions& opts = {}) {
    std::vector<Sample> iu, pos, neg;
    for (const auto& s : samples) {
        if (s.task == TaskKind::IU)
            iu.push_back(s);
        else if (s.negative)
            neg.push_back(s);
        else
            pos.push_back(s);
    }
    EvalReport rep;
    if (!iu.empty()) rep.iu_exact_match = iu_exact_match(run_iu_outputs(m, iu, opts), iu);
    if (!pos.empty()) {
        rep.rec_acc = run_rec_eval(m, pos, opts).rec_acc;
        std::vector<Scene> scenes;
        std::set<std::uint64_t> seen;
        for (const auto& s : pos)
            if (seen.insert(s.scene.seed).second) scenes.push_back(s.scene);
        ObjectQueryResult oq = run_object_queries(m, scenes, opts);
        rep.miou = oq.miou.miou;
        rep.miou_m = oq.miou.miou_m;
        rep.miou_l = oq.miou.miou_l;
        rep.ap = oq.ap.ap;
        rep.ap50 = oq.ap.ap50;
        rep.ap_l = oq.ap.ap_l;
        rep.unmapped_fraction = oq.unmapped_fraction;
    }
    if (!neg.empty()) rep.invalid_f1 = run_invalid_f1(m, neg, pos, opts).f1;
    return rep;
}

} // namespace twist
