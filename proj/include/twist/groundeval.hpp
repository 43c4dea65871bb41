#pragma once

// Grounded-output evaluation: caption parsing, name-to-category mapping,
// COCO-style AP, PIN-style mIoU buckets, REC accuracy and forget checking.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "twist/errors.hpp"
#include "twist/scenes.hpp"
#include "twist/vocab.hpp"

#include "json.hpp"

namespace twist {

struct Detection {
    std::string phrase;
    BBox box;
    float score = 1.0f;
    std::optional<std::string> mapped_category;
    int image_id = 0;
};

struct GroundTruthBox {
    int image_id = 0;
    std::string category;
    BBox box;
};

struct ParseDiagnostics {
    int malformed = 0; // bracket/token groups that did not yield a valid box
};

namespace detail_eval {

inline const std::set<std::string>& stop_words() {
    static const std::set<std::string> s = {"a",  "an",  "the", "at", "is",  "are", "was",  "were",
                                            "of", "to",  "in",  "on", "it",  "its", "this", "that",
                                            "there", "located", "found", "and", "or", "near", "with"};
    return s;
}

// Break characters that end a phrase run; ':' and ',' do not break so runs
// like "the red circle: it is at [..]" keep the object words.
inline bool run_breaker(char c) {
    return c == '[' || c == ']' || c == '<' || c == '>' || c == '\n' || c == '.' || c == '?' ||
           c == '!' || c == ';';
}

// Up to `max_words` words immediately preceding position `pos`, stop words
// trimmed from both ends.
inline std::string phrase_before(const std::string& text, std::size_t pos, int max_words = 5) {
    std::vector<std::string> words;
    std::string cur;
    std::size_t i = pos;
    while (i > 0 && static_cast<int>(words.size()) < max_words + 1) {
        char c = text[i - 1];
        if (run_breaker(c)) break;
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.insert(cur.begin(), static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            words.insert(words.begin(), cur);
            cur.clear();
        }
        --i;
    }
    if (!cur.empty() && static_cast<int>(words.size()) < max_words + 1) words.insert(words.begin(), cur);
    while (static_cast<int>(words.size()) > max_words) words.erase(words.begin());
    while (!words.empty() && stop_words().count(words.front())) words.erase(words.begin());
    while (!words.empty() && stop_words().count(words.back())) words.pop_back();
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

inline std::optional<BBox> box_from_ints(const std::vector<long>& vals) {
    if (vals.size() != 4) return std::nullopt;
    BBox b;
    b.x1 = static_cast<int>(std::clamp(vals[0], 0L, static_cast<long>(kCanvas)));
    b.y1 = static_cast<int>(std::clamp(vals[1], 0L, static_cast<long>(kCanvas)));
    b.x2 = static_cast<int>(std::clamp(vals[2], 0L, static_cast<long>(kCanvas)));
    b.y2 = static_cast<int>(std::clamp(vals[3], 0L, static_cast<long>(kCanvas)));
    if (!b.valid()) return std::nullopt;
    return b;
}

// Parses "<box> <x_a> <y_b> <x_c> <y_d> </box>" starting at `i` (which points
// at "<box>"). Returns the end position past "</box>" on success.
inline std::optional<std::pair<BBox, std::size_t>> parse_token_box(const std::string& text, std::size_t i,
                                                                   const Vocabulary& vocab) {
    auto skip_ws = [&](std::size_t p) {
        while (p < text.size() && (text[p] == ' ' || text[p] == '\t')) ++p;
        return p;
    };
    auto expect = [&](std::size_t p, const std::string& lit) -> std::optional<std::size_t> {
        if (text.compare(p, lit.size(), lit) == 0) return p + lit.size();
        return std::nullopt;
    };
    auto coord = [&](std::size_t p, char axis) -> std::optional<std::pair<int, std::size_t>> {
        std::string prefix = std::string("<") + axis + "_";
        if (text.compare(p, prefix.size(), prefix) != 0) return std::nullopt;
        std::size_t q = p + prefix.size(), start = q;
        while (q < text.size() && std::isdigit(static_cast<unsigned char>(text[q]))) ++q;
        if (q == start || q >= text.size() || text[q] != '>') return std::nullopt;
        int bin = std::stoi(text.substr(start, q - start));
        if (bin < 0 || bin >= vocab.coord_bins()) return std::nullopt;
        return std::make_pair(bin, q + 1);
    };
    auto p0 = expect(i, "<box>");
    if (!p0) return std::nullopt;
    auto c1 = coord(skip_ws(*p0), 'x');
    if (!c1) return std::nullopt;
    auto c2 = coord(skip_ws(c1->second), 'y');
    if (!c2) return std::nullopt;
    auto c3 = coord(skip_ws(c2->second), 'x');
    if (!c3) return std::nullopt;
    auto c4 = coord(skip_ws(c3->second), 'y');
    if (!c4) return std::nullopt;
    auto pend = expect(skip_ws(c4->second), "</box>");
    if (!pend) return std::nullopt;
    BBox b{vocab.dequantize_lo(c1->first), vocab.dequantize_lo(c2->first),
           vocab.dequantize_hi(c3->first), vocab.dequantize_hi(c4->first)};
    if (!b.valid()) return std::nullopt;
    return std::make_pair(b, *pend);
}

} // namespace detail_eval

// Extracts (phrase, box) detections from free-form text. Accepts pixel
// bracket groups "circle at [12, 5, 40, 33]" and the literal token form
// "<box><x_a><y_b><x_c><y_d></box>" (de-quantized to pixels). Malformed
// groups are skipped and counted; scores are left at the default.
inline std::vector<Detection> parse_grounded_caption(const std::string& text,
                                                     ParseDiagnostics* diag = nullptr,
                                                     const Vocabulary* vocab = nullptr) {
    static const Vocabulary default_vocab(64);
    const Vocabulary& vb = vocab ? *vocab : default_vocab;
    std::vector<Detection> out;
    ParseDiagnostics local;
    std::size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c == '[') {
            std::size_t close = text.find(']', i);
            if (close == std::string::npos) {
                ++local.malformed;
                break;
            }
            std::vector<long> vals;
            bool ok = true;
            std::size_t p = i + 1;
            while (p < close) {
                while (p < close && (text[p] == ' ' || text[p] == ',')) ++p;
                if (p >= close) break;
                std::size_t q = p;
                while (q < close && std::isdigit(static_cast<unsigned char>(text[q]))) ++q;
                if (q == p) {
                    ok = false;
                    break;
                }
                vals.push_back(std::stol(text.substr(p, q - p)));
                p = q;
            }
            auto box = ok ? detail_eval::box_from_ints(vals) : std::nullopt;
            if (box) {
                Detection d;
                d.phrase = detail_eval::phrase_before(text, i);
                d.box = *box;
                out.push_back(std::move(d));
            } else {
                ++local.malformed;
            }
            i = close + 1;
        } else if (text.compare(i, 5, "<box>") == 0) {
            auto parsed = detail_eval::parse_token_box(text, i, vb);
            if (parsed) {
                Detection d;
                d.phrase = detail_eval::phrase_before(text, i);
                d.box = parsed->first;
                out.push_back(std::move(d));
                i = parsed->second;
            } else {
                ++local.malformed;
                i += 5;
            }
        } else {
            ++i;
        }
    }
    if (diag) *diag = local;
    return out;
}

// Serializes detections back to bracket text ("phrase [x1, y1, x2, y2] ...").
inline std::string detections_to_text(const std::vector<Detection>& dets) {
    std::string out;
    for (const auto& d : dets) {
        if (!out.empty()) out += ". ";
        if (!d.phrase.empty()) out += d.phrase + " ";
        out += "[" + std::to_string(d.box.x1) + ", " + std::to_string(d.box.y1) + ", " +
               std::to_string(d.box.x2) + ", " + std::to_string(d.box.y2) + "]";
    }
    return out;
}

// --- name -> category mapping ---------------------------------------------------

// Two-column "alias<TAB>category" UTF-8 file.
class SynonymTable {
public:
    SynonymTable() = default;

    static SynonymTable load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open synonym file '" + path + "'");
        SynonymTable t;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw FormatError(path + ":" + std::to_string(lineno) + ": expected alias<TAB>category");
            t.map_[line.substr(0, tab)] = line.substr(tab + 1);
        }
        return t;
    }

    void add(const std::string& alias, const std::string& category) { map_[alias] = category; }

    std::optional<std::string> lookup(const std::string& alias) const {
        auto it = map_.find(alias);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::map<std::string, std::string> map_;
};

namespace detail_eval {

inline std::string singularize(const std::string& w) {
    if (w.size() > 3 && w.back() == 's') return w.substr(0, w.size() - 1);
    return w;
}

inline std::vector<std::string> normalized_words(const std::string& name) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else if (!cur.empty()) {
            out.push_back(singularize(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(singularize(cur));
    return out;
}

} // namespace detail_eval

// Matching cascade: normalize (lowercase, strip punctuation, naive
// singularization), then exact match, synonym lookup, best token-Jaccard
// >= 0.5, token containment; ties resolve to the lexicographically smallest
// category. Returns nullopt when nothing matches.
inline std::optional<std::string> map_name_to_category(const std::string& name,
                                                       const std::vector<std::string>& category_table,
                                                       const SynonymTable* synonyms = nullptr) {
    if (category_table.empty()) throw ArgError("map_name_to_category: empty category table");
    auto words = detail_eval::normalized_words(name);
    if (words.empty()) return std::nullopt;
    std::string joined;
    for (const auto& w : words) {
        if (!joined.empty()) joined += ' ';
        joined += w;
    }
    std::vector<std::string> cats = category_table;
    std::sort(cats.begin(), cats.end());
    for (const auto& c : cats)
        if (joined == c) return c;
    if (synonyms) {
        if (auto hit = synonyms->lookup(joined)) {
            for (const auto& c : cats)
                if (c == *hit) return c;
        }
    }
    std::set<std::string> word_set(words.begin(), words.end());
    double best_j = 0.0;
    std::optional<std::string> best;
    for (const auto& c : cats) {
        auto cat_words = detail_eval::normalized_words(c);
        std::set<std::string> cat_set(cat_words.begin(), cat_words.end());
        std::size_t inter = 0;
        for (const auto& w : cat_set) inter += word_set.count(w);
        double uni = static_cast<double>(word_set.size() + cat_set.size() - inter);
        double j = uni > 0 ? static_cast<double>(inter) / uni : 0.0;
        if (j >= 0.5 && j > best_j) {
            best_j = j;
            best = c;
        }
    }
    if (best) return best;
    for (const auto& c : cats)
        if (word_set.count(c)) return c;
    return std::nullopt;
}

// --- COCO-style AP ---------------------------------------------------------------

struct CocoApResult {
    double ap = 0.0;   // mean over IoU thresholds 0.50:0.05:0.95
    double ap50 = 0.0; // at IoU 0.50
    double ap_l = 0.0; // large bucket only (GTs and detections)
};

namespace detail_eval {

// Average precision for one category at one threshold: detections sorted by
// score desc (stable), each greedily matched to the unmatched same-image GT
// with the highest IoU >= thr (ties toward the lowest GT index); 101-point
// interpolated PR integral.
inline double ap_single(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                        double thr) {
    if (gts.empty()) return 0.0;
    std::vector<int> det_order(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) det_order[i] = static_cast<int>(i);
    std::stable_sort(det_order.begin(), det_order.end(),
                     [&dets](int a, int b) { return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score; });
    std::vector<bool> gt_matched(gts.size(), false);
    std::vector<bool> tp(dets.size(), false);
    for (std::size_t k = 0; k < det_order.size(); ++k) {
        const Detection& d = dets[static_cast<std::size_t>(det_order[k])];
        double best_iou = 0.0;
        int best_gt = -1;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_matched[gi] || gts[gi].image_id != d.image_id) continue;
            double v = iou(d.box, gts[gi].box);
            if (v >= thr && v > best_iou) {
                best_iou = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) {
            gt_matched[static_cast<std::size_t>(best_gt)] = true;
            tp[k] = true;
        }
    }
    std::vector<double> precision, recall;
    int tp_cum = 0;
    for (std::size_t k = 0; k < tp.size(); ++k) {
        tp_cum += tp[k] ? 1 : 0;
        precision.push_back(static_cast<double>(tp_cum) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp_cum) / static_cast<double>(gts.size()));
    }
    double ap = 0.0;
    for (int ri = 0; ri <= 100; ++ri) {
        double r = ri / 100.0;
        double p = 0.0;
        for (std::size_t k = 0; k < precision.size(); ++k)
            if (recall[k] >= r) p = std::max(p, precision[k]);
        ap += p;
    }
    return ap / 101.0;
}

inline double mean_ap_over_categories(const std::vector<Detection>& dets,
                                      const std::vector<GroundTruthBox>& gts, double thr) {
    std::set<std::string> cats;
    for (const auto& g : gts) cats.insert(g.category);
    if (cats.empty()) return 0.0;
    double total = 0.0;
    for (const auto& c : cats) {
        std::vector<Detection> dc;
        for (const auto& d : dets)
            if (d.mapped_category && *d.mapped_category == c) dc.push_back(d);
        std::vector<GroundTruthBox> gc;
        for (const auto& g : gts)
            if (g.category == c) gc.push_back(g);
        total += ap_single(dc, gc, thr);
    }
    return total / static_cast<double>(cats.size());
}

} // namespace detail_eval

// Detections must carry scores and mapped categories; unmapped detections are
// the caller's to exclude (reported via unmapped_fraction elsewhere). AP_L
// restricts both ground truths and detections to the large size bucket.
inline CocoApResult coco_ap(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts) {
    std::vector<Detection> mapped;
    for (const auto& d : dets)
        if (d.mapped_category) mapped.push_back(d);
    CocoApResult res;
    int n_thr = 0;
    for (int t = 0; t < 10; ++t) {
        double thr = 0.5 + 0.05 * t;
        double ap = detail_eval::mean_ap_over_categories(mapped, gts, thr);
        res.ap += ap;
        if (t == 0) res.ap50 = ap;
        ++n_thr;
    }
    res.ap /= n_thr;
    std::vector<Detection> dets_l;
    for (const auto& d : mapped)
        if (size_bucket(d.box) == SizeBucket::Large) dets_l.push_back(d);
    std::vector<GroundTruthBox> gts_l;
    for (const auto& g : gts)
        if (size_bucket(g.box) == SizeBucket::Large) gts_l.push_back(g);
    for (int t = 0; t < 10; ++t) res.ap_l += detail_eval::mean_ap_over_categories(dets_l, gts_l, 0.5 + 0.05 * t);
    res.ap_l /= 10.0;
    return res;
}

// --- mIoU / REC / forget-check -----------------------------------------------------

struct MeanIouResult {
    double miou = 0.0;
    double miou_m = 0.0;
    double miou_l = 0.0;
};

// One predicted box per ground-truth object; a missing prediction scores 0.
// Buckets follow the ground-truth box size.
inline MeanIouResult mean_iou_protocol(const std::vector<std::optional<BBox>>& preds,
                                       const std::vector<GroundTruthBox>& gts) {
    if (preds.size() != gts.size()) throw ArgError("mean_iou_protocol: preds/gts length mismatch");
    double sum = 0.0, sum_m = 0.0, sum_l = 0.0;
    std::size_t n_m = 0, n_l = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
        double v = preds[i] ? iou(*preds[i], gts[i].box) : 0.0;
        sum += v;
        SizeBucket b = size_bucket(gts[i].box);
        if (b == SizeBucket::Medium) {
            sum_m += v;
            ++n_m;
        } else if (b == SizeBucket::Large) {
            sum_l += v;
            ++n_l;
        }
    }
    MeanIouResult r;
    r.miou = gts.empty() ? 0.0 : sum / static_cast<double>(gts.size());
    r.miou_m = n_m ? sum_m / static_cast<double>(n_m) : 0.0;
    r.miou_l = n_l ? sum_l / static_cast<double>(n_l) : 0.0;
    return r;
}

// Fraction of queries whose predicted box reaches IoU >= 0.5 (inclusive).
inline double rec_accuracy(const std::vector<std::optional<BBox>>& preds, const std::vector<BBox>& gts) {
    if (preds.size() != gts.size()) throw ArgError("rec_accuracy: preds/gts length mismatch");
    if (preds.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] && iou(*preds[i], gts[i]) >= 0.5) ++ok;
    return static_cast<double>(ok) / static_cast<double>(preds.size());
}

// Fraction of prompt-wise byte-identical outputs.
inline double forget_check(const std::vector<std::string>& before, const std::vector<std::string>& after) {
    if (before.size() != after.size()) throw ArgError("forget_check: output list length mismatch");
    if (before.empty()) return 0.0;
    std::size_t same = 0;
    for (std::size_t i = 0; i < before.size(); ++i) same += (before[i] == after[i]);
    return static_cast<double>(same) / static_cast<double>(before.size());
}

// --- report ------------------------------------------------------------------------

struct EvalReport {
    double ap = 0.0, ap50 = 0.0, ap_l = 0.0;
    double miou = 0.0, miou_m = 0.0, miou_l = 0.0;
    double rec_acc = 0.0;
    double iu_exact_match = 0.0;
    double invalid_f1 = 0.0;
    double unmapped_fraction = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"ap", ap},       {"ap50", ap50},
                              {"ap_l", ap_l},   {"miou", miou},
                              {"miou_m", miou_m}, {"miou_l", miou_l},
                              {"rec_acc", rec_acc}, {"iu_exact_match", iu_exact_match},
                              {"invalid_f1", invalid_f1}, {"unmapped_fraction", unmapped_fraction}};
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        try {
            r.ap = j.at("ap").get<double>();
            r.ap50 = j.at("ap50").get<double>();
            r.ap_l = j.at("ap_l").get<double>();
            r.miou = j.at("miou").get<double>();
            r.miou_m = j.at("miou_m").get<double>();
            r.miou_l = j.at("miou_l").get<double>();
            r.rec_acc = j.at("rec_acc").get<double>();
            r.iu_exact_match = j.at("iu_exact_match").get<double>();
            r.invalid_f1 = j.at("invalid_f1").get<double>();
            r.unmapped_fraction = j.at("unmapped_fraction").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("eval report: ") + e.what());
        }
        return r;
    }
};

} // namespace twist
