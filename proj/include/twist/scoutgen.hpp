#pragma once

// Deterministic sample generation: IU question/answer pairs, stepwise
// grounded VG samples ("where" and "what"-relation families), negative
// samples about absent objects, dataset statistics, and the prompt-template
// renderer behind the stubbed external-generator interface.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "twist/errors.hpp"
#include "twist/rng.hpp"
#include "twist/scenes.hpp"
#include "twist/vocab.hpp"

#include "json.hpp"

namespace twist {

enum class TaskKind { IU, VG };

inline std::string task_name(TaskKind t) { return t == TaskKind::IU ? "iu" : "vg"; }
inline TaskKind task_from_name(const std::string& s) {
    if (s == "iu") return TaskKind::IU;
    if (s == "vg") return TaskKind::VG;
    throw FormatError("unknown task kind '" + s + "'");
}

struct Sample {
    std::string id;
    Scene scene;
    TaskKind task = TaskKind::IU;
    std::string prompt;
    std::vector<std::string> steps; // empty for IU
    std::string answer;
    bool negative = false;
};

inline std::string box_text(const BBox& b) {
    return "[" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) +
           ", " + std::to_string(b.y2) + "]";
}

// --- spatial relations, decided on box centers. "left" means the other
// object sits left of the anchor: anchor.cx - other.cx > 16 and the vertical
// centers within 48px (mirrored for the other directions).
inline constexpr double kRelMainGap = 16.0;
inline constexpr double kRelCrossTol = 48.0;

inline const std::array<std::string, 4>& relations() {
    static const std::array<std::string, 4> v = {"left", "right", "above", "below"};
    return v;
}

inline bool relation_holds(const std::string& rel, const SceneObject& anchor, const SceneObject& other) {
    double dx = anchor.box.cx() - other.box.cx();
    double dy = anchor.box.cy() - other.box.cy();
    if (rel == "left") return dx > kRelMainGap && std::abs(dy) < kRelCrossTol;
    if (rel == "right") return -dx > kRelMainGap && std::abs(dy) < kRelCrossTol;
    if (rel == "above") return dy > kRelMainGap && std::abs(dx) < kRelCrossTol;
    if (rel == "below") return -dy > kRelMainGap && std::abs(dx) < kRelCrossTol;
    throw ArgError("unknown relation '" + rel + "'");
}

// --- IU samples -------------------------------------------------------------

inline Sample make_iu_sample(const Scene& scene, std::uint64_t seed) {
    if (scene.objects.empty()) throw GenError("make_iu_sample: empty scene");
    Pcg32 rng(seed, 0x1171u);
    Sample s;
    s.scene = scene;
    s.task = TaskKind::IU;

    // Categories with exactly one instance qualify for the color template.
    std::vector<std::string> unique_cats;
    for (const auto& cat : categories()) {
        int count = 0;
        for (const auto& o : scene.objects) count += (o.category == cat);
        if (count == 1) unique_cats.push_back(cat);
    }

    int kind = static_cast<int>(rng.bounded(3));
    if (kind == 0 && unique_cats.empty()) kind = 1 + static_cast<int>(rng.bounded(2));

    if (kind == 0) {
        const std::string& cat = unique_cats[rng.bounded(static_cast<std::uint32_t>(unique_cats.size()))];
        s.prompt = "what color is the " + cat + "?";
        for (const auto& o : scene.objects)
            if (o.category == cat) s.answer = o.color;
    } else if (kind == 1) {
        const std::string& cat = categories()[rng.bounded(4)];
        int count = 0;
        for (const auto& o : scene.objects) count += (o.category == cat);
        s.prompt = "how many " + cat + "s are there?";
        s.answer = std::to_string(count);
    } else {
        std::string color, cat;
        if (rng.bounded(2) == 0) {
            const auto& o = scene.objects[rng.bounded(static_cast<std::uint32_t>(scene.objects.size()))];
            color = o.color;
            cat = o.category;
        } else {
            cat = categories()[rng.bounded(4)];
            color = colors()[rng.bounded(6)];
        }
        s.prompt = "is there a " + color + " " + cat + "?";
        s.answer = scene.find(color, cat) ? "yes" : "no";
    }
    if (s.answer.empty()) throw GenError("make_iu_sample: no applicable template");
    return s;
}

// --- VG samples -------------------------------------------------------------

inline Sample make_vg_sample(const Scene& scene, std::uint64_t seed) {
    if (scene.objects.empty()) throw GenError("make_vg_sample: empty scene");
    Pcg32 rng(seed, 0x2272u);
    Sample s;
    s.scene = scene;
    s.task = TaskKind::VG;

    const auto& anchor = scene.objects[rng.bounded(static_cast<std::uint32_t>(scene.objects.size()))];
    bool want_relation = rng.bounded(2) == 1;

    // Relation candidates where exactly one object satisfies the relation, so
    // the question has a single correct answer.
    std::vector<std::pair<std::string, const SceneObject*>> candidates;
    if (want_relation) {
        for (const auto& rel : relations()) {
            const SceneObject* hit = nullptr;
            int hits = 0;
            for (const auto& o : scene.objects) {
                if (&o == &anchor) continue;
                if (relation_holds(rel, anchor, o)) {
                    hit = &o;
                    ++hits;
                }
            }
            if (hits == 1) candidates.emplace_back(rel, hit);
        }
    }

    if (want_relation && !candidates.empty()) {
        const auto& [rel, other] = candidates[rng.bounded(static_cast<std::uint32_t>(candidates.size()))];
        std::string aref = anchor.color + " " + anchor.category;
        std::string oref = other->color + " " + other->category;
        s.prompt = "what is to the " + rel + " of the " + aref + "?";
        s.steps = {
            "locate the " + aref + ": it is at " + box_text(anchor.box),
            "scan to the " + rel + " of the " + aref,
            "found the " + oref + " at " + box_text(other->box),
            "the " + oref + " is to the " + rel + " of the " + aref,
        };
        s.answer = s.steps.back();
    } else {
        std::string ref = anchor.color + " " + anchor.category;
        s.prompt = "where is the " + ref + "?";
        s.steps = {
            "locate the " + ref + ": it is at " + box_text(anchor.box),
            "the " + ref + " is located at " + box_text(anchor.box),
        };
        s.answer = s.steps.back();
    }
    return s;
}

// Negative sample: a "where" question about a uniformly chosen absent
// (color, category) pair. The target declares the question invalid.
inline Sample make_negative_sample(const Scene& scene, std::uint64_t seed) {
    Pcg32 rng(seed, 0x3373u);
    std::vector<std::pair<std::string, std::string>> absent;
    for (const auto& cat : categories())
        for (const auto& col : colors())
            if (!scene.find(col, cat)) absent.emplace_back(col, cat);
    if (absent.empty()) throw GenError("make_negative_sample: no absent pair");
    const auto& [color, cat] = absent[rng.bounded(static_cast<std::uint32_t>(absent.size()))];
    Sample s;
    s.scene = scene;
    s.task = TaskKind::VG;
    s.negative = true;
    s.prompt = "where is the " + color + " " + cat + "?";
    s.steps = {"<invalid> no " + color + " " + cat + " in the image"};
    s.answer = s.steps[0];
    return s;
}

// --- token serialization -----------------------------------------------------

// Target layout: IU answers are bare word tokens; VG steps each open with
// <step>. <eos> closes the target and belongs to the final step's range.
inline TokenizedSample encode_sample(const Vocabulary& vocab, const Sample& s) {
    TokenizedSample ts;
    ts.tokens = encode_prefix(vocab, s.scene, s.prompt);
    ts.target_start = static_cast<int>(ts.tokens.size());
    if (s.task == TaskKind::IU) {
        for (int id : vocab.tokenize(s.answer)) ts.tokens.push_back(id);
        ts.tokens.push_back(Vocabulary::Eos);
        ts.seg.ranges.push_back({ts.target_start, static_cast<int>(ts.tokens.size())});
    } else {
        if (s.steps.empty()) throw GenError("encode_sample: VG sample without steps");
        for (const auto& step : s.steps) {
            int start = static_cast<int>(ts.tokens.size());
            ts.tokens.push_back(Vocabulary::Step);
            for (int id : vocab.tokenize(step)) ts.tokens.push_back(id);
            ts.seg.ranges.push_back({start, static_cast<int>(ts.tokens.size())});
        }
        ts.tokens.push_back(Vocabulary::Eos);
        ts.seg.ranges.back().end = static_cast<int>(ts.tokens.size());
    }
    ts.seg.validate(ts.target_start, static_cast<int>(ts.tokens.size()));
    return ts;
}

// --- dataset construction ----------------------------------------------------

struct GenConfig {
    std::uint64_t seed = 0;
    int count = 0;               // positive samples
    double neg_ratio = 0.013;    // negatives appended as a fraction of positives
    int max_objects = 4;
    TaskKind task = TaskKind::VG;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + index));
}

// Positives first, then negatives; everything keyed off (seed, index) so the
// dataset is byte-reproducible for any worker count.
inline std::vector<Sample> generate_dataset(const GenConfig& cfg) {
    if (cfg.count < 0 || cfg.neg_ratio < 0.0) throw ValidationError("generate_dataset: bad counts");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        Scene scene = generate_scene(derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(i)), cfg.max_objects);
        std::uint64_t qseed = derive_seed(cfg.seed, 2, static_cast<std::uint64_t>(i));
        Sample s = cfg.task == TaskKind::IU ? make_iu_sample(scene, qseed) : make_vg_sample(scene, qseed);
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%06d", task_name(cfg.task).c_str(), i);
        s.id = idbuf;
        out.push_back(std::move(s));
    }
    if (cfg.task == TaskKind::VG) {
        int n_neg = static_cast<int>(cfg.neg_ratio * cfg.count + 0.5);
        for (int i = 0; i < n_neg; ++i) {
            Scene scene = generate_scene(derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(i)), cfg.max_objects);
            Sample s = make_negative_sample(scene, derive_seed(cfg.seed, 4, static_cast<std::uint64_t>(i)));
            char idbuf[32];
            std::snprintf(idbuf, sizeof(idbuf), "neg-%06d", i);
            s.id = idbuf;
            out.push_back(std::move(s));
        }
    }
    return out;
}

// --- JSONL io ----------------------------------------------------------------

inline nlohmann::json sample_to_json(const Sample& s) {
    return nlohmann::json{{"id", s.id},       {"scene", scene_to_json(s.scene)},
                          {"task", task_name(s.task)}, {"prompt", s.prompt},
                          {"steps", s.steps}, {"answer", s.answer},
                          {"negative", s.negative}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    try {
        s.id = j.at("id").get<std::string>();
        s.scene = scene_from_json(j.at("scene"));
        s.task = task_from_name(j.at("task").get<std::string>());
        s.prompt = j.at("prompt").get<std::string>();
        s.steps = j.at("steps").get<std::vector<std::string>>();
        s.answer = j.at("answer").get<std::string>();
        s.negative = j.at("negative").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("sample: ") + e.what());
    }
    if (s.negative && s.task != TaskKind::VG) throw FormatError("sample: negative samples must be vg");
    return s;
}

inline void write_dataset(const std::string& path, const std::vector<Sample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
    if (!out) throw FormatError("write failed for '" + path + "'");
}

inline std::vector<Sample> read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open dataset '" + path + "'");
    std::vector<Sample> samples;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw FormatError(path + ":" + std::to_string(lineno) + ": malformed JSON line");
        try {
            samples.push_back(sample_from_json(j));
        } catch (const FormatError& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return samples;
}

// --- statistics ----------------------------------------------------------------

struct DatasetStats {
    std::uint64_t images = 0;   // distinct scenes
    std::uint64_t words = 0;    // whitespace tokens over prompts + steps + answers
    double turns = 0.0;         // mean steps per VG sample
    std::uint64_t objects = 0;  // objects over distinct scenes
    std::uint64_t qa_pairs = 0;
};

inline std::uint64_t whitespace_tokens(const std::string& text) {
    std::istringstream ss(text);
    std::string w;
    std::uint64_t n = 0;
    while (ss >> w) ++n;
    return n;
}

inline DatasetStats dataset_stats(const std::vector<Sample>& samples) {
    DatasetStats st;
    std::set<std::uint64_t> seen;
    std::uint64_t vg_samples = 0, vg_steps = 0;
    for (const auto& s : samples) {
        ++st.qa_pairs;
        if (seen.insert(s.scene.seed).second) {
            ++st.images;
            st.objects += s.scene.objects.size();
        }
        st.words += whitespace_tokens(s.prompt);
        for (const auto& step : s.steps) st.words += whitespace_tokens(step);
        st.words += whitespace_tokens(s.answer);
        if (s.task == TaskKind::VG) {
            ++vg_samples;
            vg_steps += s.steps.size();
        }
    }
    st.turns = vg_samples ? static_cast<double>(vg_steps) / static_cast<double>(vg_samples) : 0.0;
    return st;
}

inline nlohmann::json stats_to_json(const DatasetStats& st) {
    return nlohmann::json{{"images", st.images}, {"words", st.words},   {"turns", st.turns},
                          {"objects", st.objects}, {"qa_pairs", st.qa_pairs}};
}

// --- prompt templates ---------------------------------------------------------

enum class TemplateKind { QuestionGen, NegativeGen, ParseExtract };

inline const char* template_kind_name(TemplateKind k) {
    switch (k) {
        case TemplateKind::QuestionGen: return "question_gen";
        case TemplateKind::NegativeGen: return "negative_gen";
        case TemplateKind::ParseExtract: return "parse_extract";
    }
    return "";
}

// Built-in template bodies; the same text ships as editable files under
// templates/. Placeholders use {name}.
inline const char* builtin_template(TemplateKind k) {
    switch (k) {
        case TemplateKind::QuestionGen:
            return "You are given the description of an image.\n"
                   "Description: {caption}\n"
                   "Write {num_questions} spatial reasoning questions about the objects above.\n"
                   "Use both \"what\" questions (relations between objects) and \"where\" "
                   "questions (object locations). Ask only about objects that appear in the "
                   "description.\n";
        case TemplateKind::NegativeGen:
            return "You are given the description of an image.\n"
                   "Description: {caption}\n"
                   "Write {num_questions} questions that ask about objects NOT present in the "
                   "description, for example: {absent_example}. The correct response to each "
                   "question is that it cannot be answered from the image.\n";
        case TemplateKind::ParseExtract:
            return "Extract every object mention and its bounding box from the text below.\n"
                   "Text: {caption}\n"
                   "Reply with one line per object in the form: name [x1, y1, x2, y2]\n";
    }
    return "";
}

// Fills {name} placeholders. Unknown placeholders raise a template error that
// names the offending slot; unused slots are allowed.
inline std::string render_template_text(const std::string& tpl,
                                        const std::map<std::string, std::string>& slots) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
        char c = tpl[i];
        if (c == '{') {
            std::size_t close = tpl.find('}', i);
            if (close == std::string::npos) throw TemplateError("template: unterminated placeholder");
            std::string key = tpl.substr(i + 1, close - i - 1);
            auto it = slots.find(key);
            if (it == slots.end()) throw TemplateError("template: missing slot '" + key + "'");
            out += it->second;
            i = close + 1;
        } else {
            out.push_back(c);
            ++i;
        }
    }
    return out;
}

inline std::string render_prompt_template(TemplateKind kind,
                                          const std::map<std::string, std::string>& slots) {
    return render_template_text(builtin_template(kind), slots);
}

inline std::string load_template_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open template '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// --- external generator interface ---------------------------------------------

// Stand-in for a hosted LLM/MLLM. The procedural generator above is the
// default ground-truth source; this interface only exists so a real service
// could be plugged in.
struct TextGenerator {
    virtual ~TextGenerator() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

// Deterministic stub: echoes a fingerprint of the prompt.
struct StubTextGenerator final : TextGenerator {
    std::string complete(const std::string& prompt) override {
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : prompt) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        return "stub-completion-" + std::to_string(h % 1000000007ULL);
    }
};

} // namespace twist
