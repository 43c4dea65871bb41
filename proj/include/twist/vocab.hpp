#pragma once

// Fixed vocabulary over word tokens, special tokens, coordinate tokens and
// patch tokens, plus the text<->token codecs. Coordinates quantize to bins of
// four pixels: bin = floor(c * bins / 256) clamped to bins-1; a low corner
// decodes to bin*4 and a high corner to (bin+1)*4.

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "twist/errors.hpp"
#include "twist/scenes.hpp"

namespace twist {

struct StepRange {
    int start = 0; // absolute token position, inclusive
    int end = 0;   // exclusive
};

// Contiguous, non-overlapping ranges covering all supervised tokens, one per
// reasoning step.
struct StepSegmentation {
    std::vector<StepRange> ranges;

    int steps() const { return static_cast<int>(ranges.size()); }
    void validate(int target_start, int total_len) const {
        if (ranges.empty()) throw ArgError("segmentation: needs at least one step");
        int cursor = target_start;
        for (const auto& r : ranges) {
            if (r.start != cursor || r.end <= r.start)
                throw ArgError("segmentation: ranges must be contiguous and non-empty");
            cursor = r.end;
        }
        if (cursor != total_len) throw ArgError("segmentation: ranges must cover all supervised tokens");
    }
};

class Vocabulary {
public:
    // Special token ids are stable by construction.
    enum Special : int {
        Pad = 0, Bos = 1, Eos = 2, Img = 3, Step = 4, BoxOpen = 5, BoxClose = 6, Invalid = 7,
        SpecialCount = 8
    };

    explicit Vocabulary(int coord_bins = 64) : bins_(coord_bins) {
        if (coord_bins < 2 || kCanvas % coord_bins != 0)
            throw ValidationError("vocabulary: coord_bins must divide the canvas");
        names_.assign(SpecialCount, "");
        names_[Pad] = "<pad>"; names_[Bos] = "<bos>"; names_[Eos] = "<eos>"; names_[Img] = "<img>";
        names_[Step] = "<step>"; names_[BoxOpen] = "<box>"; names_[BoxClose] = "</box>";
        names_[Invalid] = "<invalid>";
        x_base_ = static_cast<int>(names_.size());
        for (int i = 0; i < bins_; ++i) names_.push_back("<x_" + std::to_string(i) + ">");
        y_base_ = static_cast<int>(names_.size());
        for (int i = 0; i < bins_; ++i) names_.push_back("<y_" + std::to_string(i) + ">");
        patch_base_ = static_cast<int>(names_.size());
        names_.push_back("<patch_bg>");
        for (const auto& cat : categories())
            for (const auto& col : colors()) names_.push_back("<patch_" + col + "_" + cat + ">");
        word_base_ = static_cast<int>(names_.size());
        for (const auto& c : categories()) add_word(c);
        for (const auto& c : categories()) add_word(c + "s");
        for (const auto& c : colors()) add_word(c);
        for (const char* w : {"what", "color", "is", "the", "how", "many", "are", "there", "a",
                              "where", "to", "of", "left", "right", "above", "below", "yes", "no",
                              "locate", "it", "at", "located", "scan", "found", "in", "image",
                              "0", "1", "2", "3", "4"})
            add_word(w);
        for (int i = 0; i < static_cast<int>(names_.size()); ++i) id_by_name_[names_[static_cast<std::size_t>(i)]] = i;
    }

    int size() const { return static_cast<int>(names_.size()); }
    int coord_bins() const { return bins_; }
    const std::string& name(int id) const {
        if (id < 0 || id >= size()) throw VocabError("vocabulary: id " + std::to_string(id) + " out of range");
        return names_[static_cast<std::size_t>(id)];
    }

    int x_token(int bin) const { return x_base_ + check_bin(bin); }
    int y_token(int bin) const { return y_base_ + check_bin(bin); }
    bool is_x(int id) const { return id >= x_base_ && id < x_base_ + bins_; }
    bool is_y(int id) const { return id >= y_base_ && id < y_base_ + bins_; }
    int x_bin(int id) const { return id - x_base_; }
    int y_bin(int id) const { return id - y_base_; }
    int patch_token(int local) const { return patch_base_ + local; }
    bool is_patch(int id) const { return id >= patch_base_ && id < patch_base_ + kPatchTokenCount; }

    int word(const std::string& w) const {
        auto it = id_by_name_.find(w);
        if (it == id_by_name_.end()) throw VocabError("vocabulary: unknown word '" + w + "'");
        return it->second;
    }
    std::optional<int> try_word(const std::string& w) const {
        auto it = id_by_name_.find(w);
        if (it == id_by_name_.end()) return std::nullopt;
        return it->second;
    }

    // The grounding token set G: coordinate, step, box and <invalid> tokens.
    bool is_grounding_token(int id) const {
        return id == Step || id == BoxOpen || id == BoxClose || id == Invalid || is_x(id) || is_y(id);
    }

    int quantize(int coord) const {
        int bin = coord * bins_ / kCanvas;
        if (bin < 0) bin = 0;
        if (bin >= bins_) bin = bins_ - 1;
        return bin;
    }
    int dequantize_lo(int bin) const { return bin * (kCanvas / bins_); }
    int dequantize_hi(int bin) const { return (bin + 1) * (kCanvas / bins_); }

    // Tokenizes text: lowercased words split on whitespace/punctuation,
    // "<name>" special literals, and "[x1, y1, x2, y2]" bracket groups which
    // become <box><x><y><x><y></box> with quantized bins.
    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        std::size_t i = 0;
        std::string word_buf;
        auto flush_word = [&] {
            if (!word_buf.empty()) {
                out.push_back(word(word_buf));
                word_buf.clear();
            }
        };
        while (i < text.size()) {
            char c = text[i];
            if (c == '[') {
                flush_word();
                std::size_t close = text.find(']', i);
                if (close == std::string::npos) throw VocabError("tokenize: unterminated bracket group");
                append_box_tokens(text.substr(i + 1, close - i - 1), out);
                i = close + 1;
            } else if (c == '<') {
                flush_word();
                std::size_t close = text.find('>', i);
                if (close == std::string::npos) throw VocabError("tokenize: unterminated special token");
                std::string name = text.substr(i, close - i + 1);
                auto it = id_by_name_.find(name);
                if (it == id_by_name_.end()) throw VocabError("tokenize: unknown special token " + name);
                out.push_back(it->second);
                i = close + 1;
            } else if (std::isalnum(static_cast<unsigned char>(c))) {
                word_buf.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
                ++i;
            } else {
                flush_word();
                ++i;
            }
        }
        flush_word();
        return out;
    }

    // Renders tokens back to text. Well-formed box groups become pixel
    // brackets via the dequantization rule; anything malformed stays as
    // literal token names. <step> renders as a newline, <eos> ends output.
    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        bool at_line_start = true;
        auto append_piece = [&](const std::string& piece) {
            if (!at_line_start && !out.empty() && out.back() != '\n') out += ' ';
            out += piece;
            at_line_start = false;
        };
        std::size_t i = 0;
        while (i < ids.size()) {
            int id = ids[i];
            if (id == Eos) break;
            if (id == Step) {
                if (!out.empty()) out += '\n';
                at_line_start = true;
                ++i;
                continue;
            }
            if (id == BoxOpen && i + 5 < ids.size() && is_x(ids[i + 1]) && is_y(ids[i + 2]) &&
                is_x(ids[i + 3]) && is_y(ids[i + 4]) && ids[i + 5] == BoxClose) {
                int px1 = dequantize_lo(x_bin(ids[i + 1]));
                int py1 = dequantize_lo(y_bin(ids[i + 2]));
                int px2 = dequantize_hi(x_bin(ids[i + 3]));
                int py2 = dequantize_hi(y_bin(ids[i + 4]));
                append_piece("[" + std::to_string(px1) + ", " + std::to_string(py1) + ", " +
                             std::to_string(px2) + ", " + std::to_string(py2) + "]");
                i += 6;
                continue;
            }
            append_piece(name(id));
            ++i;
        }
        return out;
    }

private:
    void add_word(const std::string& w) { names_.push_back(w); }

    int check_bin(int bin) const {
        if (bin < 0 || bin >= bins_) throw ArgError("vocabulary: coordinate bin out of range");
        return bin;
    }

    void append_box_tokens(const std::string& inner, std::vector<int>& out) const {
        std::vector<int> vals;
        std::size_t p = 0;
        while (p < inner.size()) {
            while (p < inner.size() && (inner[p] == ' ' || inner[p] == ',')) ++p;
            if (p >= inner.size()) break;
            std::size_t q = p;
            while (q < inner.size() && std::isdigit(static_cast<unsigned char>(inner[q]))) ++q;
            if (q == p) throw VocabError("tokenize: non-integer in bracket group");
            vals.push_back(std::stoi(inner.substr(p, q - p)));
            p = q;
        }
        if (vals.size() != 4) throw VocabError("tokenize: bracket group must hold exactly 4 integers");
        out.push_back(BoxOpen);
        out.push_back(x_token(quantize(vals[0])));
        out.push_back(y_token(quantize(vals[1])));
        out.push_back(x_token(quantize(vals[2])));
        out.push_back(y_token(quantize(vals[3])));
        out.push_back(BoxClose);
    }

    int bins_;
    int x_base_ = 0, y_base_ = 0, patch_base_ = 0, word_base_ = 0;
    std::vector<std::string> names_;
    std::unordered_map<std::string, int> id_by_name_;
};

// One training example serialized to model tokens.
struct TokenizedSample {
    std::vector<int> tokens;  // <bos> <img> v1..v64 prompt... target... <eos>
    int target_start = 0;     // first supervised position
    StepSegmentation seg;     // ranges over [target_start, tokens.size())
};

// Prompt-side prefix: <bos> <img> visual tokens, then the prompt words.
inline std::vector<int> encode_prefix(const Vocabulary& vocab, const Scene& scene, const std::string& prompt) {
    std::vector<int> out;
    out.push_back(Vocabulary::Bos);
    out.push_back(Vocabulary::Img);
    for (int local : encode_scene(scene)) out.push_back(vocab.patch_token(local));
    for (int id : vocab.tokenize(prompt)) out.push_back(id);
    return out;
}

} // namespace twist
