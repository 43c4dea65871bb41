#pragma once

// Inference-time task router: hashed unigram+bigram features into a linear
// classifier over {IU, VG}. Deterministic; a tied score routes to IU.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "twist/errors.hpp"
#include "twist/rng.hpp"
#include "twist/scoutgen.hpp"

#include "json.hpp"

namespace twist {

class Router {
public:
    static constexpr int kDim = 1024;

    Router() : w_(kDim, 0.0f) {}

    // FNV-1a over the n-gram text, folded into the feature table.
    static std::uint32_t hash_ngram(const std::string& s) {
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        return static_cast<std::uint32_t>(h % kDim);
    }

    static std::vector<std::string> words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (std::isalnum(static_cast<unsigned char>(c)))
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    static std::vector<int> features(const std::string& text) {
        std::vector<int> idx;
        auto ws = words(text);
        for (std::size_t i = 0; i < ws.size(); ++i) {
            idx.push_back(static_cast<int>(hash_ngram(ws[i])));
            if (i + 1 < ws.size()) idx.push_back(static_cast<int>(hash_ngram(ws[i] + " " + ws[i + 1])));
        }
        return idx;
    }

    double score(const std::string& text) const {
        double s = static_cast<double>(b_);
        for (int f : features(text)) s += static_cast<double>(w_[static_cast<std::size_t>(f)]);
        return s;
    }

    // score > 0 -> VG; ties (including the empty-feature case) -> IU.
    TaskKind classify(const std::string& text) const {
        if (text.empty()) throw ArgError("classify_task: empty prompt");
        return score(text) > 0.0 ? TaskKind::VG : TaskKind::IU;
    }

    // Averaged perceptron; labels are IU=-1, VG=+1.
    void train(const std::vector<std::pair<std::string, TaskKind>>& data, int epochs, std::uint64_t seed) {
        std::vector<float> acc(kDim, 0.0f);
        double acc_b = 0.0;
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Pcg32 rng(seed, 0x707e5u);
        long updates = 0;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.bounded(static_cast<std::uint32_t>(i))]);
            for (std::size_t oi : order) {
                const auto& [text, label] = data[oi];
                double y = label == TaskKind::VG ? 1.0 : -1.0;
                if (y * score(text) <= 0.0) {
                    for (int f : features(text)) {
                        w_[static_cast<std::size_t>(f)] += static_cast<float>(y);
                        acc[static_cast<std::size_t>(f)] += static_cast<float>(y) * static_cast<float>(updates);
                    }
                    b_ += static_cast<float>(y);
                    acc_b += y * static_cast<double>(updates);
                }
                ++updates;
            }
        }
        // Averaged weights: w_avg = w - acc/updates.
        if (updates > 0) {
            for (int i = 0; i < kDim; ++i)
                w_[static_cast<std::size_t>(i)] -= acc[static_cast<std::size_t>(i)] / static_cast<float>(updates);
            b_ -= static_cast<float>(acc_b / static_cast<double>(updates));
        }
    }

    double accuracy(const std::vector<std::pair<std::string, TaskKind>>& data) const {
        if (data.empty()) return 0.0;
        std::size_t ok = 0;
        for (const auto& [text, label] : data) ok += (classify(text) == label);
        return static_cast<double>(ok) / static_cast<double>(data.size());
    }

    void save(const std::string& path) const {
        nlohmann::json j{{"dim", kDim}, {"w", w_}, {"b", b_}};
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot open '" + path + "' for writing");
        out << j.dump() << "\n";
    }

    static Router load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open router file '" + path + "'");
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw FormatError("router file is not valid JSON: " + path);
        Router r;
        try {
            if (j.at("dim").get<int>() != kDim) throw FormatError("router: unexpected feature dim");
            r.w_ = j.at("w").get<std::vector<float>>();
            r.b_ = j.at("b").get<float>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("router: ") + e.what());
        }
        if (r.w_.size() != kDim) throw FormatError("router: weight vector size mismatch");
        return r;
    }

private:
    std::vector<float> w_;
    float b_ = 0.0f;
};

inline TaskKind classify_task(const Router& r, const std::string& prompt) { return r.classify(prompt); }

} // namespace twist
