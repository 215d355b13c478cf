#include "haloprobe/posterior.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

namespace {

double checked(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
        fail(ErrorKind::validation, std::string(name) + " = " + std::to_string(p) +
                                        " is not a probability");
    }
    if (p == 0.0 || p == 1.0) {
        spdlog::warn("{} = {} clamped to [{}, 1 - {}]", name, p, kProbEpsilon, kProbEpsilon);
    }
    return clamp_probability(p);
}

}  // namespace

double combine(double f, double g) {
    f = checked(f, "f");
    g = checked(g, "g");
    const double num = f * g;
    return num / (num + (1.0 - f) * (1.0 - g));
}

double likelihood_ratio(double f) {
    f = checked(f, "f");
    return f / (1.0 - f);
}

double combine_via_ratio(double f, double g) {
    const double lr = likelihood_ratio(f);
    g = checked(g, "g");
    return lr * g / (lr * g + (1.0 - g));
}

TokenScore make_score(const RowInfo& info, double f, double g, double threshold,
                      std::optional<ObjectLabel> label) {
    TokenScore s;
    s.caption_id = info.caption_id;
    s.category = info.category;
    s.token_index = info.token_index;
    s.f = f;
    s.g = g;
    s.p_correct = combine(f, g);
    s.p_halluc = 1.0 - s.p_correct;
    s.predicted = s.p_correct >= threshold ? ObjectLabel::correct : ObjectLabel::hallucinated;
    s.label = label;
    return s;
}

nlohmann::json to_json(const TokenScore& s) {
    nlohmann::json j{{"caption_id", s.caption_id}, {"token_index", s.token_index},
                     {"category", s.category},     {"f", s.f},
                     {"g", s.g},                   {"p_correct", s.p_correct},
                     {"predicted", to_int(s.predicted)}};
    j["label"] = s.label ? nlohmann::json(to_int(*s.label)) : nlohmann::json(nullptr);
    return j;
}

TokenScore token_score_from_json(const nlohmann::json& j) {
    TokenScore s;
    s.caption_id = j.at("caption_id").get<std::string>();
    s.token_index = j.at("token_index").get<int>();
    s.category = j.at("category").get<std::string>();
    s.f = j.at("f").get<double>();
    s.g = j.at("g").get<double>();
    s.p_correct = j.at("p_correct").get<double>();
    s.p_halluc = 1.0 - s.p_correct;
    s.predicted = j.at("predicted").get<int>() == 1 ? ObjectLabel::correct : ObjectLabel::hallucinated;
    if (j.contains("label") && !j.at("label").is_null()) {
        s.label = j.at("label").get<int>() == 1 ? ObjectLabel::correct : ObjectLabel::hallucinated;
    }
    return s;
}

void write_scores(const std::filesystem::path& path, std::span<const TokenScore> scores) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    for (const auto& s : scores) {
        out << to_json(s).dump() << '\n';
    }
}

std::vector<TokenScore> read_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<TokenScore> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(token_score_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::validation,
                 path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

Detector::Detector(DetectorCheckpoint checkpoint, double threshold)
    : checkpoint_(std::move(checkpoint)), threshold_(threshold) {
    if (!(threshold_ >= 0.0 && threshold_ <= 1.0)) {
        fail(ErrorKind::config, "threshold must lie in [0, 1]");
    }
}

std::vector<TokenScore> Detector::score_dataset(const Dataset& raw) const {
    if (!(raw.layout == checkpoint_.layout)) {
        fail(ErrorKind::validation, "dataset L x H does not match the detector");
    }
    Dataset d = raw;
    checkpoint_.normalizer.apply(d.balanced);
    checkpoint_.prior_normalizer.apply(d.prior);
    apply_mask(d, checkpoint_.mask);
    const auto f = checkpoint_.balanced.predict(d.balanced);
    const auto g = checkpoint_.prior.predict(d.prior);
    std::vector<TokenScore> out;
    out.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::optional<ObjectLabel> label;
        if (d.labels[i] >= 0) {
            label = d.labels[i] == 1 ? ObjectLabel::correct : ObjectLabel::hallucinated;
        }
        out.push_back(make_score(d.info[i], f[i], g[i], threshold_, label));
    }
    return out;
}

std::vector<TokenScore> Detector::score(const CaptionTrace& caption, const CorpusHeader& header,
                                        std::span<const ObjectMention> mentions) const {
    Dataset d = make_dataset(checkpoint_.layout);
    append_caption(d, caption, header, mentions, {checkpoint_.max_len});
    if (d.empty()) return {};
    return score_dataset(d);
}

std::vector<TokenScore> score_tokens(std::span<const CaptionTrace> captions,
                                     const CorpusHeader& header, const MentionScorer& scorer) {
    std::vector<TokenScore> out;
    for (const auto& c : captions) {
        auto s = scorer.score(c, header, c.mentions);
        out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    return out;
}

}  // namespace haloprobe
