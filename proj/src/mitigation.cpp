#include "haloprobe/mitigation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/assets.hpp"
#include "haloprobe/error.hpp"

namespace haloprobe {

double beam_score(std::size_t n_hal, double p_hal, std::size_t n_corr, double p_corr,
                  double beta) {
    return static_cast<double>(n_hal) + p_hal -
           beta * (static_cast<double>(n_corr) + p_corr);
}

CandidateScore score_mentions(std::vector<TokenScore> mentions, double beta) {
    CandidateScore c;
    for (const auto& m : mentions) {
        if (m.predicted == ObjectLabel::hallucinated) {
            ++c.n_hal;
            c.p_hal += m.p_halluc;
        } else {
            ++c.n_corr;
            c.p_corr += m.p_correct;
        }
    }
    c.score = beam_score(c.n_hal, c.p_hal, c.n_corr, c.p_corr, beta);
    c.mentions = std::move(mentions);
    return c;
}

CandidateScore score_candidate(const CaptionTrace& caption, const CorpusHeader& header,
                               const MentionScorer& scorer, const ObjectVocabulary& vocabulary,
                               double beta, int first_scored) {
    const auto texts = caption.token_texts();
    auto extraction = extract_object_mentions(caption.caption_text, texts, vocabulary);
    std::vector<ObjectMention> scored;
    for (auto& m : extraction.mentions) {
        if (m.token_index >= first_scored) scored.push_back(std::move(m));
    }
    auto result = score_mentions(scorer.score(caption, header, scored), beta);
    result.unaligned_words = extraction.unaligned_words;
    return result;
}

std::size_t select_candidate(std::span<const CandidateScore> scores,
                             std::span<const double> cumulative_logprobs) {
    if (scores.empty()) fail(ErrorKind::protocol, "no candidates to select from");
    if (scores.size() != cumulative_logprobs.size()) {
        fail(ErrorKind::validation, "candidate and log-probability counts differ");
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.size(); ++k) {
        const double s = scores[k].score;
        const double b = scores[best].score;
        if (s < b || (s == b && cumulative_logprobs[k] > cumulative_logprobs[best])) {
            best = k;
        }
    }
    return best;
}

BeamResult guided_beam_search(Generator& generator, const MentionScorer& scorer,
                              const ObjectVocabulary& vocabulary, const BeamConfig& config) {
    if (config.beams < 1 || config.segment_len < 1 || config.max_len < 1 || config.beta < 0 ||
        config.temperature < 0) {
        fail(ErrorKind::config, "invalid beam search configuration");
    }
    const auto& header = generator.header();
    BeamResult result;
    std::vector<std::int64_t> ids;
    result.caption.caption_id = config.session_id;
    result.caption.image_id = config.image_id;
    result.caption.decoding = {DecodingStrategy::beam, config.temperature, config.max_len};

    for (int round = 0; !result.ended && static_cast<int>(ids.size()) < config.max_len; ++round) {
        GenerationRequest request;
        request.session_id = config.session_id;
        request.prefix_token_ids = ids;
        request.n_candidates = config.beams;
        request.temperature = config.temperature;
        request.max_new_tokens = std::min(config.segment_len, config.max_len - static_cast<int>(ids.size()));
        GenerationResponse response;
        try {
            response = generator.generate(request);
            check_response(request, response);
        } catch (const Error& e) {
            spdlog::error("beam search aborted in round {}: {}", round, e.what());
            result.error = e.what();
            return result;
        }

        RoundRecord record;
        record.round = round;
        record.prefix_length = static_cast<int>(ids.size());
        std::vector<CaptionTrace> built;
        for (const auto& cand : response.candidates) {
            CaptionTrace c = result.caption;
            c.tokens.insert(c.tokens.end(), cand.traces.begin(), cand.traces.end());
            c.caption_text.clear();
            for (const auto& t : cand.token_texts) c.caption_text += t;
            for (std::size_t i = 0; i < c.tokens.size(); ++i) c.tokens[i].token_text = cand.token_texts[i];
            record.scores.push_back(
                score_candidate(c, header, scorer, vocabulary, config.beta, record.prefix_length));
            record.cumulative_logprobs.push_back(cand.cumulative_logprob);
            built.push_back(std::move(c));
        }
        record.selected = select_candidate(record.scores, record.cumulative_logprobs);
        const auto& chosen = response.candidates[record.selected];
        spdlog::debug("round {}: selected candidate {} with S = {:.4f}", round, record.selected,
                      record.scores[record.selected].score);
        if (chosen.token_ids.size() == ids.size() && !chosen.ended) {
            result.error = "generator made no progress";
            result.audit.push_back(std::move(record));
            return result;
        }
        ids = chosen.token_ids;
        result.caption = std::move(built[record.selected]);
        result.ended = chosen.ended;
        result.audit.push_back(std::move(record));
    }
    return result;
}

nlohmann::json to_json(const CandidateScore& s) {
    nlohmann::json mentions = nlohmann::json::array();
    for (const auto& m : s.mentions) mentions.push_back(to_json(m));
    return {{"n_hal", s.n_hal},     {"p_hal", s.p_hal}, {"n_corr", s.n_corr},
            {"p_corr", s.p_corr},   {"S", s.score},     {"unaligned_words", s.unaligned_words},
            {"mentions", std::move(mentions)}};
}

nlohmann::json to_json(const BeamResult& r) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& rec : r.audit) {
        nlohmann::json cands = nlohmann::json::array();
        for (std::size_t k = 0; k < rec.scores.size(); ++k) {
            auto c = to_json(rec.scores[k]);
            c["cumulative_logprob"] = rec.cumulative_logprobs[k];
            cands.push_back(std::move(c));
        }
        rounds.push_back({{"round", rec.round},
                          {"prefix_length", rec.prefix_length},
                          {"selected", rec.selected},
                          {"candidates", std::move(cands)}});
    }
    nlohmann::json j{{"caption_id", r.caption.caption_id},
                     {"image_id", r.caption.image_id},
                     {"caption", r.caption.caption_text},
                     {"tokens", r.caption.tokens.size()},
                     {"ended", r.ended},
                     {"rounds", std::move(rounds)}};
    j["error"] = r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr);
    return j;
}

std::string mark_hallucinations(std::string_view caption, std::span<const ObjectMention> mentions,
                                std::span<const TokenScore> scores, std::string_view marker) {
    if (mentions.size() != scores.size()) {
        fail(ErrorKind::validation, "one score per mention is required for marking");
    }
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (std::size_t i = 0; i < mentions.size(); ++i) {
        if (scores[i].predicted != ObjectLabel::hallucinated) continue;
        const auto& m = mentions[i];
        if (m.char_begin >= m.char_end || m.char_end > caption.size()) {
            fail(ErrorKind::validation, "mention span outside the caption");
        }
        spans.emplace_back(m.char_begin, m.char_end);
    }
    std::stable_sort(spans.begin(), spans.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::string out;
    std::size_t pos = 0;
    std::size_t covered = 0;
    for (const auto& [begin, end] : spans) {
        if (begin < covered) {
            spdlog::warn("overlapping mention at byte {} left unmarked", begin);
            continue;
        }
        out.append(caption.substr(pos, begin - pos));
        out.append(marker);
        pos = begin;
        covered = end;
    }
    out.append(caption.substr(pos));
    return out;
}

EditRequest emit_edit_request(std::string_view marked_caption) {
    EditRequest r;
    r.system_prompt = std::string(assets::system_prompt());
    r.editing_prompt = std::string(assets::editing_prompt());
    r.payload = r.editing_prompt + std::string(marked_caption);
    return r;
}

nlohmann::json to_json(const EditRequest& r) {
    return {{"system_prompt", r.system_prompt},
            {"editing_prompt", r.editing_prompt},
            {"payload", r.payload}};
}

std::string parse_editor_response(std::string_view response) {
    const auto first = response.find('"');
    const auto last = response.rfind('"');
    if (first == std::string_view::npos || last == first) {
        fail(ErrorKind::validation, "editor response holds no double-quoted caption");
    }
    return std::string(response.substr(first + 1, last - first - 1));
}

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Removes a trailing article (and the space before the object) from `out`.
void drop_dangling_article(std::string& out) {
    static const char* articles[] = {"a", "an", "the"};
    std::size_t end = out.size();
    while (end > 0 && out[end - 1] == ' ') --end;
    std::size_t begin = end;
    while (begin > 0 && is_word_char(out[begin - 1])) --begin;
    if (begin == end || (begin > 0 && out[begin - 1] != ' ')) return;
    std::string word = out.substr(begin, end - begin);
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (const char* a : articles) {
        if (word == a) {
            out.erase(begin);
            return;
        }
    }
}

std::string tidy(std::string s) {
    auto replace_all = [&](const std::string& from, const std::string& to) {
        bool changed = false;
        for (std::size_t p; (p = s.find(from)) != std::string::npos;) {
            s.replace(p, from.size(), to);
            changed = true;
        }
        return changed;
    };
    for (bool again = true; again;) {
        again = false;
        again |= replace_all("  ", " ");
        again |= replace_all(" .", ".");
        again |= replace_all(" ,", ",");
        again |= replace_all(",.", ".");
        again |= replace_all(",,", ",");
        again |= replace_all(" and.", ".");
        again |= replace_all(" with.", ".");
        again |= replace_all(" and,", ",");
        again |= replace_all(" and and ", " and ");
    }
    while (!s.empty() && s.front() == ' ') s.erase(s.begin());
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

}  // namespace

std::string mock_editor(std::string_view marked, const ObjectVocabulary& vocabulary,
                        std::string_view marker) {
    if (marker.empty()) fail(ErrorKind::config, "marker must not be empty");
    std::string out;
    std::size_t pos = 0;
    for (std::size_t m; (m = marked.find(marker, pos)) != std::string_view::npos;) {
        out.append(marked.substr(pos, m - pos));
        const std::size_t start = m + marker.size();
        // The marked phrase is the object phrase that begins right here.
        std::size_t end = start;
        const auto words = find_object_words(marked.substr(start), vocabulary);
        if (!words.empty() && words.front().char_begin == 0) {
            end = start + words.front().char_end;
        } else {
            while (end < marked.size() && is_word_char(marked[end])) ++end;
        }
        drop_dangling_article(out);
        pos = end;
    }
    out.append(marked.substr(pos));
    return "\"" + tidy(out) + "\"";
}

}  // namespace haloprobe
