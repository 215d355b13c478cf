#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/labeler.hpp"
#include "haloprobe/posterior.hpp"
#include "haloprobe/protocol.hpp"

namespace haloprobe {

/// S = n_hal + p_hal - beta * (n_corr + p_corr); lower is better.
double beam_score(std::size_t n_hal, double p_hal, std::size_t n_corr, double p_corr,
                  double beta);

struct CandidateScore {
    std::size_t n_hal = 0;
    std::size_t n_corr = 0;
    double p_hal = 0.0;   // sum of p_halluc over predicted-hallucinated mentions
    double p_corr = 0.0;  // sum of p_correct over predicted-correct mentions
    double score = 0.0;
    std::vector<TokenScore> mentions;
    std::size_t unaligned_words = 0;
};

CandidateScore score_mentions(std::vector<TokenScore> mentions, double beta);

/// Extracts mentions over the whole caption and scores those at or after
/// token `first_scored` with the candidate's own traces.
CandidateScore score_candidate(const CaptionTrace& caption, const CorpusHeader& header,
                               const MentionScorer& scorer, const ObjectVocabulary& vocabulary,
                               double beta, int first_scored = 0);

/// Lowest S, then higher cumulative log-probability, then lowest index.
std::size_t select_candidate(std::span<const CandidateScore> scores,
                             std::span<const double> cumulative_logprobs);

struct BeamConfig {
    int beams = 5;
    double temperature = 0.5;
    double beta = 0.1;
    int segment_len = 20;
    int max_len = 512;
    std::string session_id = "session-0";
    std::string image_id;
};

struct RoundRecord {
    int round = 0;
    int prefix_length = 0;
    std::vector<CandidateScore> scores;
    std::vector<double> cumulative_logprobs;
    std::size_t selected = 0;
};

struct BeamResult {
    CaptionTrace caption;  // selected tokens and traces; mentions left empty
    std::vector<RoundRecord> audit;
    bool ended = false;
    std::optional<std::string> error;  // set when the search aborted early
};

/// Each round requests `beams` continuations of `segment_len` tokens for
/// the current prefix, scores them and keeps one. Stops when the kept
/// candidate ends or the caption reaches `max_len` tokens. Generator
/// failures stop the search and are reported in `error`.
BeamResult guided_beam_search(Generator& generator, const MentionScorer& scorer,
                              const ObjectVocabulary& vocabulary, const BeamConfig& config);

nlohmann::json to_json(const CandidateScore& score);
nlohmann::json to_json(const BeamResult& result);

inline constexpr std::string_view kDefaultMarker = "$";

/// Inserts `marker` before every mention predicted hallucinated. `scores[i]`
/// belongs to `mentions[i]`. Overlapping spans keep the first.
std::string mark_hallucinations(std::string_view caption, std::span<const ObjectMention> mentions,
                                std::span<const TokenScore> scores,
                                std::string_view marker = kDefaultMarker);

struct EditRequest {
    std::string system_prompt;
    std::string editing_prompt;
    std::string payload;  // editing prompt followed by the marked caption
};

EditRequest emit_edit_request(std::string_view marked_caption);
nlohmann::json to_json(const EditRequest& request);

/// The caption between the first and last double quote of the editor's reply.
std::string parse_editor_response(std::string_view response);

/// Stand-in editor: drops each marked object phrase and repairs the
/// obvious splices (dangling article, stray conjunction, doubled spaces).
/// Returns the reply wrapped in double quotes like a real editor.
std::string mock_editor(std::string_view marked_caption, const ObjectVocabulary& vocabulary,
                        std::string_view marker = kDefaultMarker);

}  // namespace haloprobe
