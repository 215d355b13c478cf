#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/mention.hpp"

namespace haloprobe {

inline constexpr int kTraceFormatVersion = 1;

/// Corpus-wide shape information carried by the first line of a trace file.
struct CorpusHeader {
    int format_version = kTraceFormatVersion;
    int layers = 32;
    int heads = 32;
    int top_k = 20;   // attended image patches per (layer, head)
    int top_m = 100;  // logits used for the confidence features
    std::string attention_convention;  // free text written by the trace producer

    std::size_t matrix_size() const noexcept {
        return static_cast<std::size_t>(layers) * static_cast<std::size_t>(heads);
    }
    double max_attention_entropy() const;
    double max_logit_entropy() const;

    bool operator==(const CorpusHeader&) const = default;
};

/// Internal decoding signals of one generated token. Attention matrices are
/// stored flat, layer-major: entry (l, h) lives at l * heads + h.
struct TokenTrace {
    int token_index = 0;
    std::string token_text;
    std::int64_t token_id = 0;
    std::vector<double> attn_mean_cur;
    std::vector<double> attn_mean_next;
    std::vector<double> attn_entropy_cur;
    std::vector<double> attn_entropy_next;
    double logit_entropy = 0.0;
    double max_logit = 0.0;
    double max_softmax = 1.0;

    bool operator==(const TokenTrace&) const = default;
};

enum class DecodingStrategy { greedy, nucleus, beam };

struct DecodingInfo {
    DecodingStrategy strategy = DecodingStrategy::greedy;
    double temperature = 1.0;
    int max_len = 512;

    bool operator==(const DecodingInfo&) const = default;
};

/// One generated caption and the per-token traces that produced it.
/// `mentions` is empty for raw traces and filled in for labeled corpora.
struct CaptionTrace {
    std::string caption_id;
    std::string image_id;
    std::string caption_text;
    DecodingInfo decoding;
    std::vector<TokenTrace> tokens;
    std::vector<ObjectMention> mentions;

    std::vector<std::string> token_texts() const;

    bool operator==(const CaptionTrace&) const = default;
};

const char* to_string(DecodingStrategy strategy) noexcept;
DecodingStrategy parse_decoding_strategy(const std::string& text);

/// Throws Error(validation) with a description of the first violated invariant.
void validate(const TokenTrace& token, const CorpusHeader& header);
void validate(const CaptionTrace& caption, const CorpusHeader& header);
void validate(const CorpusHeader& header);

/// True when the token texts concatenate to the caption modulo whitespace
/// (the SentencePiece word marker U+2581 counts as whitespace).
bool reconstructs_caption(const std::vector<std::string>& token_texts,
                          const std::string& caption_text);

/// Serialize/parse one record. Numbers are written in shortest round-trip
/// decimal form, so parse(serialize(x)) reproduces every double bit-exactly.
std::string serialize_header(const CorpusHeader& header);
std::string serialize_caption(const CaptionTrace& caption);
CorpusHeader parse_header(const std::string& line);
CaptionTrace parse_caption(const std::string& line);

/// Single-token records, used by the generator protocol.
nlohmann::json to_json(const TokenTrace& token);
TokenTrace token_trace_from_json(const nlohmann::json& j);

/// Streams a trace file one record at a time. Errors carry the 1-based line
/// number of the offending record.
class TraceReader {
public:
    explicit TraceReader(const std::filesystem::path& path);

    const CorpusHeader& header() const noexcept { return header_; }
    std::size_t line_number() const noexcept { return line_number_; }

    /// Next validated record, or nullopt at end of file.
    std::optional<CaptionTrace> next();

private:
    std::filesystem::path path_;
    std::ifstream in_;
    CorpusHeader header_;
    std::size_t line_number_ = 0;
    std::unordered_set<std::string> seen_ids_;
};

class TraceWriter {
public:
    TraceWriter(const std::filesystem::path& path, const CorpusHeader& header);

    void write(const CaptionTrace& caption);
    void close();
    std::size_t written() const noexcept { return written_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
    CorpusHeader header_;
    std::size_t written_ = 0;
};

struct TraceCorpus {
    CorpusHeader header;
    std::vector<CaptionTrace> captions;
};

TraceCorpus read_traces(const std::filesystem::path& path);
void write_traces(const std::filesystem::path& path, const TraceCorpus& corpus);

/// image_id -> set of canonical object categories present in the image.
struct GroundTruth {
    std::map<std::string, std::set<std::string>> objects;

    const std::set<std::string>& at(const std::string& image_id) const;
    bool contains(const std::string& image_id) const { return objects.count(image_id) != 0; }
};

GroundTruth load_ground_truth(const std::filesystem::path& path);
void save_ground_truth(const std::filesystem::path& path, const GroundTruth& truth);

}  // namespace haloprobe
