#include "haloprobe/trace.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "haloprobe/error.hpp"

namespace haloprobe {

using nlohmann::json;

namespace {

// Entropy bounds are analytic (ln k); allow for the rounding of the producer.
constexpr double kBoundSlack = 1e-9;

void check(bool ok, const std::string& message) {
    if (!ok) {
        fail(ErrorKind::validation, message);
    }
}

void check_matrix(const std::vector<double>& values, const CorpusHeader& header,
                  const char* name, double lo, double hi, int token_index) {
    std::ostringstream where;
    where << "token " << token_index << " " << name;
    check(values.size() == header.matrix_size(),
          where.str() + ": expected " + std::to_string(header.matrix_size()) +
              " entries (L x H), got " + std::to_string(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (!std::isfinite(v) || v < lo - kBoundSlack || v > hi + kBoundSlack) {
            std::ostringstream msg;
            msg.precision(17);
            msg << where.str() << "[" << i << "] = " << v << " outside [" << lo << ", " << hi
                << "]";
            fail(ErrorKind::validation, msg.str());
        }
    }
}

bool is_space_byte(const std::string& s, std::size_t i, std::size_t& width) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
        width = 1;
        return true;
    }
    // U+2581 LOWER ONE EIGHTH BLOCK, used as a word marker by SentencePiece.
    if (c == 0xE2 && i + 2 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0x96 &&
        static_cast<unsigned char>(s[i + 2]) == 0x81) {
        width = 3;
        return true;
    }
    width = 1;
    return false;
}

std::string strip_space(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size();) {
        std::size_t width = 1;
        if (!is_space_byte(s, i, width)) {
            out.push_back(s[i]);
        }
        i += width;
    }
    return out;
}

json matrix_json(const std::vector<double>& v) {
    return json(v);
}

json token_to_json(const TokenTrace& t) {
    return json{
        {"token_index", t.token_index},
        {"token_text", t.token_text},
        {"token_id", t.token_id},
        {"attn_mean_cur", matrix_json(t.attn_mean_cur)},
        {"attn_mean_next", matrix_json(t.attn_mean_next)},
        {"attn_entropy_cur", matrix_json(t.attn_entropy_cur)},
        {"attn_entropy_next", matrix_json(t.attn_entropy_next)},
        {"logit_entropy", t.logit_entropy},
        {"max_logit", t.max_logit},
        {"max_softmax", t.max_softmax},
    };
}

double number(const json& j, const char* key) {
    const auto& v = j.at(key);
    if (!v.is_number()) {
        fail(ErrorKind::validation, std::string("field '") + key + "' is not a number");
    }
    return v.get<double>();
}

std::vector<double> numbers(const json& j, const char* key) {
    const auto& v = j.at(key);
    if (!v.is_array()) {
        fail(ErrorKind::validation, std::string("field '") + key + "' is not an array");
    }
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& x : v) {
        if (!x.is_number()) {
            fail(ErrorKind::validation, std::string("field '") + key + "' holds a non-number");
        }
        out.push_back(x.get<double>());
    }
    return out;
}

TokenTrace token_from_json(const json& j) {
    TokenTrace t;
    t.token_index = j.at("token_index").get<int>();
    t.token_text = j.at("token_text").get<std::string>();
    t.token_id = j.at("token_id").get<std::int64_t>();
    t.attn_mean_cur = numbers(j, "attn_mean_cur");
    t.attn_mean_next = numbers(j, "attn_mean_next");
    t.attn_entropy_cur = numbers(j, "attn_entropy_cur");
    t.attn_entropy_next = numbers(j, "attn_entropy_next");
    t.logit_entropy = number(j, "logit_entropy");
    t.max_logit = number(j, "max_logit");
    t.max_softmax = number(j, "max_softmax");
    return t;
}

json mention_to_json(const ObjectMention& m) {
    json j{
        {"category", m.category},
        {"surface", m.surface},
        {"token_index", m.token_index},
        {"char_begin", m.char_begin},
        {"char_end", m.char_end},
        {"repetition", m.repetition},
        {"first_occurrence", m.first_occurrence},
    };
    j["label"] = m.label ? json(to_int(*m.label)) : json(nullptr);
    return j;
}

ObjectMention mention_from_json(const json& j) {
    ObjectMention m;
    m.category = j.at("category").get<std::string>();
    m.surface = j.at("surface").get<std::string>();
    m.token_index = j.at("token_index").get<int>();
    m.char_begin = j.at("char_begin").get<std::size_t>();
    m.char_end = j.at("char_end").get<std::size_t>();
    m.repetition = j.at("repetition").get<int>();
    m.first_occurrence = j.at("first_occurrence").get<bool>();
    if (j.contains("label") && !j.at("label").is_null()) {
        const int y = j.at("label").get<int>();
        check(y == 0 || y == 1, "mention label must be 0 or 1");
        m.label = static_cast<ObjectLabel>(y);
    }
    return m;
}

}  // namespace

double CorpusHeader::max_attention_entropy() const {
    return std::log(static_cast<double>(top_k));
}

double CorpusHeader::max_logit_entropy() const {
    return std::log(static_cast<double>(top_m));
}

std::vector<std::string> CaptionTrace::token_texts() const {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        out.push_back(t.token_text);
    }
    return out;
}

const char* to_string(DecodingStrategy strategy) noexcept {
    switch (strategy) {
        case DecodingStrategy::greedy: return "greedy";
        case DecodingStrategy::nucleus: return "nucleus";
        case DecodingStrategy::beam: return "beam";
    }
    return "greedy";
}

DecodingStrategy parse_decoding_strategy(const std::string& text) {
    if (text == "greedy") return DecodingStrategy::greedy;
    if (text == "nucleus") return DecodingStrategy::nucleus;
    if (text == "beam") return DecodingStrategy::beam;
    fail(ErrorKind::validation, "unknown decoding strategy '" + text + "'");
}

void validate(const CorpusHeader& header) {
    check(header.format_version == kTraceFormatVersion,
          "unsupported trace format_version " + std::to_string(header.format_version));
    check(header.layers >= 1 && header.heads >= 1, "header requires L >= 1 and H >= 1");
    check(header.top_k >= 1 && header.top_m >= 1, "header requires k >= 1 and m >= 1");
}

void validate(const TokenTrace& token, const CorpusHeader& header) {
    const double max_h = header.max_attention_entropy();
    check_matrix(token.attn_mean_cur, header, "attn_mean_cur", 0.0, 1.0, token.token_index);
    check_matrix(token.attn_mean_next, header, "attn_mean_next", 0.0, 1.0, token.token_index);
    check_matrix(token.attn_entropy_cur, header, "attn_entropy_cur", 0.0, max_h,
                 token.token_index);
    check_matrix(token.attn_entropy_next, header, "attn_entropy_next", 0.0, max_h,
                 token.token_index);
    const std::string where = "token " + std::to_string(token.token_index);
    check(std::isfinite(token.logit_entropy) && token.logit_entropy >= -kBoundSlack &&
              token.logit_entropy <= header.max_logit_entropy() + kBoundSlack,
          where + ": logit_entropy outside [0, ln m]");
    check(std::isfinite(token.max_logit), where + ": max_logit is not finite");
    check(std::isfinite(token.max_softmax) && token.max_softmax > 0.0 && token.max_softmax <= 1.0,
          where + ": max_softmax outside (0, 1]");
}

void validate(const CaptionTrace& caption, const CorpusHeader& header) {
    check(!caption.caption_id.empty(), "caption_id is empty");
    for (std::size_t i = 0; i < caption.tokens.size(); ++i) {
        const auto& t = caption.tokens[i];
        check(t.token_index == static_cast<int>(i),
              "caption " + caption.caption_id + ": token_index " + std::to_string(t.token_index) +
                  " at position " + std::to_string(i) + " (indices must be 0..n-1)");
        validate(t, header);
    }
    check(reconstructs_caption(caption.token_texts(), caption.caption_text),
          "caption " + caption.caption_id + ": token texts do not reconstruct caption_text");
    for (const auto& m : caption.mentions) {
        check(m.token_index >= 0 && m.token_index < static_cast<int>(caption.tokens.size()),
              "caption " + caption.caption_id + ": mention token_index out of range");
        check(m.repetition >= 1 && m.first_occurrence == (m.repetition == 1),
              "caption " + caption.caption_id + ": inconsistent mention repetition");
    }
}

nlohmann::json to_json(const TokenTrace& token) {
    return token_to_json(token);
}

TokenTrace token_trace_from_json(const nlohmann::json& j) {
    return token_from_json(j);
}

bool reconstructs_caption(const std::vector<std::string>& token_texts,
                          const std::string& caption_text) {
    std::string joined;
    for (const auto& t : token_texts) {
        joined += t;
    }
    return strip_space(joined) == strip_space(caption_text);
}

std::string serialize_header(const CorpusHeader& header) {
    json j{
        {"kind", "haloprobe-traces"},
        {"format_version", header.format_version},
        {"L", header.layers},
        {"H", header.heads},
        {"k", header.top_k},
        {"m", header.top_m},
        {"attention_convention", header.attention_convention},
    };
    return j.dump();
}

std::string serialize_caption(const CaptionTrace& c) {
    json tokens = json::array();
    for (const auto& t : c.tokens) {
        for (const auto* m : {&t.attn_mean_cur, &t.attn_mean_next, &t.attn_entropy_cur,
                              &t.attn_entropy_next}) {
            for (double v : *m) {
                check(std::isfinite(v), "refusing to serialize non-finite attention value");
            }
        }
        tokens.push_back(token_to_json(t));
    }
    json j{
        {"caption_id", c.caption_id},
        {"image_id", c.image_id},
        {"caption_text", c.caption_text},
        {"decoding",
         {{"strategy", to_string(c.decoding.strategy)},
          {"temperature", c.decoding.temperature},
          {"max_len", c.decoding.max_len}}},
        {"tokens", std::move(tokens)},
    };
    if (!c.mentions.empty()) {
        json mentions = json::array();
        for (const auto& m : c.mentions) {
            mentions.push_back(mention_to_json(m));
        }
        j["mentions"] = std::move(mentions);
    }
    return j.dump();
}

CorpusHeader parse_header(const std::string& line) {
    try {
        const json j = json::parse(line);
        CorpusHeader h;
        h.format_version = j.at("format_version").get<int>();
        h.layers = j.at("L").get<int>();
        h.heads = j.at("H").get<int>();
        h.top_k = j.at("k").get<int>();
        h.top_m = j.at("m").get<int>();
        h.attention_convention = j.value("attention_convention", std::string{});
        validate(h);
        return h;
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("malformed header: ") + e.what());
    }
}

CaptionTrace parse_caption(const std::string& line) {
    try {
        const json j = json::parse(line);
        CaptionTrace c;
        c.caption_id = j.at("caption_id").get<std::string>();
        c.image_id = j.at("image_id").get<std::string>();
        c.caption_text = j.at("caption_text").get<std::string>();
        const auto& d = j.at("decoding");
        c.decoding.strategy = parse_decoding_strategy(d.at("strategy").get<std::string>());
        c.decoding.temperature = d.at("temperature").get<double>();
        c.decoding.max_len = d.at("max_len").get<int>();
        for (const auto& t : j.at("tokens")) {
            c.tokens.push_back(token_from_json(t));
        }
        if (j.contains("mentions")) {
            for (const auto& m : j.at("mentions")) {
                c.mentions.push_back(mention_from_json(m));
            }
        }
        return c;
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, std::string("malformed record: ") + e.what());
    }
}

TraceReader::TraceReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) {
        fail(ErrorKind::io, "cannot open trace file " + path.string());
    }
    std::string line;
    if (!std::getline(in_, line)) {
        fail(ErrorKind::validation, path.string() + ": missing corpus header");
    }
    line_number_ = 1;
    try {
        header_ = parse_header(line);
    } catch (const Error& e) {
        fail(e.kind(), path.string() + ":1: " + e.what());
    }
}

std::optional<CaptionTrace> TraceReader::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_number_;
        if (line.empty()) {
            continue;
        }
        try {
            CaptionTrace c = parse_caption(line);
            validate(c, header_);
            if (!seen_ids_.insert(c.caption_id).second) {
                fail(ErrorKind::validation, "duplicate caption_id '" + c.caption_id + "'");
            }
            return c;
        } catch (const Error& e) {
            fail(e.kind(), path_.string() + ":" + std::to_string(line_number_) + ": " + e.what());
        }
    }
    return std::nullopt;
}

TraceWriter::TraceWriter(const std::filesystem::path& path, const CorpusHeader& header)
    : path_(path), out_(path), header_(header) {
    if (!out_) {
        fail(ErrorKind::io, "cannot write trace file " + path.string());
    }
    validate(header_);
    out_ << serialize_header(header_) << '\n';
}

void TraceWriter::write(const CaptionTrace& caption) {
    validate(caption, header_);
    out_ << serialize_caption(caption) << '\n';
    if (!out_) {
        fail(ErrorKind::io, "write failed on " + path_.string());
    }
    ++written_;
}

void TraceWriter::close() {
    out_.close();
    if (out_.fail()) {
        fail(ErrorKind::io, "closing " + path_.string() + " failed");
    }
}

TraceCorpus read_traces(const std::filesystem::path& path) {
    TraceReader reader(path);
    TraceCorpus corpus;
    corpus.header = reader.header();
    while (auto c = reader.next()) {
        corpus.captions.push_back(std::move(*c));
    }
    return corpus;
}

void write_traces(const std::filesystem::path& path, const TraceCorpus& corpus) {
    TraceWriter writer(path, corpus.header);
    for (const auto& c : corpus.captions) {
        writer.write(c);
    }
    writer.close();
}

const std::set<std::string>& GroundTruth::at(const std::string& image_id) const {
    const auto it = objects.find(image_id);
    if (it == objects.end()) {
        fail(ErrorKind::validation, "image_id '" + image_id + "' missing from ground truth");
    }
    return it->second;
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open ground truth " + path.string());
    }
    GroundTruth truth;
    try {
        const json j = json::parse(in);
        for (const auto& [image_id, cats] : j.items()) {
            auto& set = truth.objects[image_id];
            for (const auto& c : cats) {
                set.insert(c.get<std::string>());
            }
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::validation, path.string() + ": " + e.what());
    }
    return truth;
}

void save_ground_truth(const std::filesystem::path& path, const GroundTruth& truth) {
    json j = json::object();
    for (const auto& [image_id, cats] : truth.objects) {
        j[image_id] = json(std::vector<std::string>(cats.begin(), cats.end()));
    }
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot write ground truth " + path.string());
    }
    out << j.dump(1) << '\n';
}

}  // namespace haloprobe
