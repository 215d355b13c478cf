#include "cli_io.hpp"

#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe::cli {

using nlohmann::json;

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) ensure_directory(path.parent_path());
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    return out;
}

}  // namespace

std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<json> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            fail(ErrorKind::validation,
                 path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& lines) {
    auto out = open_out(path);
    for (const auto& j : lines) out << j.dump() << '\n';
    if (!out) fail(ErrorKind::io, "write failed on " + path.string());
}

void write_json(const std::filesystem::path& path, const json& value) {
    write_text(path, value.dump(2) + "\n");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
    if (!out) fail(ErrorKind::io, "write failed on " + path.string());
}

void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create directory " + dir.string() + ": " + ec.message());
}

std::vector<CaptionRecord> read_caption_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::string first;
    std::getline(in, first);
    in.close();
    bool is_trace = false;
    try {
        const auto j = json::parse(first);
        is_trace = j.is_object() && j.value("kind", "") == "haloprobe-traces";
    } catch (const json::exception&) {
        // reported below with a line number
    }

    std::vector<CaptionRecord> out;
    if (is_trace) {
        for (auto& c : read_traces(path).captions) {
            out.push_back({c.caption_id, c.image_id, c.caption_text});
        }
        return out;
    }
    std::size_t n = 0;
    for (const auto& j : read_jsonl(path)) {
        ++n;
        try {
            out.push_back({j.at("caption_id").get<std::string>(),
                           j.at("image_id").get<std::string>(),
                           j.at("caption").get<std::string>()});
        } catch (const json::exception& e) {
            fail(ErrorKind::validation,
                 path.string() + ": record " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

void write_caption_records(const std::filesystem::path& path,
                           const std::vector<CaptionRecord>& records) {
    std::vector<json> lines;
    for (const auto& r : records) {
        lines.push_back({{"caption_id", r.caption_id},
                         {"image_id", r.image_id},
                         {"caption", r.caption}});
    }
    write_jsonl(path, lines);
}

TraceCorpus load_corpus(const std::filesystem::path& traces,
                        const std::optional<std::filesystem::path>& truth,
                        const ObjectVocabulary& vocabulary) {
    auto corpus = read_traces(traces);
    std::size_t unaligned = 0;
    if (truth) {
        unaligned = label_corpus(corpus.captions, load_ground_truth(*truth), vocabulary);
    } else {
        for (auto& c : corpus.captions) {
            if (!c.mentions.empty()) continue;
            auto extracted = extract_object_mentions(c.caption_text, c.token_texts(), vocabulary);
            c.mentions = std::move(extracted.mentions);
            unaligned += extracted.unaligned_words;
        }
    }
    if (unaligned > 0) {
        spdlog::warn("{} object words could not be aligned to tokens and were skipped", unaligned);
    }
    return corpus;
}

std::vector<std::string> split_command(const std::string& command) {
    std::istringstream in(command);
    std::vector<std::string> argv;
    for (std::string part; in >> part;) argv.push_back(part);
    if (argv.empty()) fail(ErrorKind::config, "empty generator command");
    return argv;
}

}  // namespace haloprobe::cli
