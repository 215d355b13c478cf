#pragma once

// File helpers shared by the haloprobe subcommands.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "haloprobe/labeler.hpp"
#include "haloprobe/trace.hpp"

namespace haloprobe::cli {

/// Plain caption, as read by `eval` and written by `emit-edit`.
struct CaptionRecord {
    std::string caption_id;
    std::string image_id;
    std::string caption;
};

/// Either a trace file (header line first) or JSONL with caption_id,
/// image_id and caption per line.
std::vector<CaptionRecord> read_caption_records(const std::filesystem::path& path);
void write_caption_records(const std::filesystem::path& path,
                           const std::vector<CaptionRecord>& records);

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines);
void write_json(const std::filesystem::path& path, const nlohmann::json& value);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Creates the directory if needed; io error otherwise.
void ensure_directory(const std::filesystem::path& dir);

/// Loads traces and, when `truth` is given, relabels every caption.
/// Captions without mentions get unlabeled mentions extracted from their text.
TraceCorpus load_corpus(const std::filesystem::path& traces,
                        const std::optional<std::filesystem::path>& truth,
                        const ObjectVocabulary& vocabulary);

/// Splits on runs of spaces; no quoting.
std::vector<std::string> split_command(const std::string& command);

}  // namespace haloprobe::cli
