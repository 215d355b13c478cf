#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "haloprobe/mention.hpp"
#include "haloprobe/trace.hpp"

namespace haloprobe {

/// Surface phrase -> canonical category. Phrases are lowercase and
/// single-space separated; each surface maps to exactly one category.
class SynonymTable {
public:
    void add(std::string_view surface, std::string_view canonical);

    std::optional<std::string> lookup(const std::string& phrase) const;
    std::size_t max_phrase_words() const noexcept { return max_words_; }
    std::size_t size() const noexcept { return table_.size(); }
    std::set<std::string> categories() const;
    /// Every single word that occurs in some surface phrase.
    const std::set<std::string>& words() const noexcept { return words_; }
    const std::map<std::string, std::string>& entries() const noexcept { return table_; }

    /// Two tab-separated columns (surface, canonical); '#' starts a comment.
    static SynonymTable parse(std::istream& in, const std::string& source = "<stream>");
    static SynonymTable load(const std::filesystem::path& path);
    static SynonymTable builtin_coco();

private:
    std::map<std::string, std::string> table_;
    std::set<std::string> words_;
    std::size_t max_words_ = 0;
};

/// Plural stripper: irregular table first, then -ies/-es/-s candidates,
/// keeping the first candidate that is a known vocabulary word.
class Lemmatizer {
public:
    Lemmatizer() = default;
    Lemmatizer(std::map<std::string, std::string> irregular, std::set<std::string> vocabulary);

    std::string lemma(const std::string& lowercase_word) const;

    static std::map<std::string, std::string> parse_irregular(std::istream& in,
                                                              const std::string& source);
    static std::map<std::string, std::string> load_irregular(const std::filesystem::path& path);
    static std::map<std::string, std::string> builtin_irregular();

private:
    std::map<std::string, std::string> irregular_;
    std::set<std::string> vocabulary_;
};

/// Synonym table plus the lemmatizer built over its vocabulary.
class ObjectVocabulary {
public:
    ObjectVocabulary(SynonymTable synonyms, std::map<std::string, std::string> irregular);

    static ObjectVocabulary builtin();
    static ObjectVocabulary load(const std::optional<std::filesystem::path>& synonyms,
                                 const std::optional<std::filesystem::path>& irregular);

    const SynonymTable& synonyms() const noexcept { return synonyms_; }
    const Lemmatizer& lemmatizer() const noexcept { return lemmatizer_; }

private:
    SynonymTable synonyms_;
    Lemmatizer lemmatizer_;
};

struct WordSpan {
    std::string text;  // lowercase
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// Maximal runs of ASCII letters and digits, with byte offsets.
std::vector<WordSpan> split_words(std::string_view text);

/// Object words found in text by longest-phrase matching over lemmas.
struct ObjectWord {
    std::string category;
    std::string surface;
    std::size_t char_begin = 0;
    std::size_t char_end = 0;
};

std::vector<ObjectWord> find_object_words(std::string_view caption_text,
                                          const ObjectVocabulary& vocabulary);

struct ExtractionResult {
    std::vector<ObjectMention> mentions;
    std::size_t unaligned_words = 0;
};

/// Finds object words and aligns each to the first generated token that
/// covers its first character. Words whose characters cannot be matched in
/// the token stream are skipped and counted.
ExtractionResult extract_object_mentions(std::string_view caption_text,
                                         std::span<const std::string> token_texts,
                                         const ObjectVocabulary& vocabulary);

/// label = correct iff the category is in the ground-truth set.
void label_with_groundtruth(std::vector<ObjectMention>& mentions,
                            const std::set<std::string>& ground_truth);
void label_with_groundtruth(std::vector<ObjectMention>& mentions, const GroundTruth& truth,
                            const std::string& image_id);

/// Caption-level view used by the corpus metrics.
struct LabeledCaption {
    std::string caption_id;
    std::string image_id;
    std::vector<ObjectMention> mentions;
};

/// Label every caption of a trace corpus in place; returns the number of
/// unaligned words across the corpus.
std::size_t label_corpus(std::vector<CaptionTrace>& captions, const GroundTruth& truth,
                         const ObjectVocabulary& vocabulary);

/// Labels plain captions (no token traces) for caption-level metrics.
LabeledCaption label_caption_text(const std::string& caption_id, const std::string& image_id,
                                  std::string_view caption_text, const GroundTruth& truth,
                                  const ObjectVocabulary& vocabulary);

LabeledCaption to_labeled(const CaptionTrace& caption);

struct ChairMetrics {
    std::optional<double> instance;  // C_i; null when the corpus has no mentions
    double sentence = 0.0;           // C_s
    std::size_t captions = 0;
    std::size_t captions_without_mentions = 0;
    std::size_t mentions = 0;
    std::size_t hallucinated_mentions = 0;
    std::size_t hallucinated_captions = 0;
};

ChairMetrics chair_metrics(std::span<const LabeledCaption> corpus);

enum class F1Averaging { micro, macro };

struct ObjectF1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t images = 0;
    std::size_t images_without_ground_truth = 0;
};

/// Category-set precision/recall per image, aggregated micro or macro.
ObjectF1 object_f1(std::span<const LabeledCaption> corpus, const GroundTruth& truth,
                   F1Averaging averaging = F1Averaging::micro);

F1Averaging parse_f1_averaging(const std::string& text);

}  // namespace haloprobe
