#include "haloprobe/labeler.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "haloprobe/assets.hpp"
#include "haloprobe/error.hpp"

namespace haloprobe {

namespace {

std::string lowercase(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// Collapse internal whitespace to single spaces and lowercase.
std::string normalize_phrase(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_word_byte(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

bool space_at(std::string_view s, std::size_t i, std::size_t& width) {
    const auto c = static_cast<unsigned char>(s[i]);
    width = 1;
    if (std::isspace(c)) {
        return true;
    }
    if (c == 0xE2 && i + 2 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0x96 &&
        static_cast<unsigned char>(s[i + 2]) == 0x81) {
        width = 3;
        return true;
    }
    return false;
}

std::string join(const std::vector<WordSpan>& words, std::size_t first, std::size_t count,
                 const std::vector<std::string>* replacement) {
    std::string out;
    for (std::size_t k = 0; k < count; ++k) {
        if (k) {
            out.push_back(' ');
        }
        out += replacement ? (*replacement)[first + k] : words[first + k].text;
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// SynonymTable

void SynonymTable::add(std::string_view surface, std::string_view canonical) {
    const std::string key = normalize_phrase(surface);
    const std::string value = normalize_phrase(canonical);
    if (key.empty() || value.empty()) {
        fail(ErrorKind::config, "synonym table entry with empty surface or category");
    }
    const auto [it, inserted] = table_.emplace(key, value);
    if (!inserted && it->second != value) {
        fail(ErrorKind::config, "synonym '" + key + "' maps to both '" + it->second + "' and '" +
                                    value + "'");
    }
    std::size_t n = 0;
    std::istringstream ws(key);
    for (std::string w; ws >> w;) {
        words_.insert(w);
        ++n;
    }
    max_words_ = std::max(max_words_, n);
}

std::optional<std::string> SynonymTable::lookup(const std::string& phrase) const {
    const auto it = table_.find(phrase);
    if (it == table_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::set<std::string> SynonymTable::categories() const {
    std::set<std::string> out;
    for (const auto& [surface, canonical] : table_) {
        out.insert(canonical);
    }
    return out;
}

SynonymTable SynonymTable::parse(std::istream& in, const std::string& source) {
    SynonymTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            fail(ErrorKind::config, source + ":" + std::to_string(line_no) +
                                        ": expected 'surface<TAB>canonical'");
        }
        table.add(trim(line.substr(0, tab)), trim(line.substr(tab + 1)));
    }
    return table;
}

SynonymTable SynonymTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::config, "cannot open synonym table " + path.string());
    }
    return parse(in, path.string());
}

SynonymTable SynonymTable::builtin_coco() {
    std::istringstream in{std::string(assets::coco_synonyms())};
    return parse(in, "<builtin coco_synonyms.tsv>");
}

// ---------------------------------------------------------------------------
// Lemmatizer

Lemmatizer::Lemmatizer(std::map<std::string, std::string> irregular,
                       std::set<std::string> vocabulary)
    : irregular_(std::move(irregular)), vocabulary_(std::move(vocabulary)) {}

std::string Lemmatizer::lemma(const std::string& word) const {
    if (vocabulary_.count(word)) {
        return word;
    }
    if (const auto it = irregular_.find(word); it != irregular_.end()) {
        return it->second;
    }
    std::vector<std::string> candidates;
    if (ends_with(word, "ies") && word.size() > 3) {
        candidates.push_back(word.substr(0, word.size() - 3) + "y");
    }
    if (ends_with(word, "es") && word.size() > 2) {
        candidates.push_back(word.substr(0, word.size() - 2));
    }
    if (ends_with(word, "s") && !ends_with(word, "ss") && word.size() > 1) {
        candidates.push_back(word.substr(0, word.size() - 1));
    }
    for (const auto& c : candidates) {
        if (vocabulary_.count(c)) {
            return c;
        }
    }
    return word;
}

std::map<std::string, std::string> Lemmatizer::parse_irregular(std::istream& in,
                                                               const std::string& source) {
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            fail(ErrorKind::config,
                 source + ":" + std::to_string(line_no) + ": expected 'plural<TAB>singular'");
        }
        out[lowercase(trim(line.substr(0, tab)))] = lowercase(trim(line.substr(tab + 1)));
    }
    return out;
}

std::map<std::string, std::string> Lemmatizer::load_irregular(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::config, "cannot open irregular plural table " + path.string());
    }
    return parse_irregular(in, path.string());
}

std::map<std::string, std::string> Lemmatizer::builtin_irregular() {
    std::istringstream in{std::string(assets::irregular_plurals())};
    return parse_irregular(in, "<builtin irregular_plurals.tsv>");
}

// ---------------------------------------------------------------------------
// ObjectVocabulary

ObjectVocabulary::ObjectVocabulary(SynonymTable synonyms,
                                   std::map<std::string, std::string> irregular)
    : synonyms_(std::move(synonyms)), lemmatizer_(std::move(irregular), synonyms_.words()) {}

ObjectVocabulary ObjectVocabulary::builtin() {
    return ObjectVocabulary(SynonymTable::builtin_coco(), Lemmatizer::builtin_irregular());
}

ObjectVocabulary ObjectVocabulary::load(const std::optional<std::filesystem::path>& synonyms,
                                        const std::optional<std::filesystem::path>& irregular) {
    return ObjectVocabulary(synonyms ? SynonymTable::load(*synonyms) : SynonymTable::builtin_coco(),
                            irregular ? Lemmatizer::load_irregular(*irregular)
                                      : Lemmatizer::builtin_irregular());
}

// ---------------------------------------------------------------------------
// Extraction

std::vector<WordSpan> split_words(std::string_view text) {
    std::vector<WordSpan> words;
    std::size_t i = 0;
    while (i < text.size()) {
        if (!is_word_byte(text[i])) {
            ++i;
            continue;
        }
        const std::size_t b = i;
        while (i < text.size() && is_word_byte(text[i])) {
            ++i;
        }
        words.push_back({lowercase(text.substr(b, i - b)), b, i});
    }
    return words;
}

std::vector<ObjectWord> find_object_words(std::string_view caption_text,
                                          const ObjectVocabulary& vocabulary) {
    const auto words = split_words(caption_text);
    std::vector<std::string> lemmas;
    lemmas.reserve(words.size());
    for (const auto& w : words) {
        lemmas.push_back(vocabulary.lemmatizer().lemma(w.text));
    }
    const auto& table = vocabulary.synonyms();
    std::vector<ObjectWord> found;
    std::size_t i = 0;
    while (i < words.size()) {
        const std::size_t longest = std::min(table.max_phrase_words(), words.size() - i);
        std::optional<std::string> category;
        std::size_t matched = 0;
        for (std::size_t n = longest; n >= 1 && !category; --n) {
            category = table.lookup(join(words, i, n, nullptr));
            if (!category) {
                category = table.lookup(join(words, i, n, &lemmas));
            }
            if (category) {
                matched = n;
            }
        }
        if (!category) {
            ++i;
            continue;
        }
        const std::size_t b = words[i].begin;
        const std::size_t e = words[i + matched - 1].end;
        found.push_back({*category, std::string(caption_text.substr(b, e - b)), b, e});
        i += matched;
    }
    return found;
}

ExtractionResult extract_object_mentions(std::string_view caption_text,
                                         std::span<const std::string> token_texts,
                                         const ObjectVocabulary& vocabulary) {
    // Non-whitespace byte streams of caption and tokens; positions in the
    // caption stream are compared against the token stream directly.
    std::vector<std::size_t> stream_pos(caption_text.size(), 0);
    std::string caption_stream;
    for (std::size_t i = 0; i < caption_text.size();) {
        std::size_t width = 1;
        if (!space_at(caption_text, i, width)) {
            stream_pos[i] = caption_stream.size();
            caption_stream.push_back(caption_text[i]);
        }
        i += width;
    }
    std::string token_stream;
    std::vector<int> owner;
    for (std::size_t t = 0; t < token_texts.size(); ++t) {
        const std::string& text = token_texts[t];
        for (std::size_t i = 0; i < text.size();) {
            std::size_t width = 1;
            if (!space_at(text, i, width)) {
                token_stream.push_back(text[i]);
                owner.push_back(static_cast<int>(t));
            }
            i += width;
        }
    }

    ExtractionResult result;
    std::unordered_map<std::string, int> seen;
    for (const auto& word : find_object_words(caption_text, vocabulary)) {
        const std::size_t s = stream_pos[word.char_begin];
        const std::size_t e = stream_pos[word.char_end - 1] + 1;
        const bool aligned = e <= token_stream.size() &&
                             token_stream.compare(s, e - s, caption_stream, s, e - s) == 0;
        if (!aligned) {
            spdlog::warn("cannot align object word '{}' at byte {} to generated tokens",
                         word.surface, word.char_begin);
            ++result.unaligned_words;
            continue;
        }
        ObjectMention m;
        m.category = word.category;
        m.surface = word.surface;
        m.token_index = owner[s];
        m.char_begin = word.char_begin;
        m.char_end = word.char_end;
        m.repetition = ++seen[word.category];
        m.first_occurrence = m.repetition == 1;
        result.mentions.push_back(std::move(m));
    }
    return result;
}

void label_with_groundtruth(std::vector<ObjectMention>& mentions,
                            const std::set<std::string>& ground_truth) {
    for (auto& m : mentions) {
        m.label = ground_truth.count(m.category) ? ObjectLabel::correct : ObjectLabel::hallucinated;
    }
}

void label_with_groundtruth(std::vector<ObjectMention>& mentions, const GroundTruth& truth,
                            const std::string& image_id) {
    label_with_groundtruth(mentions, truth.at(image_id));
}

std::size_t label_corpus(std::vector<CaptionTrace>& captions, const GroundTruth& truth,
                         const ObjectVocabulary& vocabulary) {
    std::size_t unaligned = 0;
    for (auto& c : captions) {
        const auto texts = c.token_texts();
        auto extracted = extract_object_mentions(c.caption_text, texts, vocabulary);
        label_with_groundtruth(extracted.mentions, truth, c.image_id);
        c.mentions = std::move(extracted.mentions);
        unaligned += extracted.unaligned_words;
    }
    return unaligned;
}

LabeledCaption label_caption_text(const std::string& caption_id, const std::string& image_id,
                                  std::string_view caption_text, const GroundTruth& truth,
                                  const ObjectVocabulary& vocabulary) {
    LabeledCaption out{caption_id, image_id, {}};
    std::unordered_map<std::string, int> seen;
    for (const auto& w : find_object_words(caption_text, vocabulary)) {
        ObjectMention m;
        m.category = w.category;
        m.surface = w.surface;
        m.char_begin = w.char_begin;
        m.char_end = w.char_end;
        m.repetition = ++seen[w.category];
        m.first_occurrence = m.repetition == 1;
        out.mentions.push_back(std::move(m));
    }
    label_with_groundtruth(out.mentions, truth, image_id);
    return out;
}

LabeledCaption to_labeled(const CaptionTrace& caption) {
    return {caption.caption_id, caption.image_id, caption.mentions};
}

// ---------------------------------------------------------------------------
// Corpus metrics

ChairMetrics chair_metrics(std::span<const LabeledCaption> corpus) {
    if (corpus.empty()) {
        fail(ErrorKind::validation, "CHAIR needs at least one caption");
    }
    ChairMetrics m;
    m.captions = corpus.size();
    for (const auto& c : corpus) {
        if (c.mentions.empty()) {
            ++m.captions_without_mentions;
        }
        bool any = false;
        for (const auto& mention : c.mentions) {
            if (!mention.label) {
                fail(ErrorKind::validation, "caption " + c.caption_id + " has unlabeled mentions");
            }
            ++m.mentions;
            if (*mention.label == ObjectLabel::hallucinated) {
                ++m.hallucinated_mentions;
                any = true;
            }
        }
        m.hallucinated_captions += any ? 1 : 0;
    }
    if (m.mentions > 0) {
        m.instance = static_cast<double>(m.hallucinated_mentions) / static_cast<double>(m.mentions);
    }
    m.sentence = static_cast<double>(m.hallucinated_captions) / static_cast<double>(m.captions);
    return m;
}

ObjectF1 object_f1(std::span<const LabeledCaption> corpus, const GroundTruth& truth,
                   F1Averaging averaging) {
    ObjectF1 out;
    std::size_t hit_total = 0;
    std::size_t predicted_total = 0;
    std::size_t truth_total = 0;
    double p_sum = 0.0;
    double r_sum = 0.0;
    std::size_t p_n = 0;
    std::size_t r_n = 0;
    for (const auto& c : corpus) {
        const auto& gt = truth.at(c.image_id);
        std::set<std::string> predicted;
        for (const auto& m : c.mentions) {
            predicted.insert(m.category);
        }
        std::size_t hits = 0;
        for (const auto& p : predicted) {
            hits += gt.count(p);
        }
        ++out.images;
        if (gt.empty()) {
            ++out.images_without_ground_truth;
        }
        hit_total += hits;
        predicted_total += predicted.size();
        truth_total += gt.size();
        if (!predicted.empty()) {
            p_sum += static_cast<double>(hits) / static_cast<double>(predicted.size());
            ++p_n;
        }
        if (!gt.empty()) {
            r_sum += static_cast<double>(hits) / static_cast<double>(gt.size());
            ++r_n;
        }
    }
    if (averaging == F1Averaging::micro) {
        out.precision = predicted_total ? static_cast<double>(hit_total) / predicted_total : 0.0;
        out.recall = truth_total ? static_cast<double>(hit_total) / truth_total : 0.0;
    } else {
        out.precision = p_n ? p_sum / static_cast<double>(p_n) : 0.0;
        out.recall = r_n ? r_sum / static_cast<double>(r_n) : 0.0;
    }
    const double denom = out.precision + out.recall;
    out.f1 = denom > 0.0 ? 2.0 * out.precision * out.recall / denom : 0.0;
    if (out.images_without_ground_truth) {
        spdlog::info("object F1: {} image(s) with empty ground truth excluded from recall",
                     out.images_without_ground_truth);
    }
    return out;
}

F1Averaging parse_f1_averaging(const std::string& text) {
    if (text == "micro") return F1Averaging::micro;
    if (text == "macro") return F1Averaging::macro;
    fail(ErrorKind::config, "F1 averaging must be micro or macro, got '" + text + "'");
}

}  // namespace haloprobe
