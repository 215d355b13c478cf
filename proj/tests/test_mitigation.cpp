#include <doctest.h>

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "haloprobe/assets.hpp"
#include "haloprobe/error.hpp"
#include "haloprobe/mitigation.hpp"
#include "haloprobe/mlp.hpp"
#include "haloprobe/synth.hpp"

using namespace haloprobe;

namespace {

TokenScore scored(double p_correct, double threshold = 0.5) {
    return make_score({"c", "x", 0, 1, true}, p_correct, 0.5, threshold);
}

// Scores a mention by ground-truth membership; stands in for a trained detector.
class OracleScorer : public MentionScorer {
public:
    explicit OracleScorer(std::set<std::string> truth) : truth_(std::move(truth)) {}

    std::vector<TokenScore> score(const CaptionTrace& caption, const CorpusHeader&,
                                  std::span<const ObjectMention> mentions) const override {
        std::vector<TokenScore> out;
        for (const auto& m : mentions) {
            const double f = truth_.count(m.category) ? 0.9 : 0.1;
            out.push_back(make_score({caption.caption_id, m.category, m.token_index, m.repetition,
                                      m.first_occurrence},
                                     f, 0.5, threshold()));
        }
        return out;
    }

private:
    std::set<std::string> truth_;
};

std::size_t hallucinated_count(const std::vector<TokenScore>& s) {
    return static_cast<std::size_t>(std::ranges::count_if(
        s, [](const TokenScore& t) { return t.predicted == ObjectLabel::hallucinated; }));
}

}  // namespace

TEST_CASE("beam score arithmetic") {
    CHECK(beam_score(2, 1.1, 1, 0.4, 0.1) == doctest::Approx(2.96).epsilon(1e-15));
    CHECK(beam_score(0, 0.0, 0, 0.0, 0.1) == 0.0);
    CHECK(beam_score(1, 0.7, 5, 4.0, 0.0) == doctest::Approx(1.7).epsilon(1e-15));

    const auto c = score_mentions({scored(0.45), scored(0.4), scored(0.6)}, 0.1);
    CHECK(c.n_hal == 2);
    CHECK(c.n_corr == 1);
    CHECK(c.p_hal == doctest::Approx(1.15).epsilon(1e-14));
    CHECK(c.p_corr == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(c.score == doctest::Approx(2 + 1.15 - 0.1 * 1.6).epsilon(1e-14));
    CHECK(score_mentions({}, 0.1).score == 0.0);
}

TEST_CASE("beam score moves the right way") {
    for (double beta : {0.0, 0.1, 1.0}) {
        const double base = beam_score(1, 0.6, 2, 1.5, beta);
        CHECK(beam_score(2, 0.6, 2, 1.5, beta) > base);
        CHECK(beam_score(1, 0.9, 2, 1.5, beta) > base);
        CHECK(beam_score(1, 0.6, 3, 1.5, beta) <= base);
        CHECK(beam_score(1, 0.6, 2, 1.8, beta) <= base);
    }
}

TEST_CASE("candidate selection: lowest score, then likelihood, then index") {
    std::vector<CandidateScore> s(3);
    s[0].score = 1.0;
    s[1].score = 0.5;
    s[2].score = 0.5;
    CHECK(select_candidate(s, std::vector<double>{-1, -2, -3}) == 1);
    CHECK(select_candidate(s, std::vector<double>{-1, -3, -2}) == 2);
    s[0].score = 0.5;
    CHECK(select_candidate(s, std::vector<double>{-1, -1, -1}) == 0);
    CHECK_THROWS_AS(select_candidate({}, {}), Error);
}

TEST_CASE("guided search over three rounds keeps the least hallucinated candidate") {
    const std::set<std::string> truth{"dog", "cat", "car", "bus"};
    ScriptedGenerator gen(GeneratorSpec::separated(), truth, 5, {60, 3, 0.5});
    const OracleScorer scorer(truth);
    BeamConfig cfg;
    cfg.session_id = "img-7";
    cfg.image_id = "img-7";
    const auto vocab = ObjectVocabulary::builtin();
    const auto r = guided_beam_search(gen, scorer, vocab, cfg);
    CHECK_FALSE(r.error.has_value());
    CHECK(r.ended);
    REQUIRE(r.audit.size() == 3);
    CHECK(gen.requests() == 3);
    CHECK(r.caption.tokens.size() == 60);
    CHECK(r.caption.image_id == "img-7");

    std::size_t minima = 0;
    for (std::size_t k = 0; k < r.audit.size(); ++k) {
        const auto& round = r.audit[k];
        CHECK(round.prefix_length == static_cast<int>(20 * k));
        CHECK(round.scores.size() == 5);
        std::size_t best = round.scores[0].n_hal;
        for (const auto& s : round.scores) {
            CHECK(round.scores[round.selected].score <= s.score);
            best = std::min(best, s.n_hal);
        }
        minima += best;
    }
    const auto final_mentions = extract_object_mentions(r.caption.caption_text,
                                                        r.caption.token_texts(), vocab);
    const auto final_scores = scorer.score(r.caption, gen.header(), final_mentions.mentions);
    CHECK(hallucinated_count(final_scores) <= minima);
    CHECK(to_json(r).at("rounds").size() == 3);
}

TEST_CASE("a failing generator stops the search with a recorded error") {
    class Broken : public Generator {
    public:
        const CorpusHeader& header() const override { return h_; }
        GenerationResponse generate(const GenerationRequest&) override {
            fail(ErrorKind::protocol, "server went away");
        }

    private:
        CorpusHeader h_ = GeneratorSpec::separated().header();
    } broken;
    const auto r = guided_beam_search(broken, OracleScorer({}), ObjectVocabulary::builtin(), {});
    REQUIRE(r.error.has_value());
    CHECK(r.error->find("went away") != std::string::npos);
    CHECK(r.audit.empty());
}

TEST_CASE("marking inserts the marker before hallucinated mentions only") {
    const auto vocab = ObjectVocabulary::builtin();
    const std::string text = "A kitchen with wooden cabinets and a refrigerator.";
    const auto found = find_object_words(text, vocab);
    std::vector<ObjectMention> mentions;
    for (const auto& w : found) {
        ObjectMention m;
        m.category = w.category;
        m.char_begin = w.char_begin;
        m.char_end = w.char_end;
        mentions.push_back(m);
    }
    REQUIRE(mentions.size() == 1);
    const std::vector<TokenScore> halluc{scored(0.2)};
    const auto marked = mark_hallucinations(text, mentions, halluc);
    CHECK(marked == "A kitchen with wooden cabinets and a $refrigerator.");
    const std::vector<TokenScore> fine{scored(0.8)};
    CHECK(mark_hallucinations(text, mentions, fine) == text);

    SUBCASE("every hallucinated mention of a repeated category is marked") {
        const std::string t2 = "A cat near a dog and another cat.";
        std::vector<ObjectMention> ms;
        for (const auto& w : find_object_words(t2, vocab)) {
            ObjectMention m;
            m.category = w.category;
            m.char_begin = w.char_begin;
            m.char_end = w.char_end;
            ms.push_back(m);
        }
        REQUIRE(ms.size() == 3);
        const std::vector<TokenScore> s{scored(0.1), scored(0.9), scored(0.1)};
        const auto out = mark_hallucinations(t2, ms, s, "@@");
        CHECK(out == "A @@cat near a dog and another @@cat.");
        // Removing the markers gives back the caption.
        std::string stripped = out;
        for (auto p = stripped.find("@@"); p != std::string::npos; p = stripped.find("@@")) stripped.erase(p, 2);
        CHECK(stripped == t2);
    }
    CHECK_THROWS_AS(mark_hallucinations(text, mentions, std::vector<TokenScore>{}), Error);
}

TEST_CASE("edit requests carry the packaged prompts byte for byte") {
    auto sha = [](std::string_view s) {
        return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
    };
    CHECK(sha(assets::system_prompt()) ==
          "501942e24ac177fc6d537a616c8640915e19c5e0e5f4e69eb5eaecac1db28350");
    CHECK(sha(assets::editing_prompt()) ==
          "b52c6bf02e936cfc0672bc8814a536a1758c3f7793bb2d09f1b056fcbbb6f1fe");
    const std::string marked = "A dog and a $cat.";
    const auto req = emit_edit_request(marked);
    CHECK(req.payload.size() > marked.size());
    CHECK(req.payload.substr(req.payload.size() - marked.size()) == marked);
    CHECK(req.payload.substr(0, req.editing_prompt.size()) == req.editing_prompt);
    CHECK(to_json(req).contains("system_prompt"));
}

TEST_CASE("editor replies and the stand-in editor") {
    CHECK(parse_editor_response("Sure! \"A dog on a bed.\"") == "A dog on a bed.");
    CHECK_THROWS_AS(parse_editor_response("no caption here"), Error);
    CHECK_THROWS_AS(parse_editor_response("one \" quote"), Error);

    const auto vocab = ObjectVocabulary::builtin();
    for (const std::string marked : {"A dog and a $cat on a bed.", "A $cat, a dog and a $car.",
                                     "Two $cats sleep near a dog.", "A dog near the $dining table."}) {
        const auto edited = parse_editor_response(mock_editor(marked, vocab));
        INFO(marked << " -> " << edited);
        std::set<std::string> left;
        for (const auto& w : find_object_words(edited, vocab)) left.insert(w.category);
        CHECK(left.count("cat") == 0);
        CHECK(left.count("car") == 0);
        CHECK(left.count("dining table") == 0);
        CHECK(left.count("dog") == 1);
        CHECK(edited.find('$') == std::string::npos);
        CHECK(edited.find("  ") == std::string::npos);
    }
}
