#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "haloprobe/labeler.hpp"
#include "test_util.hpp"

using namespace haloprobe;

namespace {

const ObjectVocabulary& vocab() {
    static const ObjectVocabulary v = ObjectVocabulary::builtin();
    return v;
}

std::vector<std::string> one_token_per_word(const std::string& text) {
    std::vector<std::string> tokens;
    std::istringstream in(text);
    for (std::string w; in >> w;) tokens.push_back(tokens.empty() ? w : " " + w);
    return tokens;
}

ObjectMention mention(const std::string& cat, ObjectLabel label, int r = 1) {
    ObjectMention m;
    m.category = cat;
    m.label = label;
    m.repetition = r;
    m.first_occurrence = r == 1;
    return m;
}

// Regular English plural, used as an independent oracle for the lemmatizer.
std::string plural_of(const std::string& w, const std::map<std::string, std::string>& irregular) {
    for (const auto& [pl, sg] : irregular) {
        if (sg == w && pl != w) return pl;
    }
    auto ends = [&](const std::string& s) {
        return w.size() >= s.size() && w.compare(w.size() - s.size(), s.size(), s) == 0;
    };
    if (ends("s") || ends("x") || ends("ch") || ends("sh")) return w + "es";
    if (ends("y") && w.size() > 1 && std::string("aeiou").find(w[w.size() - 2]) == std::string::npos) {
        return w.substr(0, w.size() - 1) + "ies";
    }
    return w + "s";
}

}  // namespace

TEST_CASE("repetition counts occurrences of a category within a caption") {
    const std::string text = "a dog and a dog";
    const auto r = extract_object_mentions(text, one_token_per_word(text), vocab());
    REQUIRE(r.mentions.size() == 2);
    CHECK(r.mentions[0].category == "dog");
    CHECK(r.mentions[0].token_index == 1);
    CHECK(r.mentions[0].repetition == 1);
    CHECK(r.mentions[0].first_occurrence);
    CHECK(r.mentions[1].token_index == 4);
    CHECK(r.mentions[1].repetition == 2);
    CHECK_FALSE(r.mentions[1].first_occurrence);
    CHECK(r.unaligned_words == 0);
}

TEST_CASE("multi-word objects align to their first token") {
    const std::string text = "there is a dining table";
    const auto r = extract_object_mentions(text, one_token_per_word(text), vocab());
    REQUIRE(r.mentions.size() == 1);
    CHECK(r.mentions[0].category == "dining table");
    CHECK(r.mentions[0].token_index == 3);
    CHECK(text.substr(r.mentions[0].char_begin, r.mentions[0].char_end - r.mentions[0].char_begin) ==
          "dining table");
}

TEST_CASE("sub-word tokens: the mention sits on the token holding its first character") {
    const std::string text = "two refrigerators";
    const std::vector<std::string> tokens{"two", " re", "fri", "ger", "ators"};
    const auto r = extract_object_mentions(text, tokens, vocab());
    REQUIRE(r.mentions.size() == 1);
    CHECK(r.mentions[0].category == "refrigerator");
    CHECK(r.mentions[0].token_index == 1);
}

TEST_CASE("words missing from the token stream are skipped and counted") {
    const std::string text = "a dog and a cat";
    const std::vector<std::string> tokens{"a", " dog", " and", " a"};
    const auto r = extract_object_mentions(text, tokens, vocab());
    CHECK(r.mentions.size() == 1);
    CHECK(r.unaligned_words == 1);
}

TEST_CASE("every builtin single-word category is recovered from its plural") {
    const auto irregular = Lemmatizer::builtin_irregular();
    std::size_t checked = 0;
    for (const auto& [surface, category] : vocab().synonyms().entries()) {
        if (surface.find(' ') != std::string::npos) continue;
        const auto pl = plural_of(surface, irregular);
        const auto words = find_object_words(pl, vocab());
        INFO("surface=" << surface << " plural=" << pl);
        REQUIRE(words.size() == 1);
        CHECK(words[0].category == category);
        ++checked;
    }
    CHECK(checked > 80);
    CHECK(find_object_words("dogs", vocab())[0].category == "dog");
}

TEST_CASE("labels are ground-truth set membership") {
    std::vector<ObjectMention> m{mention("dog", ObjectLabel::correct), mention("cat", ObjectLabel::correct)};
    label_with_groundtruth(m, std::set<std::string>{"dog"});
    CHECK(m[0].label == ObjectLabel::correct);
    CHECK(m[1].label == ObjectLabel::hallucinated);
    label_with_groundtruth(m, std::set<std::string>{});
    CHECK(m[0].label == ObjectLabel::hallucinated);
    CHECK(m[1].label == ObjectLabel::hallucinated);
}

TEST_CASE("CHAIR on small corpora") {
    std::vector<LabeledCaption> one{{"c", "i", {mention("dog", ObjectLabel::correct),
                                                mention("cat", ObjectLabel::hallucinated)}}};
    auto m = chair_metrics(one);
    CHECK(*m.instance == 0.5);
    CHECK(m.sentence == 1.0);

    std::vector<LabeledCaption> clean{{"c", "i", {mention("dog", ObjectLabel::correct)}},
                                      {"d", "j", {}}};
    m = chair_metrics(clean);
    CHECK(*m.instance == 0.0);
    CHECK(m.sentence == 0.0);
    CHECK(m.captions_without_mentions == 1);

    std::vector<LabeledCaption> empty{{"c", "i", {}}};
    CHECK_FALSE(chair_metrics(empty).instance.has_value());
}

TEST_CASE("CHAIR matches brute-force counting on a hand corpus and its properties hold") {
    // 10 captions; h = hallucinated, c = correct.
    const std::vector<std::string> pattern{"ch", "cc", "h", "", "ccc", "hh", "chc", "c", "hcc", "cch"};
    std::vector<LabeledCaption> corpus;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
        LabeledCaption c{"c" + std::to_string(i), "i" + std::to_string(i), {}};
        for (char k : pattern[i]) {
            c.mentions.push_back(mention("obj", k == 'h' ? ObjectLabel::hallucinated : ObjectLabel::correct));
        }
        corpus.push_back(c);
    }
    // Brute force: 7 h of 20 mentions; captions with an h: 0,2,5,6,8,9.
    auto m = chair_metrics(corpus);
    CHECK(*m.instance == 7.0 / 20.0);
    CHECK(m.sentence == 6.0 / 10.0);

    auto shuffled = corpus;
    std::mt19937_64 rng(1);
    std::ranges::shuffle(shuffled, rng);
    CHECK(*chair_metrics(shuffled).instance == *m.instance);
    CHECK(chair_metrics(shuffled).sentence == m.sentence);

    for (std::size_t i = 0; i < corpus.size(); ++i) {
        auto more = corpus;
        more[i].mentions.push_back(mention("obj", ObjectLabel::hallucinated));
        const auto m2 = chair_metrics(more);
        CHECK(*m2.instance >= *m.instance);
        CHECK(m2.sentence >= m.sentence);
    }
}

TEST_CASE("object F1 by set arithmetic") {
    GroundTruth gt;
    gt.objects["i"] = {"dog"};
    std::vector<LabeledCaption> c{{"c", "i", {mention("dog", ObjectLabel::correct),
                                              mention("cat", ObjectLabel::hallucinated)}}};
    auto f = object_f1(c, gt);
    CHECK(f.precision == 0.5);
    CHECK(f.recall == 1.0);
    CHECK(f.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    gt.objects["i"] = {"dog", "cat"};
    f = object_f1(c, gt);
    CHECK(f.precision == 1.0);
    CHECK(f.recall == 1.0);
    CHECK(f.f1 == 1.0);
}

TEST_CASE("object F1 matches a set-intersection oracle on 10 random images") {
    const std::vector<std::string> cats{"dog", "cat", "car", "bus", "cup", "bed", "tv", "kite"};
    std::mt19937_64 rng(9);
    std::bernoulli_distribution coin(0.4);
    GroundTruth gt;
    std::vector<LabeledCaption> corpus;
    std::size_t hits = 0, predicted = 0, truth = 0;
    double p_sum = 0, r_sum = 0;
    int p_n = 0, r_n = 0;
    for (int i = 0; i < 10; ++i) {
        const std::string img = "img" + std::to_string(i);
        std::set<std::string> g, p;
        for (const auto& c : cats) {
            if (coin(rng)) g.insert(c);
            if (coin(rng)) p.insert(c);
        }
        gt.objects[img] = g;
        LabeledCaption lc{"c" + std::to_string(i), img, {}};
        for (const auto& c : p) lc.mentions.push_back(mention(c, ObjectLabel::correct));
        corpus.push_back(lc);
        std::vector<std::string> inter;
        std::ranges::set_intersection(g, p, std::back_inserter(inter));
        hits += inter.size();
        predicted += p.size();
        truth += g.size();
        if (!p.empty()) p_sum += double(inter.size()) / double(p.size()), ++p_n;
        if (!g.empty()) r_sum += double(inter.size()) / double(g.size()), ++r_n;
    }
    const auto micro = object_f1(corpus, gt, F1Averaging::micro);
    CHECK(micro.precision == double(hits) / double(predicted));
    CHECK(micro.recall == double(hits) / double(truth));
    const auto macro = object_f1(corpus, gt, F1Averaging::macro);
    CHECK(macro.precision == doctest::Approx(p_sum / p_n).epsilon(1e-15));
    CHECK(macro.recall == doctest::Approx(r_sum / r_n).epsilon(1e-15));
}

TEST_CASE("repetition counts form a contiguous prefix per category") {
    const std::vector<std::string> words{"dog", "cat", "a", "the", "car", "and", "dogs", "table"};
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    for (int trial = 0; trial < 200; ++trial) {
        std::string text;
        for (int i = 0; i < 15; ++i) text += (i ? " " : "") + words[pick(rng)];
        const auto r = extract_object_mentions(text, one_token_per_word(text), vocab());
        std::map<std::string, int> last;
        for (const auto& m : r.mentions) {
            CHECK(m.repetition == last[m.category] + 1);
            CHECK(m.first_occurrence == (m.repetition == 1));
            last[m.category] = m.repetition;
        }
    }
}

TEST_CASE("synonym and plural tables parse from text and reject duplicates") {
    std::istringstream ok("# comment\nman\tperson\npuppy\tdog\n");
    const auto t = SynonymTable::parse(ok);
    CHECK(t.lookup("man") == std::optional<std::string>("person"));
    CHECK(t.size() == 2);
    std::istringstream bad("man\tperson\nman\tdog\n");
    CHECK_THROWS(SynonymTable::parse(bad));
}
