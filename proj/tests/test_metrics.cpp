#include <doctest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "haloprobe/error.hpp"
#include "haloprobe/metrics.hpp"

using namespace haloprobe;

namespace {

double mann_whitney(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            pairs += 1;
            wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    }
    return wins / pairs;
}

}  // namespace

TEST_CASE("AUROC equals the pairwise Mann-Whitney count on 100 random instances") {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<int> size(2, 60), level(0, 9);
    std::bernoulli_distribution coin(0.4);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(static_cast<std::size_t>(size(rng)));
        std::vector<int> y(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = level(rng) / 10.0;  // coarse levels force ties
            y[i] = coin(rng);
        }
        const auto a = auroc(s, y);
        const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
        CHECK(a.has_value() == both);
        if (!a) continue;
        CHECK(std::abs(*a - mann_whitney(s, y)) < 1e-9);

        // Strictly increasing transforms leave it unchanged.
        std::vector<double> t(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3 * s[i]) - 7;
        CHECK(std::abs(*auroc(t, y) - *a) < 1e-12);
        ++checked;
    }
    CHECK(checked > 90);
}

TEST_CASE("AUROC edge cases") {
    const std::vector<double> same{0.3, 0.3, 0.3, 0.3};
    CHECK(*auroc(same, std::vector<int>{1, 0, 1, 0}) == 0.5);
    CHECK_FALSE(auroc(same, std::vector<int>{1, 1, 1, 1}).has_value());
    CHECK(*auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}) == 1.0);
    CHECK(*auroc(std::vector<double>{0.9, 0.1}, std::vector<int>{0, 1}) == 0.0);
    CHECK_THROWS_AS(auroc(same, std::vector<int>{1, 0}), Error);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.1}, std::vector<int>{2}), Error);

    const auto m = binary_metrics(same, std::vector<int>{1, 1, 1, 1});
    CHECK_FALSE(m.auroc.has_value());
    CHECK_FALSE(m.auroc_note.empty());
    CHECK(to_json(m).at("auroc").is_null());
}

TEST_CASE("threshold metrics recount the confusion matrix") {
    const std::vector<double> s{0.9, 0.8, 0.6, 0.4, 0.3, 0.55, 0.1};
    const std::vector<int> y{1, 1, 0, 1, 0, 1, 0};
    const auto m = binary_metrics(s, y, 0.5);
    // predicted positive: 0.9, 0.8, 0.6, 0.55 -> tp 3, fp 1; fn 1 (0.4), tn 2.
    CHECK(m.accuracy == doctest::Approx(5.0 / 7.0).epsilon(1e-15));
    CHECK(m.precision == 0.75);
    CHECK(m.recall == 0.75);
    CHECK(m.f1 == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(binary_metrics(s, y, 0.0).recall == 1.0);
}

TEST_CASE("ROC and PR curves run from the strictest threshold to everything positive") {
    const std::vector<double> s{0.9, 0.8, 0.8, 0.3, 0.1};
    const std::vector<int> y{1, 0, 1, 1, 0};
    const auto roc = roc_curve(s, y);
    CHECK(roc.front().x == 0.0);
    CHECK(roc.front().y == 0.0);
    CHECK(roc.back().x == 1.0);
    CHECK(roc.back().y == 1.0);
    CHECK(roc.size() == 5);  // start plus four distinct scores
    for (std::size_t i = 1; i < roc.size(); ++i) {
        CHECK(roc[i].x >= roc[i - 1].x);
        CHECK(roc[i].y >= roc[i - 1].y);
    }
    const auto pr = pr_curve(s, y);
    CHECK(pr.front().y == 1.0);
    CHECK(pr.front().x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(pr.back().x == 1.0);
    CHECK(pr.back().y == doctest::Approx(3.0 / 5.0).epsilon(1e-15));
}

TEST_CASE("detection reports split by position and need labels") {
    std::vector<TokenScore> scores;
    for (int i = 0; i < 6; ++i) {
        scores.push_back(make_score({"c", "dog", i * 20, 1, true}, i % 2 ? 0.9 : 0.2, 0.5, 0.5,
                                    i % 2 ? ObjectLabel::correct : ObjectLabel::hallucinated));
    }
    const auto r = detection_report(scores, 0.5, 50);
    CHECK(*r.overall.auroc == 1.0);
    CHECK(r.overall.accuracy == 1.0);
    CHECK(r.by_position.size() == 3);
    CHECK(r.by_position[1].position_begin == 50);
    CHECK(to_json(r, true).contains("roc"));
    scores[0].label.reset();
    CHECK_THROWS_AS(detection_report(scores), Error);
}

TEST_CASE("caption metrics on a five-caption hand corpus") {
    const auto vocab = ObjectVocabulary::builtin();
    GroundTruth gt;
    gt.objects = {{"i1", {"dog", "person"}}, {"i2", {"cat"}}, {"i3", {"car", "bus"}},
                  {"i4", {"cup"}}, {"i5", {"bed"}}};
    const std::vector<std::pair<std::string, std::string>> base{
        {"i1", "A man walks a dog and a cat."},       // person c, dog c, cat h
        {"i2", "A cat on a couch."},                  // cat c, couch h
        {"i3", "Cars and a bus on the street."},      // car c, bus c
        {"i4", "A cup next to a laptop and a cup."},  // cup c, laptop h, cup c
        {"i5", "An empty room."}};                    // none
    const std::vector<std::pair<std::string, std::string>> fixed{
        {"i1", "A man walks a dog."}, {"i2", "A cat."}, {"i3", "Cars and a bus on the street."},
        {"i4", "A cup and a cup."},   {"i5", "A bed."}};
    auto label = [&](const auto& src) {
        std::vector<LabeledCaption> out;
        for (std::size_t k = 0; k < src.size(); ++k) {
            out.push_back(label_caption_text("c" + std::to_string(k), src[k].first, src[k].second, gt, vocab));
        }
        return out;
    };
    const auto b = label(base), m = label(fixed);
    const auto chair = chair_metrics(b);
    CHECK(chair.mentions == 10);
    CHECK(*chair.instance == doctest::Approx(3.0 / 10.0).epsilon(1e-15));
    CHECK(chair.sentence == doctest::Approx(3.0 / 5.0).epsilon(1e-15));

    // Micro F1 over category sets: baseline predicts 9 categories (6 right), truth has 7.
    const auto f1 = object_f1(b, gt);
    CHECK(f1.precision == doctest::Approx(6.0 / 9.0).epsilon(1e-15));
    CHECK(f1.recall == doctest::Approx(6.0 / 7.0).epsilon(1e-15));

    const auto rep = mitigation_report(b, m, gt);
    CHECK(*rep.baseline.chair.instance == *chair.instance);
    CHECK(*rep.mitigated.chair.instance == 0.0);
    CHECK(*rep.delta_instance == doctest::Approx(-3.0 / 10.0).epsilon(1e-15));
    CHECK(rep.delta_sentence == doctest::Approx(-3.0 / 5.0).epsilon(1e-15));
    // Mitigated: 7 predicted, all in the truth sets.
    CHECK(rep.mitigated.f1.precision == 1.0);
    CHECK(rep.mitigated.f1.recall == 1.0);
    CHECK(rep.delta_f1 > 0);

    const auto same = mitigation_report(b, b, gt);
    CHECK(*same.delta_instance == 0.0);
    CHECK(same.delta_sentence == 0.0);
    CHECK(same.delta_f1 == 0.0);
    CHECK(to_json(same).contains("baseline"));
}
