#include <doctest.h>

#include <cmath>
#include <random>

#include "haloprobe/error.hpp"
#include "haloprobe/posterior.hpp"
#include "haloprobe/synth.hpp"
#include "test_util.hpp"

using namespace haloprobe;

TEST_CASE("combining the balanced estimate with the prior") {
    CHECK(combine(0.5, 0.5) == 0.5);
    CHECK(combine(0.8, 0.5) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(combine(0.5, 0.8) == doctest::Approx(0.8).epsilon(1e-15));
    // 0.18 / (0.18 + 0.08)
    CHECK(combine(0.9, 0.2) == doctest::Approx(0.18 / 0.26).epsilon(1e-15));
    CHECK(likelihood_ratio(0.5) == 1.0);
    CHECK(likelihood_ratio(0.75) == 3.0);
}

TEST_CASE("posterior properties over a grid") {
    for (int i = 1; i < 40; ++i) {
        const double f = i / 40.0;
        for (int j = 1; j < 40; ++j) {
            const double g = j / 40.0;
            const double p = combine(f, g);
            CHECK(p == doctest::Approx(combine(g, f)).epsilon(1e-14));
            CHECK(p == doctest::Approx(combine_via_ratio(f, g)).epsilon(1e-12));
            CHECK(1.0 - p == doctest::Approx(combine(1.0 - f, 1.0 - g)).epsilon(1e-12));
            CHECK(combine(f, 0.5) == doctest::Approx(f).epsilon(1e-14));
            if (i + 1 < 40) CHECK(combine((i + 1) / 40.0, g) > p);
            if (j + 1 < 40) CHECK(combine(f, (j + 1) / 40.0) > p);
        }
    }
}

TEST_CASE("the posterior is exact Bayes on a discrete joint") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    // joint[e][x][y], e = external context, x = internal feature.
    double joint[3][4][2];
    double total = 0;
    for (auto& e : joint)
        for (auto& x : e)
            for (auto& y : x) total += (y = u(rng));
    for (int e = 0; e < 3; ++e) {
        double pe[2] = {0, 0};
        for (int x = 0; x < 4; ++x)
            for (int y = 0; y < 2; ++y) pe[y] += joint[e][x][y] / total;
        const double g = pe[1] / (pe[0] + pe[1]);
        for (int x = 0; x < 4; ++x) {
            const double like1 = joint[e][x][1] / total / pe[1];
            const double like0 = joint[e][x][0] / total / pe[0];
            const double f = like1 / (like1 + like0);
            const double exact = joint[e][x][1] / (joint[e][x][0] + joint[e][x][1]);
            CHECK(std::abs(combine(f, g) - exact) < 1e-12);
        }
    }
}

TEST_CASE("out-of-range inputs are rejected and the edges are clamped") {
    CHECK_THROWS_AS(combine(1.2, 0.5), Error);
    CHECK_THROWS_AS(combine(0.5, -0.1), Error);
    CHECK_THROWS_AS(combine(std::nan(""), 0.5), Error);
    const double hi = combine(1.0, 1.0);
    CHECK(std::isfinite(hi));
    CHECK(hi < 1.0);
    CHECK(combine(0.0, 0.0) > 0.0);
    CHECK(std::isfinite(likelihood_ratio(1.0)));
}

TEST_CASE("thresholding and score files") {
    const RowInfo info{"cap", "dog", 7, 1, true};
    const auto low = make_score(info, 0.1, 0.1, 0.0);
    CHECK(low.predicted == ObjectLabel::correct);
    const auto mid = make_score(info, 0.9, 0.2, 0.5, ObjectLabel::hallucinated);
    CHECK(mid.p_correct == doctest::Approx(0.18 / 0.26).epsilon(1e-15));
    CHECK(mid.p_halluc == doctest::Approx(0.08 / 0.26).epsilon(1e-14));
    CHECK(mid.predicted == ObjectLabel::correct);
    CHECK(make_score(info, 0.9, 0.2, 0.7).predicted == ObjectLabel::hallucinated);

    testutil::TempDir dir("scores");
    const std::vector<TokenScore> scores{low, mid};
    write_scores(dir / "s.jsonl", scores);
    const auto back = read_scores(dir / "s.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[1].p_correct == mid.p_correct);
    CHECK(back[1].label == mid.label);
    CHECK_FALSE(back[0].label.has_value());
    CHECK(back[0].category == "dog");
}

TEST_CASE("the synthetic generator's posterior is the combination of its own f and g") {
    const auto spec = GeneratorSpec::confounded();
    const auto corpus = generate(spec, 500, 4);
    std::size_t i = 0;
    for (const auto& c : corpus.traces.captions) {
        for (const auto& m : c.mentions) {
            const auto& row = corpus.posterior.at(i++);
            const auto& tok = c.tokens[static_cast<std::size_t>(m.token_index)];
            const double f = true_balanced(spec, m.token_index, m.repetition, tok);
            const double g = true_prior(spec, m.token_index, m.repetition);
            CHECK(row.balanced == doctest::Approx(f).epsilon(1e-12));
            CHECK(row.prior == doctest::Approx(g).epsilon(1e-12));
            CHECK(std::abs(row.posterior - combine(f, g)) < 1e-9);
            CHECK(std::abs(true_posterior(spec, m.token_index, m.repetition, tok) - combine(f, g)) <
                  1e-9);
        }
    }
    CHECK(i == corpus.posterior.size());
}
