#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "haloprobe/confounder.hpp"
#include "haloprobe/error.hpp"
#include "haloprobe/synth.hpp"
#include "test_util.hpp"

using namespace haloprobe;

namespace {

std::vector<AttentionSample> repeat(int t, ObjectLabel y, double v, int n) {
    return std::vector<AttentionSample>(static_cast<std::size_t>(n), AttentionSample{t, y, v});
}

std::vector<std::string> words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

}  // namespace

TEST_CASE("attention value averages the selected layers over all heads") {
    auto h = testutil::toy_header(4, 3);
    auto t = testutil::toy_token(h, 0, "a");
    std::fill(t.attn_mean_cur.begin(), t.attn_mean_cur.end(), 0.3);
    CHECK(attention_value(t, h, {0, 4}) == doctest::Approx(0.3).epsilon(1e-15));
    for (int l = 0; l < 4; ++l)
        for (int k = 0; k < 3; ++k) t.attn_mean_cur[static_cast<std::size_t>(l * 3 + k)] = l;
    CHECK(attention_value(t, h, {1, 3}) == 1.5);
    CHECK_THROWS_AS(attention_value(t, h, {0, 5}), Error);
    CHECK_THROWS_AS(attention_value(t, h, {2, 2}), Error);
    CHECK(parse_layer_range("5:18").begin == 5);
    CHECK(parse_layer_range("5:18").end == 18);
    CHECK_THROWS_AS(parse_layer_range("5-18"), Error);
}

TEST_CASE("a two-bin example reverses its class gap after marginalizing") {
    std::vector<AttentionSample> s;
    for (auto part : {repeat(0, ObjectLabel::correct, 0.9, 9), repeat(0, ObjectLabel::hallucinated, 1.0, 1),
                      repeat(10, ObjectLabel::correct, 0.1, 1), repeat(10, ObjectLabel::hallucinated, 0.2, 9)}) {
        s.insert(s.end(), part.begin(), part.end());
    }
    const auto curve = curve_from_samples(s, 10);
    REQUIRE(curve.bins.size() == 2);
    CHECK(curve.marginal_mean[1] == doctest::Approx(0.82).epsilon(1e-14));
    CHECK(curve.marginal_mean[0] == doctest::Approx(0.28).epsilon(1e-14));
    const auto r = simpson_check(curve);
    CHECK(r.reversal);
    CHECK(r.bins_halluc_ge_correct == 1.0);
    CHECK(r.marginal_gap < 0);
    CHECK(r.compared_bins == 2);
    for (auto y : {ObjectLabel::hallucinated, ObjectLabel::correct}) {
        CHECK(curve.reweighted_marginal(y) ==
              doctest::Approx(curve.marginal_mean[static_cast<std::size_t>(to_int(y))]).epsilon(1e-14));
    }
}

TEST_CASE("the confounded synthetic corpus shows the reversal and the unconfounded one does not") {
    const auto conf = generate(GeneratorSpec::confounded(), 6000, 21);
    const auto& h = conf.traces.header;
    const auto early = attention_curve(conf.traces.captions, h, {0, h.layers / 2});
    const auto r = simpson_check(early);
    CHECK(r.reversal);
    CHECK(r.bins_halluc_ge_correct > 0.5);

    const auto unconf = generate(GeneratorSpec::unconfounded(), 6000, 21);
    const auto ru = simpson_check(attention_curve(unconf.traces.captions, h, {0, h.layers / 2}));
    CHECK_FALSE(ru.reversal);
    CHECK(ru.marginal_gap > 0);

    SUBCASE("early layers decay with position, late layers stay flat") {
        const auto late = attention_curve(conf.traces.captions, h, {h.layers / 2, h.layers});
        auto pooled = [](const CurveBin& b) {
            return (b.mean[0] * b.count[0] + b.mean[1] * b.count[1]) / (b.count[0] + b.count[1]);
        };
        const auto& e0 = early.bins.front();
        const auto& e1 = early.bins.back();
        CHECK(pooled(e0) - pooled(e1) > 0.2);
        double lo = 1, hi = 0;
        for (const auto& b : late.bins) {
            if (b.count[0] + b.count[1] < 50) continue;
            lo = std::min(lo, pooled(b));
            hi = std::max(hi, pooled(b));
        }
        CHECK(hi - lo < 0.08);
    }
    SUBCASE("marginals are count-weighted bin means") {
        for (auto y : {ObjectLabel::hallucinated, ObjectLabel::correct}) {
            CHECK(early.reweighted_marginal(y) ==
                  doctest::Approx(early.marginal_mean[static_cast<std::size_t>(to_int(y))]).epsilon(1e-12));
        }
    }
}

TEST_CASE("class-conditional distributions sum to one and match the generator") {
    const auto spec = GeneratorSpec::confounded();
    const auto corpus = generate(spec, 20000, 8);
    const auto mentions = labeled_mentions(corpus.traces.captions);
    const auto d = class_conditional_dists(mentions);
    for (std::size_t y = 0; y < 2; ++y) {
        double pos = 0, rep = 0;
        for (const auto& kv : d.position[y]) pos += kv.second;
        for (double p : d.repetition[y]) rep += p;
        CHECK(pos == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(rep == doctest::Approx(1.0).epsilon(1e-12));

        // A group with R repeats contributes mentions r = 1..R, so
        // p(r = k | y) = P(R >= k | y) / E[R | y].
        const auto& pr = spec.repetition[y];
        const double mean_r = pr[0] + 2 * pr[1] + 3 * pr[2] + 4 * pr[3];
        double tail = 1.0;
        for (std::size_t k = 0; k < 4; ++k) {
            const double expect = tail / mean_r;
            tail -= pr[k];
            const double sigma = std::sqrt(expect * (1 - expect) / static_cast<double>(d.counts[y]));
            INFO("y=" << y << " r=" << k + 1);
            CHECK(std::abs(d.repetition[y][k] - expect) < 3 * sigma + 1e-12);
        }
        for (const auto& [bin, p] : d.first_occurrence[y]) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
    for (const auto& [bin, rate] : d.correct_rate) {
        CHECK(rate >= 0.0);
        CHECK(rate <= 1.0);
    }
}

TEST_CASE("degeneration metrics on a hand example") {
    const auto t = words("a b a b a");
    const auto m = degeneration_metrics(t, 2);
    CHECK(*m.redundancy == 0.5);
    CHECK(*m.repetition == 1.0);
    CHECK(*m.distinct == 0.5);
    CHECK(m.longest_repeated_span == 3);
    CHECK(m.vocab_size == 2);
    CHECK_FALSE(degeneration_metrics(words("a"), 2).redundancy.has_value());
    CHECK(longest_repeated_span(words("x y z")) == 0);
    CHECK(longest_repeated_span(words("the dog and the dog")) == 2);
}

TEST_CASE("degeneration metrics match brute force on random sequences") {
    std::mt19937_64 rng(14);
    std::uniform_int_distribution<int> sym(0, 3), len(2, 25), order(1, 3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> t(static_cast<std::size_t>(len(rng)));
        for (auto& w : t) w = std::string(1, static_cast<char>('a' + sym(rng)));
        const int n = order(rng);
        const auto m = degeneration_metrics(t, n);

        std::size_t best = 0;
        for (std::size_t i = 0; i < t.size(); ++i)
            for (std::size_t j = i + 1; j < t.size(); ++j) {
                std::size_t k = 0;
                while (j + k < t.size() && t[i + k] == t[j + k]) ++k;
                best = std::max(best, k);
            }
        CHECK(m.longest_repeated_span == best);

        if (t.size() < static_cast<std::size_t>(n)) continue;
        const std::size_t total = t.size() - static_cast<std::size_t>(n) + 1;
        std::size_t distinct = 0, in_repeated = 0;
        for (std::size_t i = 0; i < total; ++i) {
            auto same = [&](std::size_t a, std::size_t b) {
                for (int k = 0; k < n; ++k)
                    if (t[a + static_cast<std::size_t>(k)] != t[b + static_cast<std::size_t>(k)]) return false;
                return true;
            };
            bool seen = false, repeated = false;
            for (std::size_t j = 0; j < total; ++j) {
                if (j != i && same(i, j)) {
                    repeated = true;
                    if (j < i) seen = true;
                }
            }
            distinct += !seen;
            in_repeated += repeated;
        }
        CHECK(*m.distinct == doctest::Approx(double(distinct) / double(total)).epsilon(1e-14));
        CHECK(*m.repetition == doctest::Approx(double(in_repeated) / double(total)).epsilon(1e-14));
        CHECK(*m.redundancy + *m.distinct == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("plot tables have headers and one row per class and bin") {
    std::vector<AttentionSample> s = repeat(3, ObjectLabel::correct, 0.5, 2);
    s.push_back({25, ObjectLabel::hallucinated, 0.1});
    std::ostringstream out;
    write_curve_csv(out, curve_from_samples(s, 10), "early");
    CHECK(out.str() == "series,position_bin,t_begin,class,count,mean\n"
                       "early,0,0,correct,2,0.5\n"
                       "early,2,20,hallucinated,1,0.1\n"
                       "early,marginal,,hallucinated,1,0.1\n"
                       "early,marginal,,correct,2,0.5\n");
}
