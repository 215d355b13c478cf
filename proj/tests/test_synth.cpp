#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "haloprobe/error.hpp"
#include "haloprobe/labeler.hpp"
#include "haloprobe/posterior.hpp"
#include "haloprobe/synth.hpp"

using namespace haloprobe;

namespace {

// Trapezoid rule over [lo, hi] of exp(log_density).
double integrate(const Emission& e, double lo, double hi, int steps = 20000) {
    const double h = (hi - lo) / steps;
    double s = 0;
    for (int i = 0; i <= steps; ++i) {
        const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
        s += w * std::exp(e.log_density(lo + i * h));
    }
    return s * h;
}

}  // namespace

TEST_CASE("truncated normal densities integrate to one") {
    const std::vector<Emission> cases{{0.5, 0.1, 0.0, 1.0},
                                      {0.05, 0.1, 0.0, 1.0},
                                      {2.0, 0.4, 0.0, std::log(20.0)},
                                      {0.95, 0.2, 0.0, 1.0},
                                      {17.0, 2.0, -1e9, 1e9}};
    for (const auto& e : cases) {
        const double lo = std::max(e.lo, e.mu - 12 * e.sigma);
        const double hi = std::min(e.hi, e.mu + 12 * e.sigma);
        CHECK(integrate(e, lo, hi) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(std::isinf(Emission{0.5, 0.1, 0.0, 1.0}.log_density(1.5)));

    std::mt19937_64 rng(2);
    const Emission e{0.05, 0.1, 0.0, 1.0};
    double mean = 0;
    for (int i = 0; i < 20000; ++i) {
        const double x = e.sample(rng);
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
        mean += x;
    }
    // First moment by quadrature.
    double m1 = 0;
    const int steps = 20000;
    for (int i = 0; i <= steps; ++i) {
        const double x = i / double(steps);
        m1 += ((i == 0 || i == steps) ? 0.5 : 1.0) * x * std::exp(e.log_density(x));
    }
    m1 /= steps;
    CHECK(std::abs(mean / 20000 - m1) < 0.003);
}

TEST_CASE("corpus rows carry the generator's own f, g and posterior") {
    const auto spec = GeneratorSpec::confounded();
    const auto corpus = generate(spec, 800, 12);
    std::size_t i = 0;
    for (const auto& c : corpus.traces.captions) {
        CHECK_NOTHROW(validate(c, corpus.traces.header));
        for (const auto& m : c.mentions) {
            const auto& row = corpus.posterior.at(i++);
            CHECK(row.caption_id == c.caption_id);
            CHECK(row.token_index == m.token_index);
            CHECK(row.label == to_int(*m.label));
            CHECK(std::abs(row.posterior - combine(row.balanced, row.prior)) < 1e-9);
        }
    }
    CHECK(i >= 800);
}

TEST_CASE("the labeler reproduces the generator's labels from text and ground truth") {
    const auto corpus = generate(GeneratorSpec::confounded(), 1500, 13);
    auto relabeled = corpus.traces.captions;
    for (auto& c : relabeled) c.mentions.clear();
    const auto unaligned = label_corpus(relabeled, corpus.truth, ObjectVocabulary::builtin());
    CHECK(unaligned == 0);
    CHECK(relabeled == corpus.traces.captions);
}

TEST_CASE("label rate of an independent spec") {
    const auto spec = GeneratorSpec::independent(0.8);
    const auto corpus = generate(spec, 20000, 3);
    std::size_t n = 0, correct = 0;
    for (const auto& row : corpus.posterior) {
        ++n;
        correct += row.label == 1;
        CHECK(row.prior == doctest::Approx(0.8).epsilon(1e-12));
        CHECK(row.balanced == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(row.posterior == doctest::Approx(0.8).epsilon(1e-12));
    }
    // Groups are Bernoulli(0.8) and every group repeats alike, but mentions
    // of one group share a label, so sigma uses the group count.
    const double rate = double(correct) / double(n);
    const double groups = double(n) / 1.9;
    CHECK(std::abs(rate - 0.8) < 3 * std::sqrt(0.16 / groups));
}

TEST_CASE("the empirical p(y | t, r) converges to the generator prior") {
    const auto spec = GeneratorSpec::confounded();
    const auto corpus = generate(spec, 60000, 5);
    std::map<std::pair<int, int>, std::pair<int, int>> hist;  // (bin, r) -> (correct, total)
    std::map<std::pair<int, int>, double> prior;
    for (const auto& c : corpus.traces.captions) {
        for (const auto& m : c.mentions) {
            const int t1 = m.token_index - (m.repetition - 1) * spec.repeat_gap;
            const std::pair<int, int> key{t1 / spec.position_width, m.repetition};
            auto& h = hist[key];
            h.first += *m.label == ObjectLabel::correct;
            h.second += 1;
            prior[key] = true_prior(spec, m.token_index, m.repetition);
        }
    }
    int compared = 0;
    for (const auto& [key, h] : hist) {
        if (h.second < 200) continue;
        const double p = prior[key];
        const double sigma = std::sqrt(p * (1 - p) / h.second);
        INFO("bin " << key.first << " r " << key.second << " n " << h.second);
        // Mentions of one group share a label; allow for that clustering.
        CHECK(std::abs(double(h.first) / h.second - p) < 4 * sigma + 0.01);
        ++compared;
    }
    CHECK(compared > 20);
}

TEST_CASE("a class-symmetric emission model gives f = 1/2 everywhere") {
    auto spec = GeneratorSpec::independent(0.6);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 100; t += 7) {
        for (int y : {0, 1}) {
            const auto tok = sample_token(spec, rng, t, " dog", y, true);
            CHECK(true_balanced(spec, t, 1, tok) == doctest::Approx(0.5).epsilon(1e-12));
            CHECK(true_posterior(spec, t, 1, tok) == doctest::Approx(0.6).epsilon(1e-12));
        }
    }
}

TEST_CASE("specs serialize, load by name and reject nonsense") {
    for (const std::string name : {"confounded", "unconfounded", "separated", "default"}) {
        const auto s = GeneratorSpec::named(name);
        CHECK(spec_from_json(to_json(s)) == s);
    }
    CHECK(GeneratorSpec::named("default") == GeneratorSpec::confounded());
    CHECK_THROWS_AS(GeneratorSpec::named("nope"), Error);
    auto bad = GeneratorSpec::confounded();
    bad.correct_rate = 1.5;
    CHECK_THROWS_AS(bad.check(), Error);
    CHECK_THROWS_AS(true_prior(GeneratorSpec::confounded(), 5, 3), Error);
}

TEST_CASE("generation is deterministic in the seed") {
    const auto a = generate(GeneratorSpec::confounded(), 200, 9);
    const auto b = generate(GeneratorSpec::confounded(), 200, 9);
    const auto c = generate(GeneratorSpec::confounded(), 200, 10);
    CHECK(a.traces.captions == b.traces.captions);
    CHECK_FALSE(a.traces.captions == c.traces.captions);
    CHECK(generate_captions(GeneratorSpec::confounded(), 7, 1).traces.captions.size() == 7);
}
