#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <random>

#include "haloprobe/error.hpp"
#include "haloprobe/features.hpp"
#include "haloprobe/synth.hpp"
#include "haloprobe/trace.hpp"
#include "test_util.hpp"

using namespace haloprobe;
using testutil::toy_caption;
using testutil::toy_header;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::config;
}

}  // namespace

TEST_CASE("header with L=H=32 carries 4 x 32 x 32 attention entries per token") {
    const auto h = toy_header(32, 32);
    const auto c = toy_caption(h, "c0", "img0", {"a", "dog"});
    validate(c, h);
    const auto& t = c.tokens[0];
    CHECK(t.attn_mean_cur.size() + t.attn_mean_next.size() + t.attn_entropy_cur.size() +
              t.attn_entropy_next.size() ==
          4 * 32 * 32);
    CHECK(FeatureLayout(32, 32).balanced_size() == 4102);
}

TEST_CASE("entropy bounds follow ln k") {
    const auto h = toy_header();
    CHECK(h.max_attention_entropy() == doctest::Approx(std::log(20.0)).epsilon(1e-15));
    auto c = toy_caption(h, "c0", "img0", {"a", "dog"});
    c.tokens[1].attn_entropy_cur[0] = std::log(20.0) + 0.1;
    CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    c.tokens[1].attn_entropy_cur[0] = std::log(20.0);
    CHECK_NOTHROW(validate(c, h));
}

TEST_CASE("non-finite and out-of-range values are rejected") {
    const auto h = toy_header();
    auto base = toy_caption(h, "c0", "img0", {"a", "dog"});
    {
        auto c = base;
        c.tokens[0].attn_mean_cur[1] = std::numeric_limits<double>::quiet_NaN();
        CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    }
    {
        auto c = base;
        c.tokens[0].max_softmax = 0.0;
        CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    }
    {
        auto c = base;
        c.tokens[0].attn_mean_next.pop_back();
        CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    }
    {
        auto c = base;
        c.tokens[1].token_index = 5;
        CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    }
    {
        auto c = base;
        c.caption_text = "a cat";
        CHECK(kind_of([&] { validate(c, h); }) == ErrorKind::validation);
    }
}

TEST_CASE("caption reconstruction ignores whitespace and the word marker") {
    CHECK(reconstructs_caption({"A", " dog", "."}, "A dog."));
    CHECK(reconstructs_caption({"\xE2\x96\x81" "A", "\xE2\x96\x81" "dog"}, "A dog"));
    CHECK_FALSE(reconstructs_caption({"A", " cat"}, "A dog"));
}

TEST_CASE("serialize then parse reproduces random captions bit-exactly") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto h = toy_header(3, 2);
    for (int trial = 0; trial < 50; ++trial) {
        auto c = toy_caption(h, "cap-" + std::to_string(trial), "img", {"two", "dogs", "on", "grass"});
        for (auto& t : c.tokens) {
            for (auto& v : t.attn_mean_cur) v = u(rng);
            for (auto& v : t.attn_entropy_next) v = u(rng) * h.max_attention_entropy();
            t.max_logit = (u(rng) - 0.5) * 1e6;
            t.max_softmax = std::nextafter(u(rng), 1.0);
        }
        ObjectMention m;
        m.category = "dog";
        m.surface = "dogs";
        m.token_index = 1;
        m.char_begin = 4;
        m.char_end = 8;
        m.label = trial % 2 ? ObjectLabel::correct : ObjectLabel::hallucinated;
        c.mentions.push_back(m);
        validate(c, h);
        CHECK(parse_caption(serialize_caption(c)) == c);
    }
    CHECK(parse_header(serialize_header(h)) == h);
}

TEST_CASE("trace files stream record by record with located errors") {
    testutil::TempDir dir("trace");
    const auto h = toy_header();
    TraceCorpus corpus{h, {}};
    for (int i = 0; i < 1000; ++i) {
        corpus.captions.push_back(toy_caption(h, "c" + std::to_string(i), "img", {"a", "cat"}));
    }
    write_traces(dir / "t.jsonl", corpus);

    TraceReader reader(dir / "t.jsonl");
    std::size_t n = 0;
    while (auto c = reader.next()) {
        CHECK(*c == corpus.captions[n]);
        ++n;
    }
    CHECK(n == 1000);
    CHECK(read_traces(dir / "t.jsonl").captions == corpus.captions);

    SUBCASE("empty body yields an empty stream") {
        write_traces(dir / "empty.jsonl", {h, {}});
        TraceReader r(dir / "empty.jsonl");
        CHECK_FALSE(r.next().has_value());
    }
    SUBCASE("a bad record reports its line") {
        {
            std::ofstream out(dir / "bad.jsonl");
            out << serialize_header(h) << '\n'
                << serialize_caption(corpus.captions[0]) << '\n'
                << "{\"caption_id\": 7}\n";
        }
        TraceReader r(dir / "bad.jsonl");
        CHECK(r.next().has_value());
        try {
            r.next();
            FAIL("expected a validation error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::validation);
            CHECK(std::string(e.what()).find(":3:") != std::string::npos);
        }
    }
    SUBCASE("duplicate caption ids are rejected") {
        TraceCorpus dup{h, {corpus.captions[0], corpus.captions[0]}};
        write_traces(dir / "dup.jsonl", dup);
        CHECK(kind_of([&] { read_traces(dir / "dup.jsonl"); }) == ErrorKind::validation);
    }
}

TEST_CASE("synthetic corpus round-trips through a trace file") {
    testutil::TempDir dir("synth-trace");
    const auto corpus = generate(GeneratorSpec::confounded(), 300, 5);
    write_traces(dir / "s.jsonl", corpus.traces);
    const auto back = read_traces(dir / "s.jsonl");
    CHECK(back.header == corpus.traces.header);
    CHECK(back.captions == corpus.traces.captions);

    save_ground_truth(dir / "gt.json", corpus.truth);
    CHECK(load_ground_truth(dir / "gt.json").objects == corpus.truth.objects);
}

TEST_CASE("error kinds map onto exit codes") {
    CHECK(exit_code(ErrorKind::config) == 2);
    CHECK(exit_code(ErrorKind::validation) == 3);
    CHECK(exit_code(ErrorKind::io) == 3);
    CHECK(exit_code(ErrorKind::divergence) == 4);
    CHECK(exit_code(ErrorKind::protocol) == 5);
}
