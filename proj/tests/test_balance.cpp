#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "haloprobe/balance.hpp"
#include "haloprobe/error.hpp"
#include "haloprobe/synth.hpp"

using namespace haloprobe;

namespace {

// Rows with only bookkeeping filled in; feature column 0 stores the row id.
Dataset rows(const std::vector<std::pair<int, int>>& pos_label, int repetition = 1) {
    Dataset d = make_dataset(FeatureLayout(1, 1));
    std::vector<double> b(d.layout.balanced_size(), 0.0);
    for (std::size_t i = 0; i < pos_label.size(); ++i) {
        b[0] = static_cast<double>(i);
        d.balanced.append_row(b);
        const double p[2] = {static_cast<double>(repetition), pos_label[i].first / 512.0};
        d.prior.append_row(p);
        d.labels.push_back(pos_label[i].second);
        d.info.push_back({"c" + std::to_string(i), "dog", pos_label[i].first, repetition,
                          repetition == 1});
    }
    return d;
}

std::map<BinKey, std::pair<int, int>> class_counts(const Dataset& d, const BinConfig& bins) {
    std::map<BinKey, std::pair<int, int>> out;
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto& c = out[bin_of(d.info[i], bins)];
        (d.labels[i] == 1 ? c.first : c.second)++;
    }
    return out;
}

}  // namespace

TEST_CASE("bins use position width, clipped repetition and first occurrence") {
    const BinConfig bins;
    RowInfo info{"c", "dog", 37, 7, false};
    const auto k = bin_of(info, bins);
    CHECK(k.position_bin == 3);
    CHECK(k.repetition == 4);
    CHECK_FALSE(k.first_occurrence);
    info.token_index = 4000;
    CHECK(bin_of(info, bins).position_bin == 51);
    CHECK(to_string(k) == "t3/r4/o0");
    CHECK_THROWS_AS(bin_of(info, BinConfig{0, 512}), Error);
}

TEST_CASE("a 9/1 bin becomes 9/9 and keeps every original row") {
    std::vector<std::pair<int, int>> pl(9, {3, 1});
    pl.push_back({5, 0});
    const auto d = rows(pl);
    const auto r = balance(d, {}, 1);
    CHECK(r.dataset.size() == 18);
    CHECK(std::ranges::count(r.dataset.labels, 1) == 9);
    CHECK(std::ranges::count(r.dataset.labels, 0) == 9);
    std::set<double> ids;
    for (std::size_t i = 0; i < r.dataset.size(); ++i) ids.insert(r.dataset.balanced.at(i, 0));
    CHECK(ids.size() == 10);
    CHECK(r.report.before.begin()->second.correct == 9);
    CHECK(r.report.after.begin()->second.hallucinated == 9);
}

TEST_CASE("single-class bins are dropped and an all-single-class input fails") {
    const auto d = rows({{1, 1}, {2, 0}, {25, 1}, {26, 1}});
    const auto r = balance(d, {}, 0);
    CHECK(r.dataset.size() == 2);
    CHECK(r.report.dropped.size() == 1);
    CHECK(r.report.dropped_rows == 2);

    const auto single = rows({{1, 1}, {25, 0}});
    try {
        balance(single, {}, 0);
        FAIL("expected a validation error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::validation);
    }
    CHECK_THROWS_AS(balance(rows({{1, -1}, {2, 0}}), {}, 0), Error);
}

TEST_CASE("balancing a synthetic corpus gives p(y=1|bin) = 1/2 in every bin") {
    const auto corpus = generate(GeneratorSpec::confounded(), 3000, 3);
    const auto d = assemble(corpus.traces.captions, corpus.traces.header);
    const BinConfig bins;
    const auto r = balance(d, bins, 9);
    std::size_t kept = 0;
    for (const auto& [key, c] : class_counts(r.dataset, bins)) {
        INFO(to_string(key));
        CHECK(c.first == c.second);
        kept += 2 * static_cast<std::size_t>(c.first);
    }
    CHECK(kept == r.dataset.size());
    CHECK(r.report.output_rows == r.dataset.size());

    SUBCASE("balancing is a fixpoint") {
        const auto again = balance(r.dataset, bins, 10);
        CHECK(again.dataset.size() == r.dataset.size());
        CHECK(again.report.dropped.empty());
    }
    SUBCASE("the same seed reproduces the same rows") {
        CHECK(balance(d, bins, 9).dataset == r.dataset);
        CHECK_FALSE(balance(d, bins, 8).dataset == r.dataset);
    }
    SUBCASE("no row of a two-class bin is lost") {
        std::set<std::pair<std::string, int>> in, out;
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (std::ranges::find(r.report.dropped, bin_of(d.info[i], bins)) ==
                r.report.dropped.end()) {
                in.insert({d.info[i].caption_id, d.info[i].token_index});
            }
        }
        for (const auto& info : r.dataset.info) out.insert({info.caption_id, info.token_index});
        CHECK(in == out);
    }
}

TEST_CASE("minority groups are equal-sized tails and a constant predictor scores 1/2") {
    const auto corpus = generate(GeneratorSpec::confounded(), 4000, 6);
    const auto d = assemble(corpus.traces.captions, corpus.traces.header);
    const auto g = minority_groups(d, 0.1, 11);
    CHECK(g.hallucinated.size() == g.correct.size());
    CHECK_FALSE(g.hallucinated.empty());
    for (auto i : g.hallucinated) {
        CHECK(d.labels[i] == 0);
        CHECK(d.info[i].token_index < g.early_end);
    }
    for (auto i : g.correct) {
        CHECK(d.labels[i] == 1);
        CHECK(d.info[i].token_index >= g.late_begin);
    }
    CHECK(std::ranges::is_sorted(g.hallucinated));

    const std::vector<double> all_correct(d.size(), 0.9), all_halluc(d.size(), 0.1);
    CHECK(minority_accuracy(g, all_correct) == 0.5);
    CHECK(minority_accuracy(g, all_halluc) == 0.5);
    std::vector<double> oracle(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) oracle[i] = d.labels[i];
    CHECK(minority_accuracy(g, oracle) == 1.0);

    CHECK(minority_groups(d, 0.1, 11).correct == g.correct);
    CHECK_THROWS_AS(minority_groups(d, 0.5, 1), Error);
    CHECK_THROWS_AS(minority_groups(d, 0.0, 1), Error);
}
