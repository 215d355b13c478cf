#include "haloprobe/balance.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

BinKey bin_of(const RowInfo& info, const BinConfig& bins) {
    if (bins.position_width <= 0) {
        fail(ErrorKind::config, "position bin width must be positive");
    }
    const int t = std::clamp(info.token_index, 0, std::max(bins.max_len - 1, 0));
    return {t / bins.position_width, std::clamp(info.repetition, 1, kMaxRepetitionFeature),
            info.first_occurrence};
}

std::string to_string(const BinKey& key) {
    return "t" + std::to_string(key.position_bin) + "/r" + std::to_string(key.repetition) + "/o" +
           (key.first_occurrence ? "1" : "0");
}

nlohmann::json to_json(const BalanceReport& report) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& [key, before] : report.before) {
        nlohmann::json b{{"position_bin", key.position_bin},
                         {"repetition", key.repetition},
                         {"first_occurrence", key.first_occurrence},
                         {"before", {{"correct", before.correct}, {"hallucinated", before.hallucinated}}}};
        if (auto it = report.after.find(key); it != report.after.end()) {
            b["after"] = {{"correct", it->second.correct},
                          {"hallucinated", it->second.hallucinated}};
        } else {
            b["after"] = nullptr;
        }
        bins.push_back(std::move(b));
    }
    return {{"input_rows", report.input_rows},
            {"output_rows", report.output_rows},
            {"dropped_bins", report.dropped.size()},
            {"dropped_rows", report.dropped_rows},
            {"bins", std::move(bins)}};
}

BalanceResult balance(const Dataset& dataset, const BinConfig& bins, std::uint64_t seed) {
    if (dataset.empty()) {
        fail(ErrorKind::validation, "cannot balance an empty dataset");
    }
    std::map<BinKey, std::array<std::vector<std::size_t>, 2>> groups;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int y = dataset.labels[i];
        if (y != 0 && y != 1) {
            fail(ErrorKind::validation, "row " + std::to_string(i) + " has no label");
        }
        groups[bin_of(dataset.info[i], bins)][static_cast<std::size_t>(y)].push_back(i);
    }

    BalanceReport report;
    report.input_rows = dataset.size();
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> chosen;
    chosen.reserve(2 * dataset.size());
    for (const auto& [key, members] : groups) {
        const auto& halluc = members[0];
        const auto& correct = members[1];
        report.before[key] = {correct.size(), halluc.size()};
        if (halluc.empty() || correct.empty()) {
            report.dropped.push_back(key);
            report.dropped_rows += halluc.size() + correct.size();
            continue;
        }
        const bool halluc_minor = halluc.size() < correct.size();
        const auto& minor = halluc_minor ? halluc : correct;
        const auto& major = halluc_minor ? correct : halluc;
        chosen.insert(chosen.end(), major.begin(), major.end());
        chosen.insert(chosen.end(), minor.begin(), minor.end());
        std::uniform_int_distribution<std::size_t> pick(0, minor.size() - 1);
        for (std::size_t k = minor.size(); k < major.size(); ++k) {
            chosen.push_back(minor[pick(rng)]);
        }
        report.after[key] = {major.size(), major.size()};
    }
    if (chosen.empty()) {
        fail(ErrorKind::validation, "every balance bin holds a single class (" +
                                        std::to_string(groups.size()) +
                                        " bins); nothing to train on");
    }
    if (!report.dropped.empty()) {
        spdlog::warn("balance: dropped {} single-class bins ({} rows)", report.dropped.size(),
                     report.dropped_rows);
    }
    std::shuffle(chosen.begin(), chosen.end(), rng);
    report.output_rows = chosen.size();
    return {select_rows(dataset, chosen), std::move(report)};
}

std::vector<std::size_t> minority_group_rows(const Dataset& dataset, int early_end,
                                             int late_begin) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int t = dataset.info[i].token_index;
        if ((dataset.labels[i] == 0 && t < early_end) ||
            (dataset.labels[i] == 1 && t >= late_begin)) {
            rows.push_back(i);
        }
    }
    return rows;
}

namespace {

// Smallest position p with at least ceil(q * n) values <= p.
int position_quantile(std::vector<int> positions, double q) {
    std::ranges::sort(positions);
    const auto n = positions.size();
    auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    k = std::clamp<std::size_t>(k, 1, n);
    return positions[k - 1];
}

}  // namespace

MinorityGroups minority_groups(const Dataset& dataset, double tail, std::uint64_t seed) {
    if (!(tail > 0.0 && tail < 0.5)) {
        fail(ErrorKind::config, "minority tail must lie in (0, 0.5)");
    }
    std::vector<int> pos[2];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset.labels[i] < 0) fail(ErrorKind::validation, "minority groups need labels");
        pos[dataset.labels[i]].push_back(dataset.info[i].token_index);
    }
    if (pos[0].empty() || pos[1].empty()) {
        fail(ErrorKind::validation, "minority groups need both classes");
    }
    MinorityGroups g;
    g.early_end = position_quantile(pos[0], tail);
    g.late_begin = position_quantile(pos[1], 1.0 - tail);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int t = dataset.info[i].token_index;
        if (dataset.labels[i] == 0 && t < g.early_end) g.hallucinated.push_back(i);
        if (dataset.labels[i] == 1 && t >= g.late_begin) g.correct.push_back(i);
    }
    if (g.hallucinated.empty() || g.correct.empty()) {
        fail(ErrorKind::validation, "a minority group is empty; widen the tail");
    }
    std::mt19937_64 rng(seed);
    auto& larger = g.hallucinated.size() > g.correct.size() ? g.hallucinated : g.correct;
    const auto keep = std::min(g.hallucinated.size(), g.correct.size());
    std::ranges::shuffle(larger, rng);
    larger.resize(keep);
    std::ranges::sort(larger);
    return g;
}

double minority_accuracy(const MinorityGroups& groups, std::span<const double> p_correct,
                         double threshold) {
    auto accuracy = [&](const std::vector<std::size_t>& rows, bool correct) {
        std::size_t hits = 0;
        for (auto i : rows) {
            if (i >= p_correct.size()) fail(ErrorKind::validation, "score index out of range");
            hits += (p_correct[i] >= threshold) == correct;
        }
        return static_cast<double>(hits) / static_cast<double>(rows.size());
    };
    return 0.5 * (accuracy(groups.hallucinated, false) + accuracy(groups.correct, true));
}

}  // namespace haloprobe
