#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/features.hpp"

namespace haloprobe {

/// Partition of the external-feature space used for balancing.
struct BinConfig {
    int position_width = 10;
    int max_len = kDefaultMaxLen;

    bool operator==(const BinConfig&) const = default;
};

/// (position bin, repetition clipped to 1..4, first occurrence).
struct BinKey {
    int position_bin = 0;
    int repetition = 1;
    bool first_occurrence = true;

    auto operator<=>(const BinKey&) const = default;
};

BinKey bin_of(const RowInfo& info, const BinConfig& bins);
std::string to_string(const BinKey& key);

struct BinCounts {
    std::size_t correct = 0;
    std::size_t hallucinated = 0;
};

struct BalanceReport {
    std::map<BinKey, BinCounts> before;
    std::map<BinKey, BinCounts> after;
    std::vector<BinKey> dropped;
    std::size_t dropped_rows = 0;
    std::size_t input_rows = 0;
    std::size_t output_rows = 0;
};

nlohmann::json to_json(const BalanceReport& report);

struct BalanceResult {
    Dataset dataset;
    BalanceReport report;
};

/// Upsamples the minority class with replacement inside every bin until
/// both classes have equal counts. Bins holding a single class are dropped
/// and listed in the report. The result is shuffled with `seed`.
BalanceResult balance(const Dataset& dataset, const BinConfig& bins, std::uint64_t seed);

/// Rows where position alone points the wrong way: hallucinated mentions
/// before `early_end` and correct mentions at or after `late_begin`.
std::vector<std::size_t> minority_group_rows(const Dataset& dataset, int early_end,
                                             int late_begin);

struct MinorityGroups {
    int early_end = 0;   // hallucinated rows have position < early_end
    int late_begin = 0;  // correct rows have position >= late_begin
    std::vector<std::size_t> hallucinated;
    std::vector<std::size_t> correct;
};

/// Tail groups: hallucinated mentions below the `tail` quantile of the
/// hallucinated position distribution, correct mentions above the
/// 1 - `tail` quantile of the correct one. The larger group is subsampled
/// (seeded) to the size of the smaller, so a constant predictor scores
/// exactly 0.5.
MinorityGroups minority_groups(const Dataset& dataset, double tail, std::uint64_t seed);

/// Mean of the per-group accuracies of `p_correct >= threshold`.
double minority_accuracy(const MinorityGroups& groups, std::span<const double> p_correct,
                         double threshold = 0.5);

}  // namespace haloprobe
