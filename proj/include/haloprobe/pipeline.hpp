#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/balance.hpp"
#include "haloprobe/features.hpp"
#include "haloprobe/kernels.hpp"
#include "haloprobe/mlp.hpp"

namespace haloprobe {

struct DetectorTrainOptions {
    TrainConfig train;
    PriorArch prior_arch = PriorArch::mlp16;
    BinConfig bins;
    FeatureMask mask;
    bool balance = true;  // false trains f on the raw (imbalanced) rows
    std::size_t hidden = 256;
    int max_len = kDefaultMaxLen;
    kernels::Backend backend = kernels::default_backend();
};

struct DetectorTrainResult {
    DetectorCheckpoint checkpoint;
    std::optional<BalanceReport> balance;
    std::vector<EpochLog> balanced_log;
    std::vector<EpochLog> prior_log;
};

/// Fits both normalizers on `raw`, masks, balances, then trains f on the
/// balanced rows and g on the original rows.
DetectorTrainResult train_detector(const Dataset& raw, const DetectorTrainOptions& options);

nlohmann::json to_json(const EpochLog& log);

}  // namespace haloprobe
