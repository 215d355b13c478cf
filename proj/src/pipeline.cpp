#include "haloprobe/pipeline.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

DetectorTrainResult train_detector(const Dataset& raw, const DetectorTrainOptions& options) {
    options.train.check();
    if (raw.empty()) fail(ErrorKind::validation, "training dataset is empty");
    if (std::ranges::any_of(raw.labels, [](int y) { return y < 0; })) {
        fail(ErrorKind::validation, "training dataset has unlabeled rows");
    }

    DetectorTrainResult result;
    auto& c = result.checkpoint;
    c.layout = raw.layout;
    c.max_len = options.max_len;
    c.prior_arch = options.prior_arch;
    c.mask = options.mask;
    c.train = options.train;
    c.bins = options.bins;
    c.fingerprint = dataset_fingerprint(raw);
    c.normalizer = Normalizer::fit(raw.balanced);
    c.prior_normalizer = Normalizer::fit(raw.prior);

    Dataset d = raw;
    c.normalizer.apply(d.balanced);
    c.prior_normalizer.apply(d.prior);
    apply_mask(d, options.mask);

    const auto spec = balanced_spec(raw.layout.balanced_size(), options.hidden);
    if (options.balance) {
        auto bal = balance(d, options.bins, options.train.seed);
        spdlog::info("balanced {} rows into {} ({} single-class bins dropped)",
                     bal.report.input_rows, bal.report.output_rows, bal.report.dropped.size());
        spdlog::info("training balanced estimator");
        auto f = train(bal.dataset.balanced, bal.dataset.labels, spec, options.train,
                       options.backend);
        c.balanced = std::move(f.model);
        result.balanced_log = std::move(f.log);
        result.balance = std::move(bal.report);
    } else {
        spdlog::info("training balanced estimator on unbalanced rows");
        auto f = train(d.balanced, d.labels, spec, options.train, options.backend);
        c.balanced = std::move(f.model);
        result.balanced_log = std::move(f.log);
    }

    spdlog::info("training prior");
    auto g = train_prior(d.prior, d.labels, options.prior_arch, options.train, options.backend);
    c.prior = std::move(g.model);
    result.prior_log = std::move(g.log);
    return result;
}

nlohmann::json to_json(const EpochLog& log) {
    return {{"epoch", log.epoch}, {"loss", log.loss}, {"accuracy", log.accuracy}};
}

}  // namespace haloprobe
