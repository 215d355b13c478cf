#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/features.hpp"
#include "haloprobe/mlp.hpp"

namespace haloprobe {

/// p(y=1 | x_i, x_e) = f g / (f g + (1 - f)(1 - g)), where f is the
/// balanced estimate and g the prior. Inputs outside [0,1] throw; inputs
/// are clamped to [1e-7, 1 - 1e-7] first.
double combine(double f, double g);

/// f / (1 - f) after clamping.
double likelihood_ratio(double f);

/// Same posterior through the likelihood ratio: LR g / (LR g + 1 - g).
double combine_via_ratio(double f, double g);

inline constexpr double kDefaultThreshold = 0.5;

struct TokenScore {
    std::string caption_id;
    std::string category;
    int token_index = 0;
    double f = 0.5;
    double g = 0.5;
    double p_correct = 0.5;
    double p_halluc = 0.5;
    ObjectLabel predicted = ObjectLabel::correct;
    std::optional<ObjectLabel> label;
};

TokenScore make_score(const RowInfo& info, double f, double g, double threshold,
                      std::optional<ObjectLabel> label = std::nullopt);

nlohmann::json to_json(const TokenScore& score);
TokenScore token_score_from_json(const nlohmann::json& j);
void write_scores(const std::filesystem::path& path, std::span<const TokenScore> scores);
std::vector<TokenScore> read_scores(const std::filesystem::path& path);

/// Anything that can score the object mentions of one caption.
class MentionScorer {
public:
    virtual ~MentionScorer() = default;
    virtual std::vector<TokenScore> score(const CaptionTrace& caption, const CorpusHeader& header,
                                          std::span<const ObjectMention> mentions) const = 0;
    virtual double threshold() const noexcept { return kDefaultThreshold; }
};

/// Trained f and g with their feature pipeline.
class Detector : public MentionScorer {
public:
    explicit Detector(DetectorCheckpoint checkpoint, double threshold = kDefaultThreshold);

    std::vector<TokenScore> score(const CaptionTrace& caption, const CorpusHeader& header,
                                  std::span<const ObjectMention> mentions) const override;
    double threshold() const noexcept override { return threshold_; }

    /// Scores rows of an unnormalized dataset (as built by `assemble`).
    std::vector<TokenScore> score_dataset(const Dataset& raw) const;

    const DetectorCheckpoint& checkpoint() const noexcept { return checkpoint_; }

private:
    DetectorCheckpoint checkpoint_;
    double threshold_;
};

/// Scores every mention of every caption.
std::vector<TokenScore> score_tokens(std::span<const CaptionTrace> captions,
                                     const CorpusHeader& header, const MentionScorer& scorer);

}  // namespace haloprobe
