#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haloprobe/mention.hpp"
#include "haloprobe/trace.hpp"

namespace haloprobe {

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    void append_row(std::span<const double> values);

    bool operator==(const Matrix&) const = default;
};

/// Column layout of the balanced-estimator input:
///   [first_occurrence, repetition_clipped,
///    attn_mean_cur(L*H), attn_mean_next(L*H),
///    attn_entropy_cur(L*H), attn_entropy_next(L*H),
///    logit_entropy, max_logit, max_softmax, norm_position]
/// Attention blocks are layer-major: (l, h) -> l * H + h.
class FeatureLayout {
public:
    enum class Block { attn_mean_cur = 0, attn_mean_next = 1, attn_entropy_cur = 2, attn_entropy_next = 3 };

    FeatureLayout() = default;
    FeatureLayout(int layers, int heads);

    int layers() const noexcept { return layers_; }
    int heads() const noexcept { return heads_; }
    std::size_t matrix_size() const noexcept;
    std::size_t balanced_size() const noexcept { return 4 * matrix_size() + 6; }
    std::size_t internal_size() const noexcept { return 4 * matrix_size() + 3; }
    static constexpr std::size_t prior_size() noexcept { return 2; }

    static constexpr std::size_t first_occurrence() noexcept { return 0; }
    static constexpr std::size_t repetition() noexcept { return 1; }
    std::size_t attention(Block block, int layer, int head) const;
    std::size_t block_begin(Block block) const noexcept;
    std::size_t logit_entropy() const noexcept { return 2 + 4 * matrix_size(); }
    std::size_t max_logit() const noexcept { return logit_entropy() + 1; }
    std::size_t max_softmax() const noexcept { return logit_entropy() + 2; }
    std::size_t norm_position() const noexcept { return logit_entropy() + 3; }

    /// Column names in order, e.g. "attn_mean_cur[3][7]".
    std::vector<std::string> names() const;
    std::size_t index_of(const std::string& name) const;

    bool operator==(const FeatureLayout&) const = default;

private:
    int layers_ = 0;
    int heads_ = 0;
};

inline constexpr int kDefaultMaxLen = 512;
inline constexpr int kMaxRepetitionFeature = 4;

struct ExternalFeatures {
    double first_occurrence = 0.0;
    double repetition_clipped = 1.0;
    double norm_position = 0.0;
};

/// (o, clip(r, 1, 4), t / max_len). Positions at or past max_len clamp to 1.
ExternalFeatures build_external(const ObjectMention& mention, int max_len = kDefaultMaxLen);

/// The four L x H attention blocks followed by the three logit features for
/// one token. The final token has no next step; its next-step blocks repeat
/// the current-step values.
std::vector<double> build_internal(const CaptionTrace& caption, const CorpusHeader& header,
                                   int token_index);

/// Per-row bookkeeping carried alongside the feature matrices.
struct RowInfo {
    std::string caption_id;
    std::string category;
    int token_index = 0;
    int repetition = 1;
    bool first_occurrence = true;

    bool operator==(const RowInfo&) const = default;
};

/// One row per object mention. `labels` hold 1 (correct), 0 (hallucinated)
/// or -1 (unknown, inference time).
struct Dataset {
    FeatureLayout layout;
    Matrix balanced;
    Matrix prior;
    std::vector<int> labels;
    std::vector<RowInfo> info;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }

    bool operator==(const Dataset&) const = default;
};

Dataset make_dataset(const FeatureLayout& layout);

/// Per-feature standardization fitted on a training matrix. Features whose
/// standard deviation is below 1e-8 pass through unchanged. A
/// default-constructed normalizer is the identity.
class Normalizer {
public:
    static constexpr double kMinStd = 1e-8;

    Normalizer() = default;
    Normalizer(std::vector<double> mean, std::vector<double> stddev);

    static Normalizer fit(const Matrix& x);

    void apply(std::span<double> row) const;
    void invert(std::span<double> row) const;
    void apply(Matrix& x) const;

    const std::vector<double>& mean() const noexcept { return mean_; }
    const std::vector<double>& stddev() const noexcept { return std_; }
    std::size_t size() const noexcept { return mean_.size(); }

    bool operator==(const Normalizer&) const = default;

private:
    std::vector<double> mean_;
    std::vector<double> std_;
};

/// Feature groups that can be replaced by standard-normal noise.
struct FeatureMask {
    bool attention = false;  // the four L x H blocks
    bool logits = false;     // logit entropy, max logit, max softmax
    bool external = false;   // o, r, t in both inputs
    std::uint64_t seed = 0;

    bool any() const noexcept { return attention || logits || external; }
    bool operator==(const FeatureMask&) const = default;
};

FeatureMask parse_feature_mask(const std::string& spec, std::uint64_t seed);
std::string to_string(const FeatureMask& mask);

/// Replaces masked columns with N(0,1) noise. The noise for row i depends
/// only on (mask.seed, row key), so regeneration reproduces it exactly.
void apply_mask(Dataset& dataset, const FeatureMask& mask);
void apply_mask(std::span<double> balanced_row, std::span<double> prior_row,
                const FeatureLayout& layout, const FeatureMask& mask, const RowInfo& info);

struct AssembleOptions {
    int max_len = kDefaultMaxLen;
};

/// Appends one row per mention of `caption`.
void append_caption(Dataset& dataset, const CaptionTrace& caption, const CorpusHeader& header,
                    std::span<const ObjectMention> mentions, const AssembleOptions& options = {});

/// Rows for every mention of every caption (using each caption's stored
/// mentions). The normalizer, when given, is applied to the balanced input only.
Dataset assemble(std::span<const CaptionTrace> captions, const CorpusHeader& header,
                 const std::optional<Normalizer>& normalizer = std::nullopt,
                 const AssembleOptions& options = {});

Dataset select_rows(const Dataset& dataset, std::span<const std::size_t> rows);

/// Binary dataset file plus a JSON sidecar `<path>.layout.json` that maps
/// feature names to column indices.
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace haloprobe
