#pragma once

#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "haloprobe/mention.hpp"
#include "haloprobe/trace.hpp"

namespace haloprobe {

/// Half-open layer interval [begin, end).
struct LayerRange {
    int begin = 5;
    int end = 18;
};

LayerRange parse_layer_range(const std::string& text);  // "5:18"

enum class OccurrenceFilter { any, first, repeated };

OccurrenceFilter parse_occurrence_filter(const std::string& text);

/// Mean of attn_mean_cur over the selected layers and all heads.
double attention_value(const TokenTrace& token, const CorpusHeader& header, LayerRange layers);

struct AttentionSample {
    int token_index = 0;
    ObjectLabel label = ObjectLabel::correct;
    double value = 0.0;
};

/// Per-class statistics indexed by to_int(label): [0] hallucinated, [1] correct.
struct CurveBin {
    int position_bin = 0;
    std::array<std::size_t, 2> count{};
    std::array<double, 2> mean{};
};

struct ConditionalCurve {
    int position_width = 10;
    std::vector<CurveBin> bins;  // ascending; bins empty for both classes are omitted
    std::array<std::size_t, 2> total{};
    std::array<double, 2> marginal_mean{};

    /// sum_t p(t|y) E[A|y,t], recomputed from the bins.
    double reweighted_marginal(ObjectLabel label) const;
};

ConditionalCurve curve_from_samples(std::span<const AttentionSample> samples,
                                    int position_width = 10);

std::vector<AttentionSample> attention_samples(std::span<const CaptionTrace> corpus,
                                               const CorpusHeader& header, LayerRange layers,
                                               OccurrenceFilter occurrence = OccurrenceFilter::any);

ConditionalCurve attention_curve(std::span<const CaptionTrace> corpus, const CorpusHeader& header,
                                 LayerRange layers,
                                 OccurrenceFilter occurrence = OccurrenceFilter::any,
                                 int position_width = 10);

struct SimpsonResult {
    bool reversal = false;
    /// Unweighted share of two-class bins where hallucinated >= correct.
    double bins_halluc_ge_correct = 0.0;
    /// Marginal E[A|halluc] - E[A|correct].
    double marginal_gap = 0.0;
    /// Sum over bins of min(class counts) * sign(bin gap).
    double weighted_bin_sign = 0.0;
    std::size_t compared_bins = 0;
};

/// Reversal when the marginal gap's sign contradicts the majority sign of
/// the per-bin gaps, bins weighted by their smaller class count.
SimpsonResult simpson_check(const ConditionalCurve& curve);

struct ClassConditionalDists {
    int position_width = 10;
    std::array<std::size_t, 2> counts{};
    std::array<std::map<int, double>, 2> position;          // p(t bin | y)
    std::array<std::array<double, 4>, 2> repetition{};      // p(r | y), r clipped to 1..4
    std::array<std::map<int, double>, 2> first_occurrence;  // p(o = first | y, t bin)
    std::map<int, double> correct_rate;                     // p(y = 1 | t bin)
};

ClassConditionalDists class_conditional_dists(std::span<const ObjectMention> mentions,
                                              int position_width = 10);

/// Labeled mentions of every caption, in corpus order.
std::vector<ObjectMention> labeled_mentions(std::span<const CaptionTrace> corpus);

struct DegenerationMetrics {
    std::optional<double> redundancy;  // RE-n
    std::optional<double> repetition;  // Rep-n
    std::optional<double> distinct;    // Distinct-n
    std::size_t longest_repeated_span = 0;
    std::size_t length = 0;
    std::size_t vocab_size = 0;
};

DegenerationMetrics degeneration_metrics(std::span<const std::string> tokens, int n);
std::size_t longest_repeated_span(std::span<const std::string> tokens);

/// Plot-ready tables.
void write_curve_csv(std::ostream& out, const ConditionalCurve& curve, const std::string& series);
void write_dists_csv(std::ostream& out, const ClassConditionalDists& dists);

}  // namespace haloprobe
