#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/labeler.hpp"
#include "haloprobe/protocol.hpp"
#include "haloprobe/trace.hpp"

namespace haloprobe {

/// Truncated normal on [lo, hi]; sigma == 0 is a point mass at mu.
struct Emission {
    double mu = 0.0;
    double sigma = 0.0;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    double log_density(double x) const;
    double sample(std::mt19937_64& rng) const;
};

/// Synthetic caption model. Each caption holds one object group per lane;
/// lane g owns the positions t = g (mod lanes). A group has a label y, a
/// repetition count R ~ p(R|y) and a first position t1 whose bin follows
/// p(bin|y) (uniform over the lane's slots inside the bin). Mention j of the
/// group sits at t1 + (j - 1) * repeat_gap. Attention, entropy and logit
/// features of each mention token are truncated normals whose means depend
/// on (y, t, o); the next-step blocks and the attention entropies carry no
/// class information.
///
/// Index 0 of every per-class array is hallucinated, index 1 correct.
struct GeneratorSpec {
    int layers = 4;
    int heads = 4;
    int top_k = 20;
    int top_m = 100;

    int lanes = 5;
    int position_width = 10;
    int repeat_gap = 20;
    double correct_rate = 0.75;                    // group-level p(y = 1)
    std::array<std::vector<double>, 2> position;   // p(first-position bin | y)
    std::array<std::array<double, 4>, 2> repetition{};  // p(R = 1..4 | y)

    double attn_base = 0.15;
    double attn_early_amp = 0.4;   // layers below L/2
    double attn_late_amp = 0.05;
    double attn_decay = 60.0;      // tokens
    double attn_first_lift = 0.04;
    double attn_halluc_shift = 0.02;
    double attn_separation = 1.4;  // Mahalanobis distance between class means
    double attn_sigma = 0.1;

    double entropy_mean = 2.2;
    double entropy_first_drop = 0.3;
    double entropy_sigma = 0.15;

    std::array<double, 2> logit_entropy_mean{1.5, 1.2};
    double logit_entropy_sigma = 0.4;
    std::array<double, 2> max_logit_mean{17.0, 18.0};
    double max_logit_sigma = 2.0;
    std::array<double, 2> max_softmax_mean{0.6, 0.7};
    double max_softmax_sigma = 0.12;

    int extra_truth_objects = 2;  // unmentioned categories added to each image's ground truth
    std::uint64_t seed = 0;

    /// Hallucinations skew late and rarely repeat; attention decays with t.
    static GeneratorSpec confounded();
    /// Same emissions with p(bin|y) and p(R|y) shared across classes.
    static GeneratorSpec unconfounded();
    /// Well separated classes for mitigation tests.
    static GeneratorSpec separated();
    /// Everything independent of y; labels are Bernoulli(rate).
    static GeneratorSpec independent(double rate);
    static GeneratorSpec named(const std::string& name);

    CorpusHeader header() const;
    int position_bins() const { return static_cast<int>(position[0].size()); }
    int max_position() const;
    /// Per-(layer, head) class offset magnitude derived from attn_separation.
    double attn_offset() const;
    void check() const;

    bool operator==(const GeneratorSpec&) const = default;
};

nlohmann::json to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const nlohmann::json& j);
/// A name (confounded, unconfounded, separated, default) or a JSON file.
GeneratorSpec load_generator_spec(const std::string& name_or_path);

/// Class-conditional emission parameters at one token.
Emission attention_emission(const GeneratorSpec& spec, int y, int token_index, bool first,
                            int layer, int head);
Emission filler_attention_emission(const GeneratorSpec& spec, int token_index, int layer);
Emission entropy_emission(const GeneratorSpec& spec, bool first);
Emission logit_entropy_emission(const GeneratorSpec& spec, int y);
Emission max_logit_emission(const GeneratorSpec& spec, int y);
Emission max_softmax_emission(const GeneratorSpec& spec, int y);

/// p(y = 1 | t, r) over the mention population.
double true_prior(const GeneratorSpec& spec, int token_index, int repetition);
/// log p(x_i | y = 1, t, r) - log p(x_i | y = 0, t, r) for the mention token.
double true_log_likelihood_ratio(const GeneratorSpec& spec, int token_index, int repetition,
                                 const TokenTrace& token);
/// Balanced-estimator target: p(x_i|y=1,x_e) / (p(x_i|y=1,x_e) + p(x_i|y=0,x_e)).
double true_balanced(const GeneratorSpec& spec, int token_index, int repetition,
                     const TokenTrace& token);
/// Exact p(y = 1 | x_i, x_e).
double true_posterior(const GeneratorSpec& spec, int token_index, int repetition,
                      const TokenTrace& token);

/// Word lists shared by the generator and the mock caption server.
const std::vector<std::string>& synth_object_words();
const std::vector<std::string>& synth_filler_words();
std::int64_t synth_token_id(const std::string& word);
const std::string& synth_token_text(std::int64_t id);

/// Draws one token trace for position `token_index`. `y` < 0 makes a
/// filler token.
TokenTrace sample_token(const GeneratorSpec& spec, std::mt19937_64& rng, int token_index,
                        const std::string& word, int y, bool first);

struct SynthCaption {
    CaptionTrace trace;                // mentions labeled
    std::set<std::string> truth;
    std::vector<double> posterior;     // per mention
    std::vector<double> prior;
    std::vector<double> balanced;
};

class SynthStream {
public:
    SynthStream(GeneratorSpec spec, std::uint64_t seed);

    SynthCaption next();
    const GeneratorSpec& spec() const noexcept { return spec_; }
    std::size_t produced() const noexcept { return produced_; }

private:
    GeneratorSpec spec_;
    std::mt19937_64 rng_;
    std::size_t produced_ = 0;
};

struct PosteriorRow {
    std::string caption_id;
    int token_index = 0;
    std::string category;
    int label = 0;
    double prior = 0.0;
    double balanced = 0.0;
    double posterior = 0.0;
};

struct SynthCorpus {
    TraceCorpus traces;
    GroundTruth truth;
    std::vector<PosteriorRow> posterior;
};

/// Whole captions until at least `min_mentions` mentions exist.
SynthCorpus generate(const GeneratorSpec& spec, std::size_t min_mentions, std::uint64_t seed);
SynthCorpus generate_captions(const GeneratorSpec& spec, std::size_t n_captions,
                              std::uint64_t seed);

void write_posterior_csv(std::ostream& out, const std::vector<PosteriorRow>& rows);

/// Mock caption server for one image. Each request yields candidates of
/// `max_new_tokens` tokens containing a few objects, some outside the
/// image's ground truth; traces come from the spec's emission model and the
/// caption ends once it reaches `target_length` tokens.
class ScriptedGenerator : public Generator {
public:
    struct Options {
        int target_length = 60;
        int max_objects_per_segment = 3;
        double halluc_rate = 0.35;
    };

    ScriptedGenerator(GeneratorSpec spec, std::set<std::string> truth, std::uint64_t seed,
                      Options options);
    ScriptedGenerator(GeneratorSpec spec, std::set<std::string> truth, std::uint64_t seed);

    const CorpusHeader& header() const override { return header_; }
    GenerationResponse generate(const GenerationRequest& request) override;

    const std::set<std::string>& truth() const noexcept { return truth_; }
    std::size_t requests() const noexcept { return requests_; }

    /// A random image: `n_truth` ground-truth categories.
    static std::set<std::string> random_truth(std::mt19937_64& rng, std::size_t n_truth);

private:
    GeneratorSpec spec_;
    CorpusHeader header_;
    std::set<std::string> truth_;
    std::uint64_t seed_;
    Options options_;
    std::size_t requests_ = 0;
};

}  // namespace haloprobe
