#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/balance.hpp"
#include "haloprobe/features.hpp"
#include "haloprobe/kernels.hpp"

namespace haloprobe {

inline constexpr double kProbEpsilon = 1e-7;

double clamp_probability(double p) noexcept;
double sigmoid(double z) noexcept;

/// Layer widths from input to the scalar output. Hidden layers use ReLU,
/// the output a logistic unit.
struct MlpSpec {
    std::vector<std::size_t> sizes;

    std::size_t input_size() const { return sizes.front(); }
    std::size_t parameter_count() const;
    void check() const;

    bool operator==(const MlpSpec&) const = default;
};

enum class PriorArch { linear, mlp16 };

PriorArch parse_prior_arch(const std::string& text);
const char* to_string(PriorArch arch) noexcept;

MlpSpec balanced_spec(std::size_t input_size, std::size_t hidden = 256);
MlpSpec prior_spec(PriorArch arch = PriorArch::mlp16);

/// Feed-forward network with parameters stored flat, layer by layer:
/// W_k (out x in, row-major) followed by b_k.
class Mlp {
public:
    Mlp() = default;
    explicit Mlp(MlpSpec spec);

    /// Uniform fan-in initialization U(-1/sqrt(in), 1/sqrt(in)), biases zero.
    static Mlp initialize(const MlpSpec& spec, std::uint64_t seed);
    /// Zero weights, output bias set to logit(p).
    static Mlp constant(const MlpSpec& spec, double p);

    const MlpSpec& spec() const noexcept { return spec_; }
    std::vector<double>& parameters() noexcept { return params_; }
    const std::vector<double>& parameters() const noexcept { return params_; }

    std::size_t weight_offset(std::size_t layer) const;
    std::size_t bias_offset(std::size_t layer) const;
    std::size_t layers() const noexcept { return spec_.sizes.size() - 1; }
    /// True for parameters that belong to a weight matrix (not a bias).
    std::vector<bool> weight_mask() const;

    double logit(std::span<const double> x) const;
    /// Output probability clamped to [1e-7, 1 - 1e-7].
    double predict(std::span<const double> x) const;
    std::vector<double> predict(const Matrix& x,
                                kernels::Backend backend = kernels::default_backend()) const;

    bool operator==(const Mlp&) const = default;

private:
    MlpSpec spec_;
    std::vector<double> params_;
};

struct LossGradient {
    double loss = 0.0;  // mean BCE plus 0.5 * weight_decay * |W|^2
    double data_loss = 0.0;
    std::vector<double> gradient;
};

/// Mean binary cross-entropy over `rows` of (x, y) and its gradient; weight
/// decay enters as an L2 penalty on weights only.
LossGradient loss_gradient(const Mlp& model, const Matrix& x, std::span<const int> y,
                           std::span<const std::size_t> rows, double weight_decay,
                           kernels::Backend backend = kernels::default_backend());

struct TrainConfig {
    double learning_rate = 1e-3;
    double weight_decay = 1e-3;
    int epochs = 10;
    std::size_t batch_size = 128;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 0;

    void check() const;
    bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

class Adam {
public:
    Adam(std::size_t size, const TrainConfig& config);

    void step(std::vector<double>& params, std::span<const double> gradient);
    std::size_t steps() const noexcept { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainResult {
    Mlp model;
    std::vector<EpochLog> log;
};

/// Adam over seeded per-epoch shuffles. Throws Error(divergence) naming the
/// step when the loss turns non-finite.
TrainResult train(const Matrix& x, std::span<const int> y, const MlpSpec& spec,
                  const TrainConfig& config,
                  kernels::Backend backend = kernels::default_backend());

/// Prior network over (repetition, normalized position). A single-class
/// label set yields a constant predictor.
TrainResult train_prior(const Matrix& prior_x, std::span<const int> y, PriorArch arch,
                        const TrainConfig& config,
                        kernels::Backend backend = kernels::default_backend());

/// Both estimators plus everything needed to rebuild their inputs.
struct DetectorCheckpoint {
    static constexpr int kFormatVersion = 1;

    FeatureLayout layout;
    int max_len = kDefaultMaxLen;
    Mlp balanced;
    Mlp prior;
    PriorArch prior_arch = PriorArch::mlp16;
    Normalizer normalizer;        // balanced input
    Normalizer prior_normalizer;  // prior input
    FeatureMask mask;
    TrainConfig train;
    BinConfig bins;
    std::string fingerprint;  // SHA-256 of the training rows

    bool operator==(const DetectorCheckpoint&) const = default;
};

/// Line 1: JSON header. Then raw little-endian doubles: balanced
/// parameters, prior parameters, normalizer mean and std, prior normalizer
/// mean and std.
void save_checkpoint(const std::filesystem::path& path, const DetectorCheckpoint& checkpoint);
DetectorCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Hex SHA-256 of the dataset's feature values, prior inputs and labels.
std::string dataset_fingerprint(const Dataset& dataset);
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace haloprobe
