#include "haloprobe/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

double clamp_probability(double p) noexcept {
    return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
}

double sigmoid(double z) noexcept {
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Spec

std::size_t MlpSpec::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
        n += sizes[k] * sizes[k + 1] + sizes[k + 1];
    }
    return n;
}

void MlpSpec::check() const {
    if (sizes.size() < 2) {
        fail(ErrorKind::config, "an MLP needs at least an input and an output layer");
    }
    if (sizes.back() != 1) {
        fail(ErrorKind::config, "the MLP output must be a single unit");
    }
    for (auto s : sizes) {
        if (s == 0) fail(ErrorKind::config, "MLP layer widths must be positive");
    }
}

PriorArch parse_prior_arch(const std::string& text) {
    if (text == "linear") return PriorArch::linear;
    if (text == "mlp16") return PriorArch::mlp16;
    fail(ErrorKind::config, "unknown prior_arch '" + text + "' (expected linear or mlp16)");
}

const char* to_string(PriorArch arch) noexcept {
    return arch == PriorArch::linear ? "linear" : "mlp16";
}

MlpSpec balanced_spec(std::size_t input_size, std::size_t hidden) {
    return {{input_size, hidden, 1}};
}

MlpSpec prior_spec(PriorArch arch) {
    if (arch == PriorArch::linear) {
        return {{FeatureLayout::prior_size(), 1}};
    }
    return {{FeatureLayout::prior_size(), 16, 1}};
}

// ---------------------------------------------------------------------------
// Network

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.check();
    params_.assign(spec_.parameter_count(), 0.0);
}

Mlp Mlp::initialize(const MlpSpec& spec, std::uint64_t seed) {
    Mlp m(spec);
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < m.layers(); ++k) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.sizes[k]));
        std::uniform_real_distribution<double> u(-bound, bound);
        const std::size_t begin = m.weight_offset(k);
        const std::size_t count = spec.sizes[k] * spec.sizes[k + 1];
        for (std::size_t i = 0; i < count; ++i) {
            m.params_[begin + i] = u(rng);
        }
    }
    return m;
}

Mlp Mlp::constant(const MlpSpec& spec, double p) {
    Mlp m(spec);
    const double q = std::clamp(p, 1e-9, 1.0 - 1e-9);
    m.params_.back() = std::log(q / (1.0 - q));
    return m;
}

std::size_t Mlp::weight_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < layer; ++k) {
        off += spec_.sizes[k] * spec_.sizes[k + 1] + spec_.sizes[k + 1];
    }
    return off;
}

std::size_t Mlp::bias_offset(std::size_t layer) const {
    return weight_offset(layer) + spec_.sizes[layer] * spec_.sizes[layer + 1];
}

std::vector<bool> Mlp::weight_mask() const {
    std::vector<bool> mask(params_.size(), false);
    for (std::size_t k = 0; k < layers(); ++k) {
        const std::size_t begin = weight_offset(k);
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(begin),
                    spec_.sizes[k] * spec_.sizes[k + 1], true);
    }
    return mask;
}

namespace {

void check_input(std::span<const double> x, std::size_t expected) {
    if (x.size() != expected) {
        fail(ErrorKind::validation, "input has " + std::to_string(x.size()) +
                                        " features, the model expects " +
                                        std::to_string(expected));
    }
    for (double v : x) {
        if (!std::isfinite(v)) fail(ErrorKind::validation, "non-finite model input");
    }
}

// Forward pass over a contiguous batch; acts[k] holds layer k's output
// (acts[0] is the input itself, the last entry the output logits).
void forward_batch(const Mlp& m, std::span<const double> x, std::size_t n,
                   std::vector<std::vector<double>>& acts, kernels::Backend backend) {
    const auto& sizes = m.spec().sizes;
    const auto& p = m.parameters();
    acts.resize(m.layers() + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t k = 0; k < m.layers(); ++k) {
        const std::size_t in = sizes[k];
        const std::size_t out = sizes[k + 1];
        acts[k + 1].assign(n * out, 0.0);
        kernels::dense_forward(backend, acts[k], n, in,
                               std::span<const double>(p).subspan(m.weight_offset(k), in * out),
                               std::span<const double>(p).subspan(m.bias_offset(k), out), out,
                               acts[k + 1]);
        if (k + 1 < m.layers()) {
            kernels::relu_inplace(backend, acts[k + 1]);
        }
    }
}

}  // namespace

double Mlp::logit(std::span<const double> x) const {
    check_input(x, spec_.input_size());
    std::vector<std::vector<double>> acts;
    forward_batch(*this, x, 1, acts, kernels::Backend::serial);
    return acts.back()[0];
}

double Mlp::predict(std::span<const double> x) const {
    return clamp_probability(sigmoid(logit(x)));
}

std::vector<double> Mlp::predict(const Matrix& x, kernels::Backend backend) const {
    if (x.cols != spec_.input_size()) {
        fail(ErrorKind::validation, "input has " + std::to_string(x.cols) +
                                        " features, the model expects " +
                                        std::to_string(spec_.input_size()));
    }
    for (double v : x.data) {
        if (!std::isfinite(v)) fail(ErrorKind::validation, "non-finite model input");
    }
    std::vector<std::vector<double>> acts;
    forward_batch(*this, x.data, x.rows, acts, backend);
    std::vector<double> out(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
        out[r] = clamp_probability(sigmoid(acts.back()[r]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss and gradient

LossGradient loss_gradient(const Mlp& model, const Matrix& x, std::span<const int> y,
                           std::span<const std::size_t> rows, double weight_decay,
                           kernels::Backend backend) {
    if (rows.empty()) {
        fail(ErrorKind::validation, "gradient of an empty batch");
    }
    const auto& sizes = model.spec().sizes;
    if (x.cols != sizes.front()) {
        fail(ErrorKind::validation, "batch width does not match the model input");
    }
    const std::size_t n = rows.size();
    std::vector<double> batch(n * x.cols);
    for (std::size_t r = 0; r < n; ++r) {
        const auto src = x.row(rows[r]);
        std::copy(src.begin(), src.end(), batch.begin() + static_cast<std::ptrdiff_t>(r * x.cols));
    }
    std::vector<std::vector<double>> acts;
    forward_batch(model, batch, n, acts, backend);

    LossGradient out;
    out.gradient.assign(model.parameters().size(), 0.0);
    std::vector<double> delta(n);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double z = acts.back()[r];
        const double s = sigmoid(z);
        const double p = clamp_probability(s);
        const int label = y[rows[r]];
        loss -= label == 1 ? std::log(p) : std::log(1.0 - p);
        delta[r] = (s - static_cast<double>(label)) * inv_n;
    }
    out.data_loss = loss * inv_n;
    if (!std::isfinite(out.data_loss)) {
        fail(ErrorKind::divergence, "non-finite loss");
    }

    const auto& p = model.parameters();
    std::vector<double> dz = std::move(delta);
    for (std::size_t k = model.layers(); k-- > 0;) {
        const std::size_t in = sizes[k];
        const std::size_t o = sizes[k + 1];
        auto dw = std::span<double>(out.gradient).subspan(model.weight_offset(k), in * o);
        auto db = std::span<double>(out.gradient).subspan(model.bias_offset(k), o);
        kernels::dense_backward_params(backend, acts[k], dz, n, in, o, dw, db);
        if (k == 0) break;
        std::vector<double> dx(n * in);
        kernels::dense_backward_input(backend, dz,
                                      std::span<const double>(p).subspan(model.weight_offset(k), in * o),
                                      n, in, o, dx);
        kernels::relu_backward(backend, acts[k], dx);
        dz = std::move(dx);
    }

    double penalty = 0.0;
    if (weight_decay != 0.0) {
        for (std::size_t k = 0; k < model.layers(); ++k) {
            const std::size_t begin = model.weight_offset(k);
            const std::size_t count = sizes[k] * sizes[k + 1];
            for (std::size_t i = begin; i < begin + count; ++i) {
                penalty += p[i] * p[i];
                out.gradient[i] += weight_decay * p[i];
            }
        }
    }
    out.loss = out.data_loss + 0.5 * weight_decay * penalty;
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and training

void TrainConfig::check() const {
    if (!(learning_rate > 0) || weight_decay < 0 || epochs < 1 || batch_size < 1 ||
        !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_epsilon > 0)) {
        fail(ErrorKind::config, "invalid training configuration");
    }
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},               {"batch_size", c.batch_size},
            {"beta1", c.beta1},                 {"beta2", c.beta2},
            {"adam_epsilon", c.adam_epsilon},   {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.seed = j.value("seed", c.seed);
    c.check();
    return c;
}

Adam::Adam(std::size_t size, const TrainConfig& config)
    : lr_(config.learning_rate),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_epsilon),
      m_(size, 0.0),
      v_(size, 0.0) {}

void Adam::step(std::vector<double>& params, std::span<const double> g) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
        params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

TrainResult train(const Matrix& x, std::span<const int> y, const MlpSpec& spec,
                  const TrainConfig& config, kernels::Backend backend) {
    config.check();
    spec.check();
    if (x.rows == 0 || y.size() != x.rows) {
        fail(ErrorKind::validation, "training needs a nonempty dataset with one label per row");
    }
    for (int label : y) {
        if (label != 0 && label != 1) fail(ErrorKind::validation, "training labels must be 0 or 1");
    }
    TrainResult result{Mlp::initialize(spec, config.seed), {}};
    Adam adam(result.model.parameters().size(), config);
    std::mt19937_64 rng(config.seed ^ 0x5DEECE66DULL);
    std::vector<std::size_t> order(x.rows);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(begin + config.batch_size, order.size());
            const auto rows = std::span<const std::size_t>(order).subspan(begin, end - begin);
            LossGradient lg;
            try {
                lg = loss_gradient(result.model, x, y, rows, config.weight_decay, backend);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::divergence) throw;
                fail(ErrorKind::divergence, "training diverged at step " +
                                                std::to_string(adam.steps() + 1) + " (epoch " +
                                                std::to_string(epoch) + ")");
            }
            loss_sum += lg.data_loss * static_cast<double>(rows.size());
            adam.step(result.model.parameters(), lg.gradient);
        }
        const auto pred = result.model.predict(x, backend);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            hits += (pred[i] >= 0.5) == (y[i] == 1);
        }
        EpochLog entry{epoch, loss_sum / static_cast<double>(x.rows),
                       static_cast<double>(hits) / static_cast<double>(x.rows)};
        spdlog::info("epoch {}/{} loss {:.6f} accuracy {:.4f}", epoch, config.epochs, entry.loss,
                     entry.accuracy);
        result.log.push_back(entry);
    }
    return result;
}

TrainResult train_prior(const Matrix& prior_x, std::span<const int> y, PriorArch arch,
                        const TrainConfig& config, kernels::Backend backend) {
    const auto spec = prior_spec(arch);
    if (prior_x.cols != spec.input_size()) {
        fail(ErrorKind::validation, "prior input must have 2 columns");
    }
    const auto positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    if (!y.empty() && (positives == 0 || positives == y.size())) {
        spdlog::warn("prior training set holds a single class; using a constant predictor");
        return {Mlp::constant(spec, positives == 0 ? 0.0 : 1.0), {}};
    }
    return train(prior_x, y, spec, config, backend);
}

// ---------------------------------------------------------------------------
// Hashing

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        fail(ErrorKind::io, "SHA-256 computation failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xF];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

std::string dataset_fingerprint(const Dataset& d) {
    std::vector<unsigned char> bytes;
    auto put = [&](const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    };
    put(d.balanced.data.data(), d.balanced.data.size() * sizeof(double));
    put(d.prior.data.data(), d.prior.data.size() * sizeof(double));
    for (int label : d.labels) {
        const auto b = static_cast<std::int8_t>(label);
        put(&b, 1);
    }
    return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_doubles(std::ostream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in, std::size_t n, const std::string& what) {
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) fail(ErrorKind::validation, "checkpoint truncated in " + what);
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DetectorCheckpoint& c) {
    nlohmann::json header{
        {"kind", "haloprobe-detector"},
        {"format_version", DetectorCheckpoint::kFormatVersion},
        {"L", c.layout.layers()},
        {"H", c.layout.heads()},
        {"max_len", c.max_len},
        {"balanced_sizes", c.balanced.spec().sizes},
        {"prior_sizes", c.prior.spec().sizes},
        {"prior_arch", to_string(c.prior_arch)},
        {"mask",
         {{"attention", c.mask.attention},
          {"logits", c.mask.logits},
          {"external", c.mask.external},
          {"seed", c.mask.seed}}},
        {"train", to_json(c.train)},
        {"bins", {{"position_width", c.bins.position_width}, {"max_len", c.bins.max_len}}},
        {"normalizer_size", c.normalizer.size()},
        {"prior_normalizer_size", c.prior_normalizer.size()},
        {"fingerprint", c.fingerprint}};
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write checkpoint " + path.string());
    out << header.dump() << '\n';
    write_doubles(out, c.balanced.parameters());
    write_doubles(out, c.prior.parameters());
    write_doubles(out, c.normalizer.mean());
    write_doubles(out, c.normalizer.stddev());
    write_doubles(out, c.prior_normalizer.mean());
    write_doubles(out, c.prior_normalizer.stddev());
    if (!out) fail(ErrorKind::io, "write failed on " + path.string());
}

DetectorCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
    std::string line;
    std::getline(in, line);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::validation, path.string() + ": bad checkpoint header: " + e.what());
    }
    if (h.value("kind", "") != "haloprobe-detector") {
        fail(ErrorKind::validation, path.string() + " is not a detector checkpoint");
    }
    if (h.value("format_version", 0) != DetectorCheckpoint::kFormatVersion) {
        fail(ErrorKind::validation, path.string() + ": unsupported checkpoint version");
    }
    try {
        DetectorCheckpoint c;
        c.layout = FeatureLayout(h.at("L").get<int>(), h.at("H").get<int>());
        c.max_len = h.at("max_len").get<int>();
        c.balanced = Mlp(MlpSpec{h.at("balanced_sizes").get<std::vector<std::size_t>>()});
        c.prior = Mlp(MlpSpec{h.at("prior_sizes").get<std::vector<std::size_t>>()});
        c.prior_arch = parse_prior_arch(h.at("prior_arch").get<std::string>());
        const auto& m = h.at("mask");
        c.mask = {m.at("attention").get<bool>(), m.at("logits").get<bool>(),
                  m.at("external").get<bool>(), m.at("seed").get<std::uint64_t>()};
        c.train = train_config_from_json(h.at("train"));
        c.bins = {h.at("bins").at("position_width").get<int>(),
                  h.at("bins").at("max_len").get<int>()};
        c.fingerprint = h.at("fingerprint").get<std::string>();
        const auto norm = h.at("normalizer_size").get<std::size_t>();
        const auto prior_norm = h.at("prior_normalizer_size").get<std::size_t>();
        if (c.balanced.spec().input_size() != c.layout.balanced_size()) {
            fail(ErrorKind::validation, "balanced estimator input does not match L x H");
        }
        c.balanced.parameters() = read_doubles(in, c.balanced.parameters().size(), "balanced");
        c.prior.parameters() = read_doubles(in, c.prior.parameters().size(), "prior");
        auto mean = read_doubles(in, norm, "normalizer");
        auto stddev = read_doubles(in, norm, "normalizer");
        c.normalizer = Normalizer(std::move(mean), std::move(stddev));
        auto prior_mean = read_doubles(in, prior_norm, "prior normalizer");
        auto prior_std = read_doubles(in, prior_norm, "prior normalizer");
        c.prior_normalizer = Normalizer(std::move(prior_mean), std::move(prior_std));
        if (in.peek() != std::char_traits<char>::eof()) {
            fail(ErrorKind::validation, path.string() + ": trailing bytes after checkpoint");
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::validation, path.string() + ": bad checkpoint header: " + e.what());
    }
}

}  // namespace haloprobe
