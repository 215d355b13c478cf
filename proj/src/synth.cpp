#include "haloprobe/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"
#include "haloprobe/mlp.hpp"

namespace haloprobe {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Weights already summing to one are kept as given so a spec survives a
// JSON round trip bit for bit.
template <typename Weights>
Weights normalized(Weights w) {
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    if (std::abs(s - 1.0) <= 1e-12) return w;
    for (auto& v : w) v /= s;
    return w;
}

template <typename Weights>
std::size_t draw(std::mt19937_64& rng, const Weights& w) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double x = u(rng);
    for (std::size_t i = 0; i < w.size(); ++i) {
        x -= w[i];
        if (x < 0) return i;
    }
    return w.size() - 1;
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= h >> 31;
    h *= 0xBF58476D1CE4E5B9ULL;
    return h ^ (h >> 29);
}

}  // namespace

// ---------------------------------------------------------------------------
// Emissions

double Emission::log_density(double x) const {
    if (x < lo || x > hi) return -std::numeric_limits<double>::infinity();
    if (sigma == 0.0) {
        return std::abs(x - mu) <= 1e-12 ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    const double z = (x - mu) / sigma;
    const double a = (lo - mu) / sigma;
    const double b = (hi - mu) / sigma;
    // Evaluate the mass on the side of the mean where the tails are accurate.
    const double mass = a > 0 ? normal_cdf(-a) - normal_cdf(-b) : normal_cdf(b) - normal_cdf(a);
    return -0.5 * z * z - kLogSqrt2Pi - std::log(sigma) - std::log(mass);
}

double Emission::sample(std::mt19937_64& rng) const {
    if (sigma == 0.0) return mu;
    std::normal_distribution<double> n(mu, sigma);
    for (int attempt = 0; attempt < 100000; ++attempt) {
        const double x = n(rng);
        if (x >= lo && x <= hi && !(lo == 0.0 && x == 0.0)) return x;
    }
    fail(ErrorKind::config, "emission interval holds almost no probability mass");
}

// ---------------------------------------------------------------------------
// Spec

GeneratorSpec GeneratorSpec::confounded() {
    GeneratorSpec s;
    std::vector<double> correct(16), halluc(16);
    for (int b = 0; b < 16; ++b) {
        correct[static_cast<std::size_t>(b)] = std::exp(-b / 4.0);
        halluc[static_cast<std::size_t>(b)] = std::exp(-(b - 8.0) * (b - 8.0) / 32.0);
    }
    s.position = {normalized(halluc), normalized(correct)};
    s.repetition = {normalized(std::array<double, 4>{0.85, 0.10, 0.04, 0.01}),
                    normalized(std::array<double, 4>{0.45, 0.30, 0.15, 0.10})};
    return s;
}

GeneratorSpec GeneratorSpec::unconfounded() {
    GeneratorSpec s = confounded();
    s.position[0] = s.position[1];
    s.repetition[0] = s.repetition[1];
    return s;
}

GeneratorSpec GeneratorSpec::separated() {
    GeneratorSpec s = confounded();
    s.attn_separation = 5.0;
    s.logit_entropy_mean = {2.0, 1.0};
    s.logit_entropy_sigma = 0.3;
    s.max_softmax_mean = {0.4, 0.8};
    s.max_softmax_sigma = 0.1;
    return s;
}

GeneratorSpec GeneratorSpec::independent(double rate) {
    GeneratorSpec s = unconfounded();
    s.correct_rate = rate;
    s.attn_halluc_shift = 0.0;
    s.attn_separation = 0.0;
    s.logit_entropy_mean = {1.2, 1.2};
    s.max_logit_mean = {18.0, 18.0};
    s.max_softmax_mean = {0.7, 0.7};
    return s;
}

GeneratorSpec GeneratorSpec::named(const std::string& name) {
    if (name == "default" || name == "confounded") return confounded();
    if (name == "unconfounded") return unconfounded();
    if (name == "separated") return separated();
    fail(ErrorKind::config, "unknown generator spec '" + name + "'");
}

CorpusHeader GeneratorSpec::header() const {
    CorpusHeader h;
    h.layers = layers;
    h.heads = heads;
    h.top_k = top_k;
    h.top_m = top_m;
    h.attention_convention = "synthetic";
    return h;
}

int GeneratorSpec::max_position() const {
    return position_bins() * position_width - 1 + 3 * repeat_gap;
}

double GeneratorSpec::attn_offset() const {
    const double lh = static_cast<double>(layers) * heads;
    const double d2 = attn_separation * attn_separation * attn_sigma * attn_sigma / lh -
                      attn_halluc_shift * attn_halluc_shift;
    return d2 > 0 ? std::sqrt(d2) : 0.0;
}

void GeneratorSpec::check() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) fail(ErrorKind::config, "generator spec: " + what);
    };
    require(layers >= 1 && heads >= 1 && top_k >= 1 && top_m >= 1, "L, H, k, m must be positive");
    require(lanes >= 1 && position_width >= lanes && position_width % lanes == 0,
            "position_width must be a positive multiple of lanes");
    require(repeat_gap > 0 && repeat_gap % position_width == 0,
            "repeat_gap must be a positive multiple of position_width");
    require(correct_rate >= 0 && correct_rate <= 1, "correct_rate must lie in [0, 1]");
    require(!position[0].empty() && position[0].size() == position[1].size(),
            "position distributions must be nonempty and of equal length");
    for (int y = 0; y < 2; ++y) {
        const auto& p = position[static_cast<std::size_t>(y)];
        const auto& r = repetition[static_cast<std::size_t>(y)];
        require(std::all_of(p.begin(), p.end(), [](double v) { return v >= 0; }) &&
                    std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-9,
                "position distribution does not sum to 1");
        require(std::all_of(r.begin(), r.end(), [](double v) { return v >= 0; }) &&
                    std::abs(r[0] + r[1] + r[2] + r[3] - 1.0) < 1e-9,
                "repetition distribution does not sum to 1");
    }
    require(attn_sigma >= 0 && entropy_sigma >= 0 && logit_entropy_sigma >= 0 &&
                max_logit_sigma >= 0 && max_softmax_sigma >= 0,
            "emission sigmas must be nonnegative");
    require(attn_decay > 0, "attn_decay must be positive");
    require(extra_truth_objects >= 0, "extra_truth_objects must be nonnegative");
    require(static_cast<std::size_t>(lanes + extra_truth_objects) < synth_object_words().size(),
            "not enough object words for lanes + extra_truth_objects");
}

nlohmann::json to_json(const GeneratorSpec& s) {
    return {{"L", s.layers},
            {"H", s.heads},
            {"k", s.top_k},
            {"m", s.top_m},
            {"lanes", s.lanes},
            {"position_width", s.position_width},
            {"repeat_gap", s.repeat_gap},
            {"correct_rate", s.correct_rate},
            {"position", {{"hallucinated", s.position[0]}, {"correct", s.position[1]}}},
            {"repetition", {{"hallucinated", s.repetition[0]}, {"correct", s.repetition[1]}}},
            {"attention",
             {{"base", s.attn_base},
              {"early_amp", s.attn_early_amp},
              {"late_amp", s.attn_late_amp},
              {"decay", s.attn_decay},
              {"first_lift", s.attn_first_lift},
              {"halluc_shift", s.attn_halluc_shift},
              {"separation", s.attn_separation},
              {"sigma", s.attn_sigma}}},
            {"entropy",
             {{"mean", s.entropy_mean},
              {"first_drop", s.entropy_first_drop},
              {"sigma", s.entropy_sigma}}},
            {"logits",
             {{"entropy_mean", s.logit_entropy_mean},
              {"entropy_sigma", s.logit_entropy_sigma},
              {"max_logit_mean", s.max_logit_mean},
              {"max_logit_sigma", s.max_logit_sigma},
              {"max_softmax_mean", s.max_softmax_mean},
              {"max_softmax_sigma", s.max_softmax_sigma}}},
            {"extra_truth_objects", s.extra_truth_objects},
            {"seed", s.seed}};
}

GeneratorSpec spec_from_json(const nlohmann::json& j) {
    GeneratorSpec s = GeneratorSpec::confounded();
    try {
        s.layers = j.value("L", s.layers);
        s.heads = j.value("H", s.heads);
        s.top_k = j.value("k", s.top_k);
        s.top_m = j.value("m", s.top_m);
        s.lanes = j.value("lanes", s.lanes);
        s.position_width = j.value("position_width", s.position_width);
        s.repeat_gap = j.value("repeat_gap", s.repeat_gap);
        s.correct_rate = j.value("correct_rate", s.correct_rate);
        if (j.contains("position")) {
            s.position[0] = normalized(j["position"].at("hallucinated").get<std::vector<double>>());
            s.position[1] = normalized(j["position"].at("correct").get<std::vector<double>>());
        }
        if (j.contains("repetition")) {
            s.repetition[0] = normalized(j["repetition"].at("hallucinated").get<std::array<double, 4>>());
            s.repetition[1] = normalized(j["repetition"].at("correct").get<std::array<double, 4>>());
        }
        if (j.contains("attention")) {
            const auto& a = j["attention"];
            s.attn_base = a.value("base", s.attn_base);
            s.attn_early_amp = a.value("early_amp", s.attn_early_amp);
            s.attn_late_amp = a.value("late_amp", s.attn_late_amp);
            s.attn_decay = a.value("decay", s.attn_decay);
            s.attn_first_lift = a.value("first_lift", s.attn_first_lift);
            s.attn_halluc_shift = a.value("halluc_shift", s.attn_halluc_shift);
            s.attn_separation = a.value("separation", s.attn_separation);
            s.attn_sigma = a.value("sigma", s.attn_sigma);
        }
        if (j.contains("entropy")) {
            const auto& e = j["entropy"];
            s.entropy_mean = e.value("mean", s.entropy_mean);
            s.entropy_first_drop = e.value("first_drop", s.entropy_first_drop);
            s.entropy_sigma = e.value("sigma", s.entropy_sigma);
        }
        if (j.contains("logits")) {
            const auto& l = j["logits"];
            s.logit_entropy_mean = l.value("entropy_mean", s.logit_entropy_mean);
            s.logit_entropy_sigma = l.value("entropy_sigma", s.logit_entropy_sigma);
            s.max_logit_mean = l.value("max_logit_mean", s.max_logit_mean);
            s.max_logit_sigma = l.value("max_logit_sigma", s.max_logit_sigma);
            s.max_softmax_mean = l.value("max_softmax_mean", s.max_softmax_mean);
            s.max_softmax_sigma = l.value("max_softmax_sigma", s.max_softmax_sigma);
        }
        s.extra_truth_objects = j.value("extra_truth_objects", s.extra_truth_objects);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::config, std::string("generator spec: ") + e.what());
    }
    s.check();
    return s;
}

GeneratorSpec load_generator_spec(const std::string& name_or_path) {
    if (!std::filesystem::exists(name_or_path)) {
        return GeneratorSpec::named(name_or_path);
    }
    std::ifstream in(name_or_path);
    try {
        return spec_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::config, name_or_path + ": " + e.what());
    }
}

Emission attention_emission(const GeneratorSpec& s, int y, int t, bool first, int layer,
                            int head) {
    const double amp = layer < s.layers / 2 || s.layers == 1 ? s.attn_early_amp : s.attn_late_amp;
    const double d = s.attn_offset();
    const double m = (layer + head) % 2;
    const double offset = y == 1 ? d * m : d * (1.0 - m) + s.attn_halluc_shift;
    return {s.attn_base + amp * std::exp(-t / s.attn_decay) + (first ? s.attn_first_lift : 0.0) +
                offset,
            s.attn_sigma, 0.0, 1.0};
}

Emission filler_attention_emission(const GeneratorSpec& s, int t, int layer) {
    const double amp = layer < s.layers / 2 || s.layers == 1 ? s.attn_early_amp : s.attn_late_amp;
    return {s.attn_base + amp * std::exp(-t / s.attn_decay), s.attn_sigma, 0.0, 1.0};
}

Emission entropy_emission(const GeneratorSpec& s, bool first) {
    return {s.entropy_mean - (first ? s.entropy_first_drop : 0.0), s.entropy_sigma, 0.0,
            std::log(static_cast<double>(s.top_k))};
}

Emission logit_entropy_emission(const GeneratorSpec& s, int y) {
    return {s.logit_entropy_mean[static_cast<std::size_t>(y)], s.logit_entropy_sigma, 0.0,
            std::log(static_cast<double>(s.top_m))};
}

Emission max_logit_emission(const GeneratorSpec& s, int y) {
    return {s.max_logit_mean[static_cast<std::size_t>(y)], s.max_logit_sigma};
}

Emission max_softmax_emission(const GeneratorSpec& s, int y) {
    return {s.max_softmax_mean[static_cast<std::size_t>(y)], s.max_softmax_sigma, 0.0, 1.0};
}

// ---------------------------------------------------------------------------
// Closed-form posterior

double true_prior(const GeneratorSpec& s, int t, int r) {
    if (r < 1 || r > 4 || t < 0) {
        fail(ErrorKind::validation, "(t, r) outside the generator support");
    }
    const int t1 = t - (r - 1) * s.repeat_gap;
    const int bin = t1 >= 0 ? t1 / s.position_width : -1;
    if (bin < 0 || bin >= s.position_bins()) {
        fail(ErrorKind::validation, "(t, r) outside the generator support");
    }
    std::array<double, 2> mass{};
    for (std::size_t y = 0; y < 2; ++y) {
        const auto& rep = s.repetition[y];
        double tail = 0.0;
        for (int j = r; j <= 4; ++j) tail += rep[static_cast<std::size_t>(j - 1)];
        const double base = y == 1 ? s.correct_rate : 1.0 - s.correct_rate;
        mass[y] = base * tail * s.position[y][static_cast<std::size_t>(bin)];
    }
    if (mass[0] + mass[1] <= 0) {
        fail(ErrorKind::validation, "(t, r) has zero probability under the generator");
    }
    return mass[1] / (mass[0] + mass[1]);
}

double true_log_likelihood_ratio(const GeneratorSpec& s, int t, int r, const TokenTrace& token) {
    const bool first = r == 1;
    double llr = 0.0;
    for (int l = 0; l < s.layers; ++l) {
        for (int h = 0; h < s.heads; ++h) {
            const double x = token.attn_mean_cur[static_cast<std::size_t>(l * s.heads + h)];
            llr += attention_emission(s, 1, t, first, l, h).log_density(x) -
                   attention_emission(s, 0, t, first, l, h).log_density(x);
        }
    }
    llr += logit_entropy_emission(s, 1).log_density(token.logit_entropy) -
           logit_entropy_emission(s, 0).log_density(token.logit_entropy);
    llr += max_logit_emission(s, 1).log_density(token.max_logit) -
           max_logit_emission(s, 0).log_density(token.max_logit);
    llr += max_softmax_emission(s, 1).log_density(token.max_softmax) -
           max_softmax_emission(s, 0).log_density(token.max_softmax);
    if (std::isnan(llr)) {
        fail(ErrorKind::validation, "token lies outside the support of both classes");
    }
    return llr;
}

double true_balanced(const GeneratorSpec& s, int t, int r, const TokenTrace& token) {
    return sigmoid(true_log_likelihood_ratio(s, t, r, token));
}

double true_posterior(const GeneratorSpec& s, int t, int r, const TokenTrace& token) {
    const double prior = true_prior(s, t, r);
    if (prior <= 0.0) return 0.0;
    if (prior >= 1.0) return 1.0;
    const double llr = true_log_likelihood_ratio(s, t, r, token);
    return sigmoid(llr + std::log(prior) - std::log1p(-prior));
}

// ---------------------------------------------------------------------------
// Vocabulary

const std::vector<std::string>& synth_object_words() {
    static const std::vector<std::string> words{
        "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
        "bench", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
        "giraffe", "backpack", "umbrella", "handbag", "suitcase", "frisbee", "kite", "skateboard",
        "surfboard", "bottle", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
        "sandwich", "broccoli", "carrot", "pizza", "donut", "cake", "chair", "couch", "bed",
        "toilet", "laptop", "keyboard", "microwave", "oven", "toaster", "sink", "refrigerator",
        "book", "clock", "vase", "toothbrush"};
    return words;
}

const std::vector<std::string>& synth_filler_words() {
    static const std::vector<std::string> words{
        "a", "the", "with", "and", "on", "in", "near", "of", "is", "there", "some", "next",
        "to", "two", "small", "large", "white", "black", "red", "sitting", "standing", "view",
        "scene", "at", "by", "its", "an", "under", "beside", "behind", "bright", "old"};
    return words;
}

namespace {

const std::vector<std::string>& synth_vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v{"."};
        for (const auto& w : synth_filler_words()) v.push_back(w);
        for (const auto& w : synth_object_words()) v.push_back(w);
        return v;
    }();
    return vocab;
}

std::string trim(const std::string& text) {
    const auto b = text.find_first_not_of(' ');
    return b == std::string::npos ? std::string() : text.substr(b);
}

}  // namespace

std::int64_t synth_token_id(const std::string& word) {
    static const std::unordered_map<std::string, std::int64_t> ids = [] {
        std::unordered_map<std::string, std::int64_t> m;
        const auto& v = synth_vocabulary();
        for (std::size_t i = 0; i < v.size(); ++i) m.emplace(v[i], static_cast<std::int64_t>(i));
        return m;
    }();
    const auto it = ids.find(trim(word));
    if (it == ids.end()) fail(ErrorKind::validation, "word '" + word + "' is not in the synthetic vocabulary");
    return it->second;
}

const std::string& synth_token_text(std::int64_t id) {
    const auto& v = synth_vocabulary();
    if (id < 0 || static_cast<std::size_t>(id) >= v.size()) {
        fail(ErrorKind::protocol, "token id " + std::to_string(id) + " is not in the synthetic vocabulary");
    }
    return v[static_cast<std::size_t>(id)];
}

TokenTrace sample_token(const GeneratorSpec& s, std::mt19937_64& rng, int t,
                        const std::string& text, int y, bool first) {
    TokenTrace tok;
    tok.token_index = t;
    tok.token_text = text;
    tok.token_id = synth_token_id(text);
    const std::size_t n = static_cast<std::size_t>(s.layers) * static_cast<std::size_t>(s.heads);
    tok.attn_mean_cur.resize(n);
    tok.attn_mean_next.resize(n);
    tok.attn_entropy_cur.resize(n);
    tok.attn_entropy_next.resize(n);
    const bool mention = y >= 0;
    const auto ent_cur = entropy_emission(s, mention && first);
    const auto ent_next = entropy_emission(s, false);
    for (int l = 0; l < s.layers; ++l) {
        const auto next = filler_attention_emission(s, t + 1, l);
        const auto filler = filler_attention_emission(s, t, l);
        for (int h = 0; h < s.heads; ++h) {
            const auto k = static_cast<std::size_t>(l * s.heads + h);
            tok.attn_mean_cur[k] =
                mention ? attention_emission(s, y, t, first, l, h).sample(rng) : filler.sample(rng);
            tok.attn_mean_next[k] = next.sample(rng);
            tok.attn_entropy_cur[k] = ent_cur.sample(rng);
            tok.attn_entropy_next[k] = ent_next.sample(rng);
        }
    }
    const int cls = mention ? y : 1;
    tok.logit_entropy = logit_entropy_emission(s, cls).sample(rng);
    tok.max_logit = max_logit_emission(s, cls).sample(rng);
    tok.max_softmax = max_softmax_emission(s, cls).sample(rng);
    return tok;
}

// ---------------------------------------------------------------------------
// Corpus generation

SynthStream::SynthStream(GeneratorSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), rng_(seed) {
    spec_.check();
}

SynthCaption SynthStream::next() {
    const auto& s = spec_;
    auto& rng = rng_;
    std::bernoulli_distribution is_correct(s.correct_rate);
    const int slots = s.position_width / s.lanes;
    std::uniform_int_distribution<int> slot(0, slots - 1);

    // Categories: correct groups first, then unmentioned truth, then hallucinations.
    auto pool = synth_object_words();
    std::shuffle(pool.begin(), pool.end(), rng);

    struct Group {
        int y;
        int count;
        int t1;
        std::string category;
    };
    std::vector<Group> groups;
    for (int g = 0; g < s.lanes; ++g) {
        Group grp;
        grp.y = is_correct(rng) ? 1 : 0;
        grp.count = static_cast<int>(draw(rng, s.repetition[static_cast<std::size_t>(grp.y)])) + 1;
        const int bin = static_cast<int>(draw(rng, s.position[static_cast<std::size_t>(grp.y)]));
        grp.t1 = bin * s.position_width + g + s.lanes * slot(rng);
        groups.push_back(grp);
    }
    SynthCaption out;
    std::size_t next_word = 0;
    for (auto& grp : groups) {
        if (grp.y == 1) grp.category = pool[next_word++];
    }
    for (int e = 0; e < s.extra_truth_objects; ++e) out.truth.insert(pool[next_word++]);
    for (auto& grp : groups) {
        if (grp.y == 1) {
            out.truth.insert(grp.category);
        } else {
            grp.category = pool[next_word++];
        }
    }

    struct Slot {
        int group;
        int repetition;
    };
    std::map<int, Slot> at;
    int last = 0;
    for (int g = 0; g < s.lanes; ++g) {
        for (int j = 1; j <= groups[static_cast<std::size_t>(g)].count; ++j) {
            const int t = groups[static_cast<std::size_t>(g)].t1 + (j - 1) * s.repeat_gap;
            at[t] = {g, j};
            last = std::max(last, t);
        }
    }
    const int length = last + 2;

    auto& c = out.trace;
    c.caption_id = "synth-" + std::to_string(produced_);
    c.image_id = "synth-img-" + std::to_string(produced_);
    ++produced_;
    c.decoding = {DecodingStrategy::nucleus, 1.0, kDefaultMaxLen};
    std::uniform_int_distribution<std::size_t> filler(0, synth_filler_words().size() - 1);
    std::size_t offset = 0;
    for (int t = 0; t < length; ++t) {
        const auto it = at.find(t);
        std::string word = t == length - 1 ? "."
                           : it != at.end()
                               ? groups[static_cast<std::size_t>(it->second.group)].category
                               : synth_filler_words()[filler(rng)];
        const std::string text = (t == 0 || word == ".") ? word : " " + word;
        const std::size_t begin = offset + text.size() - word.size();
        offset += text.size();
        c.caption_text += text;
        if (it == at.end()) {
            c.tokens.push_back(sample_token(s, rng, t, text, -1, false));
            continue;
        }
        const auto& grp = groups[static_cast<std::size_t>(it->second.group)];
        const int r = it->second.repetition;
        c.tokens.push_back(sample_token(s, rng, t, text, grp.y, r == 1));
        ObjectMention m;
        m.category = grp.category;
        m.surface = grp.category;
        m.token_index = t;
        m.char_begin = begin;
        m.char_end = begin + word.size();
        m.repetition = r;
        m.first_occurrence = r == 1;
        m.label = grp.y == 1 ? ObjectLabel::correct : ObjectLabel::hallucinated;
        c.mentions.push_back(m);
        out.prior.push_back(true_prior(s, t, r));
        out.balanced.push_back(true_balanced(s, t, r, c.tokens.back()));
        out.posterior.push_back(true_posterior(s, t, r, c.tokens.back()));
    }
    return out;
}

namespace {

void append(SynthCorpus& corpus, SynthCaption&& sc) {
    corpus.truth.objects[sc.trace.image_id] = sc.truth;
    for (std::size_t i = 0; i < sc.trace.mentions.size(); ++i) {
        const auto& m = sc.trace.mentions[i];
        corpus.posterior.push_back({sc.trace.caption_id, m.token_index, m.category,
                                    to_int(*m.label), sc.prior[i], sc.balanced[i],
                                    sc.posterior[i]});
    }
    corpus.traces.captions.push_back(std::move(sc.trace));
}

}  // namespace

SynthCorpus generate(const GeneratorSpec& spec, std::size_t min_mentions, std::uint64_t seed) {
    SynthStream stream(spec, seed);
    SynthCorpus corpus;
    corpus.traces.header = spec.header();
    while (corpus.posterior.size() < min_mentions) {
        append(corpus, stream.next());
    }
    return corpus;
}

SynthCorpus generate_captions(const GeneratorSpec& spec, std::size_t n_captions,
                              std::uint64_t seed) {
    SynthStream stream(spec, seed);
    SynthCorpus corpus;
    corpus.traces.header = spec.header();
    for (std::size_t i = 0; i < n_captions; ++i) append(corpus, stream.next());
    return corpus;
}

void write_posterior_csv(std::ostream& out, const std::vector<PosteriorRow>& rows) {
    out.precision(17);
    out << "caption_id,token_index,category,label,prior,balanced,posterior\n";
    for (const auto& r : rows) {
        out << r.caption_id << ',' << r.token_index << ',' << r.category << ',' << r.label << ','
            << r.prior << ',' << r.balanced << ',' << r.posterior << '\n';
    }
}

// ---------------------------------------------------------------------------
// Mock caption server

ScriptedGenerator::ScriptedGenerator(GeneratorSpec spec, std::set<std::string> truth,
                                     std::uint64_t seed)
    : ScriptedGenerator(std::move(spec), std::move(truth), seed, Options{}) {}

ScriptedGenerator::ScriptedGenerator(GeneratorSpec spec, std::set<std::string> truth,
                                     std::uint64_t seed, Options options)
    : spec_(std::move(spec)),
      header_(spec_.header()),
      truth_(std::move(truth)),
      seed_(seed),
      options_(options) {
    spec_.check();
    if (truth_.empty()) fail(ErrorKind::config, "mock generator needs ground-truth objects");
    if (options_.target_length < 2 || options_.max_objects_per_segment < 1) {
        fail(ErrorKind::config, "invalid mock generator options");
    }
}

std::set<std::string> ScriptedGenerator::random_truth(std::mt19937_64& rng, std::size_t n_truth) {
    auto pool = synth_object_words();
    std::shuffle(pool.begin(), pool.end(), rng);
    return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_truth)};
}

GenerationResponse ScriptedGenerator::generate(const GenerationRequest& request) {
    ++requests_;
    std::vector<std::string> prefix;
    std::map<std::string, int> seen;
    for (auto id : request.prefix_token_ids) {
        const auto& w = synth_token_text(id);
        prefix.push_back(w);
        if (std::find(synth_object_words().begin(), synth_object_words().end(), w) !=
            synth_object_words().end()) {
            seen[w] += 1;
        }
    }
    if (!prefix.empty() && prefix.back() == ".") {
        fail(ErrorKind::protocol, "prefix already ended");
    }
    const int start = static_cast<int>(prefix.size());
    const int remaining = options_.target_length - start;
    const int length = std::min(request.max_new_tokens, std::max(remaining, 1));
    const bool ends = length >= remaining;

    std::vector<std::string> absent;
    for (const auto& w : synth_object_words()) {
        if (!truth_.count(w)) absent.push_back(w);
    }
    const std::vector<std::string> present(truth_.begin(), truth_.end());

    std::uint64_t base = mix(seed_, std::hash<std::string>{}(request.session_id));
    base = mix(base, static_cast<std::uint64_t>(start));
    GenerationResponse response;
    for (int k = 0; k < request.n_candidates; ++k) {
        // Temperature zero is greedy: every candidate repeats the first.
        std::mt19937_64 rng(mix(base, request.temperature == 0.0 ? 0 : static_cast<std::uint64_t>(k)));
        const int body = ends ? length - 1 : length;
        std::vector<int> positions(static_cast<std::size_t>(std::max(body, 0)));
        std::iota(positions.begin(), positions.end(), start);
        std::shuffle(positions.begin(), positions.end(), rng);
        std::uniform_int_distribution<int> n_obj(0, std::min(options_.max_objects_per_segment, body));
        positions.resize(static_cast<std::size_t>(n_obj(rng)));
        std::set<int> object_at(positions.begin(), positions.end());
        std::bernoulli_distribution halluc(options_.halluc_rate);
        std::uniform_int_distribution<std::size_t> filler(0, synth_filler_words().size() - 1);
        std::uniform_real_distribution<double> logprob(0.05, 2.0);

        Candidate cand;
        cand.token_ids = request.prefix_token_ids;
        cand.token_texts.reserve(prefix.size() + static_cast<std::size_t>(length));
        for (std::size_t i = 0; i < prefix.size(); ++i) {
            cand.token_texts.push_back(i == 0 || prefix[i] == "." ? prefix[i] : " " + prefix[i]);
        }
        auto counts = seen;
        for (int t = start; t < start + length; ++t) {
            std::string word;
            int y = -1;
            if (ends && t == start + length - 1) {
                word = ".";
            } else if (object_at.count(t)) {
                const bool h = halluc(rng);
                const auto& from = h ? absent : present;
                std::uniform_int_distribution<std::size_t> pick(0, from.size() - 1);
                word = from[pick(rng)];
                y = h ? 0 : 1;
            } else {
                word = synth_filler_words()[filler(rng)];
            }
            const std::string text = (t == 0 || word == ".") ? word : " " + word;
            const int r = y >= 0 ? ++counts[word] : 0;
            cand.traces.push_back(sample_token(spec_, rng, t, text, y, r == 1));
            cand.token_ids.push_back(synth_token_id(word));
            cand.token_texts.push_back(text);
            cand.cumulative_logprob -= logprob(rng);
        }
        cand.ended = ends;
        response.candidates.push_back(std::move(cand));
    }
    return response;
}

}  // namespace haloprobe
