#include "haloprobe/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

namespace {

constexpr char kDatasetMagic[4] = {'H', 'P', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

const char* block_name(FeatureLayout::Block b) {
    switch (b) {
        case FeatureLayout::Block::attn_mean_cur: return "attn_mean_cur";
        case FeatureLayout::Block::attn_mean_next: return "attn_mean_next";
        case FeatureLayout::Block::attn_entropy_cur: return "attn_entropy_cur";
        case FeatureLayout::Block::attn_entropy_next: return "attn_entropy_next";
    }
    return "";
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t row_key(const RowInfo& info) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : info.caption_id) {
        h = (h ^ c) * 1099511628211ULL;
    }
    return splitmix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(info.token_index)));
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        fail(ErrorKind::validation, "truncated dataset file");
    }
    return v;
}

}  // namespace

void Matrix::append_row(std::span<const double> values) {
    if (rows == 0 && cols == 0) {
        cols = values.size();
    }
    if (values.size() != cols) {
        fail(ErrorKind::validation, "row width " + std::to_string(values.size()) +
                                        " does not match matrix width " + std::to_string(cols));
    }
    data.insert(data.end(), values.begin(), values.end());
    ++rows;
}

// ---------------------------------------------------------------------------
// Layout

FeatureLayout::FeatureLayout(int layers, int heads) : layers_(layers), heads_(heads) {
    if (layers < 1 || heads < 1) {
        fail(ErrorKind::config, "feature layout needs L >= 1 and H >= 1");
    }
}

std::size_t FeatureLayout::matrix_size() const noexcept {
    return static_cast<std::size_t>(layers_) * static_cast<std::size_t>(heads_);
}

std::size_t FeatureLayout::block_begin(Block block) const noexcept {
    return 2 + static_cast<std::size_t>(block) * matrix_size();
}

std::size_t FeatureLayout::attention(Block block, int layer, int head) const {
    if (layer < 0 || layer >= layers_ || head < 0 || head >= heads_) {
        fail(ErrorKind::config, "attention index out of range");
    }
    return block_begin(block) + static_cast<std::size_t>(layer) * heads_ + head;
}

std::vector<std::string> FeatureLayout::names() const {
    std::vector<std::string> out;
    out.reserve(balanced_size());
    out.emplace_back("first_occurrence");
    out.emplace_back("repetition_clipped");
    for (int b = 0; b < 4; ++b) {
        for (int l = 0; l < layers_; ++l) {
            for (int h = 0; h < heads_; ++h) {
                out.push_back(std::string(block_name(static_cast<Block>(b))) + "[" +
                              std::to_string(l) + "][" + std::to_string(h) + "]");
            }
        }
    }
    out.emplace_back("logit_entropy");
    out.emplace_back("max_logit");
    out.emplace_back("max_softmax");
    out.emplace_back("norm_position");
    return out;
}

std::size_t FeatureLayout::index_of(const std::string& name) const {
    const auto all = names();
    const auto it = std::find(all.begin(), all.end(), name);
    if (it == all.end()) {
        fail(ErrorKind::config, "unknown feature '" + name + "'");
    }
    return static_cast<std::size_t>(it - all.begin());
}

// ---------------------------------------------------------------------------
// Row construction

ExternalFeatures build_external(const ObjectMention& mention, int max_len) {
    if (max_len <= 0) {
        fail(ErrorKind::config, "max_len must be positive");
    }
    ExternalFeatures e;
    e.first_occurrence = mention.first_occurrence ? 1.0 : 0.0;
    e.repetition_clipped =
        static_cast<double>(std::clamp(mention.repetition, 1, kMaxRepetitionFeature));
    if (mention.token_index >= max_len) {
        spdlog::warn("token index {} >= max_len {}; normalized position clamped to 1",
                     mention.token_index, max_len);
        e.norm_position = 1.0;
    } else {
        e.norm_position = static_cast<double>(std::max(mention.token_index, 0)) /
                          static_cast<double>(max_len);
    }
    return e;
}

std::vector<double> build_internal(const CaptionTrace& caption, const CorpusHeader& header,
                                   int token_index) {
    if (token_index < 0 || token_index >= static_cast<int>(caption.tokens.size())) {
        fail(ErrorKind::validation, "caption " + caption.caption_id + ": no trace for token " +
                                        std::to_string(token_index));
    }
    const auto& t = caption.tokens[static_cast<std::size_t>(token_index)];
    const std::size_t n = header.matrix_size();
    const bool last = token_index + 1 == static_cast<int>(caption.tokens.size());
    const auto& mean_next = last ? t.attn_mean_cur : t.attn_mean_next;
    const auto& entropy_next = last ? t.attn_entropy_cur : t.attn_entropy_next;
    for (const auto* m : {&t.attn_mean_cur, &mean_next, &t.attn_entropy_cur, &entropy_next}) {
        if (m->size() != n) {
            fail(ErrorKind::validation, "caption " + caption.caption_id + ": token " +
                                            std::to_string(token_index) +
                                            " attention shape does not match header L x H");
        }
    }
    std::vector<double> out;
    out.reserve(4 * n + 3);
    out.insert(out.end(), t.attn_mean_cur.begin(), t.attn_mean_cur.end());
    out.insert(out.end(), mean_next.begin(), mean_next.end());
    out.insert(out.end(), t.attn_entropy_cur.begin(), t.attn_entropy_cur.end());
    out.insert(out.end(), entropy_next.begin(), entropy_next.end());
    out.push_back(t.logit_entropy);
    out.push_back(t.max_logit);
    out.push_back(t.max_softmax);
    return out;
}

Dataset make_dataset(const FeatureLayout& layout) {
    Dataset d;
    d.layout = layout;
    d.balanced.cols = layout.balanced_size();
    d.prior.cols = FeatureLayout::prior_size();
    return d;
}

void append_caption(Dataset& dataset, const CaptionTrace& caption, const CorpusHeader& header,
                    std::span<const ObjectMention> mentions, const AssembleOptions& options) {
    if (dataset.layout.layers() != header.layers || dataset.layout.heads() != header.heads) {
        fail(ErrorKind::validation, "corpus header L x H does not match the dataset layout");
    }
    std::vector<double> row(dataset.layout.balanced_size());
    for (const auto& m : mentions) {
        const auto internal = build_internal(caption, header, m.token_index);
        const auto ext = build_external(m, options.max_len);
        row[0] = ext.first_occurrence;
        row[1] = ext.repetition_clipped;
        std::copy(internal.begin(), internal.end(), row.begin() + 2);
        row.back() = ext.norm_position;
        dataset.balanced.append_row(row);
        const double prior_row[2] = {static_cast<double>(m.repetition), ext.norm_position};
        dataset.prior.append_row(prior_row);
        dataset.labels.push_back(m.label ? to_int(*m.label) : -1);
        dataset.info.push_back(
            {caption.caption_id, m.category, m.token_index, m.repetition, m.first_occurrence});
    }
}

Dataset assemble(std::span<const CaptionTrace> captions, const CorpusHeader& header,
                 const std::optional<Normalizer>& normalizer, const AssembleOptions& options) {
    Dataset d = make_dataset(FeatureLayout(header.layers, header.heads));
    for (const auto& c : captions) {
        append_caption(d, c, header, c.mentions, options);
    }
    if (normalizer) {
        normalizer->apply(d.balanced);
    }
    return d;
}

Dataset select_rows(const Dataset& dataset, std::span<const std::size_t> rows) {
    Dataset out = make_dataset(dataset.layout);
    out.balanced.data.reserve(rows.size() * dataset.balanced.cols);
    for (std::size_t r : rows) {
        out.balanced.append_row(dataset.balanced.row(r));
        out.prior.append_row(dataset.prior.row(r));
        out.labels.push_back(dataset.labels[r]);
        out.info.push_back(dataset.info[r]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer::Normalizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.size() != std_.size()) {
        fail(ErrorKind::validation, "normalizer mean/std size mismatch");
    }
}

Normalizer Normalizer::fit(const Matrix& x) {
    if (x.rows == 0) {
        fail(ErrorKind::validation, "cannot fit a normalizer on zero rows");
    }
    std::vector<double> mean(x.cols, 0.0);
    std::vector<double> var(x.cols, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) {
            mean[j] += r[j];
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(x.rows);
    }
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) {
            const double d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    std::vector<double> stddev(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) {
        stddev[j] = std::sqrt(var[j] / static_cast<double>(x.rows));
    }
    return Normalizer(std::move(mean), std::move(stddev));
}

void Normalizer::apply(std::span<double> row) const {
    if (mean_.empty()) return;
    if (row.size() != mean_.size()) {
        fail(ErrorKind::validation, "normalizer width mismatch");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (std_[j] >= kMinStd) {
            row[j] = (row[j] - mean_[j]) / std_[j];
        }
    }
}

void Normalizer::invert(std::span<double> row) const {
    if (mean_.empty()) return;
    if (row.size() != mean_.size()) {
        fail(ErrorKind::validation, "normalizer width mismatch");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (std_[j] >= kMinStd) {
            row[j] = row[j] * std_[j] + mean_[j];
        }
    }
}

void Normalizer::apply(Matrix& x) const {
    for (std::size_t i = 0; i < x.rows; ++i) {
        apply(x.row(i));
    }
}

// ---------------------------------------------------------------------------
// Ablation masks

FeatureMask parse_feature_mask(const std::string& spec, std::uint64_t seed) {
    FeatureMask mask;
    mask.seed = seed;
    std::istringstream in(spec);
    for (std::string part; std::getline(in, part, ',');) {
        if (part.empty() || part == "none") continue;
        if (part == "attention") {
            mask.attention = true;
        } else if (part == "logits") {
            mask.logits = true;
        } else if (part == "external") {
            mask.external = true;
        } else {
            fail(ErrorKind::config,
                 "unknown feature group '" + part + "' (expected attention, logits, external)");
        }
    }
    return mask;
}

std::string to_string(const FeatureMask& mask) {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (on) {
            if (!out.empty()) out += ',';
            out += name;
        }
    };
    add(mask.attention, "attention");
    add(mask.logits, "logits");
    add(mask.external, "external");
    return out.empty() ? "none" : out;
}

void apply_mask(std::span<double> balanced_row, std::span<double> prior_row,
                const FeatureLayout& layout, const FeatureMask& mask, const RowInfo& info) {
    if (!mask.any()) {
        return;
    }
    std::mt19937_64 rng(splitmix64(mask.seed) ^ row_key(info));
    std::normal_distribution<double> noise(0.0, 1.0);
    // Draw a fixed number of variates per row in column order so every
    // group sees the same stream regardless of which groups are masked.
    const std::size_t attn_begin = layout.block_begin(FeatureLayout::Block::attn_mean_cur);
    const std::size_t attn_end = attn_begin + 4 * layout.matrix_size();
    for (std::size_t j = 0; j < balanced_row.size(); ++j) {
        const double z = noise(rng);
        const bool is_attention = j >= attn_begin && j < attn_end;
        const bool is_logit = j >= layout.logit_entropy() && j <= layout.max_softmax();
        const bool is_external = j == FeatureLayout::first_occurrence() ||
                                 j == FeatureLayout::repetition() || j == layout.norm_position();
        if ((is_attention && mask.attention) || (is_logit && mask.logits) ||
            (is_external && mask.external)) {
            balanced_row[j] = z;
        }
    }
    for (double& v : prior_row) {
        const double z = noise(rng);
        if (mask.external) {
            v = z;
        }
    }
}

void apply_mask(Dataset& dataset, const FeatureMask& mask) {
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        apply_mask(dataset.balanced.row(i), dataset.prior.row(i), dataset.layout, mask,
                   dataset.info[i]);
    }
}

// ---------------------------------------------------------------------------
// Dataset files

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        fail(ErrorKind::io, "cannot write dataset " + path.string());
    }
    out.write(kDatasetMagic, 4);
    write_pod(out, kDatasetVersion);
    write_pod(out, static_cast<std::int32_t>(d.layout.layers()));
    write_pod(out, static_cast<std::int32_t>(d.layout.heads()));
    write_pod(out, static_cast<std::uint64_t>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& info = d.info[i];
        write_pod(out, static_cast<std::uint32_t>(info.caption_id.size()));
        out.write(info.caption_id.data(), static_cast<std::streamsize>(info.caption_id.size()));
        write_pod(out, static_cast<std::uint32_t>(info.category.size()));
        out.write(info.category.data(), static_cast<std::streamsize>(info.category.size()));
        write_pod(out, static_cast<std::int32_t>(info.token_index));
        write_pod(out, static_cast<std::int32_t>(info.repetition));
        write_pod(out, static_cast<std::uint8_t>(info.first_occurrence));
        write_pod(out, static_cast<std::int8_t>(d.labels[i]));
        const auto b = d.balanced.row(i);
        out.write(reinterpret_cast<const char*>(b.data()),
                  static_cast<std::streamsize>(b.size() * sizeof(double)));
        const auto p = d.prior.row(i);
        out.write(reinterpret_cast<const char*>(p.data()),
                  static_cast<std::streamsize>(p.size() * sizeof(double)));
    }
    if (!out) {
        fail(ErrorKind::io, "write failed on " + path.string());
    }

    nlohmann::json layout{{"L", d.layout.layers()},
                          {"H", d.layout.heads()},
                          {"balanced_columns", nlohmann::json::object()},
                          {"prior_columns", {{"repetition", 0}, {"norm_position", 1}}}};
    const auto names = d.layout.names();
    for (std::size_t j = 0; j < names.size(); ++j) {
        layout["balanced_columns"][names[j]] = j;
    }
    std::ofstream side(path.string() + ".layout.json");
    side << layout.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open dataset " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kDatasetMagic, 4) != 0) {
        fail(ErrorKind::validation, path.string() + " is not a dataset file");
    }
    if (read_pod<std::uint32_t>(in) != kDatasetVersion) {
        fail(ErrorKind::validation, path.string() + ": unsupported dataset version");
    }
    const int layers = read_pod<std::int32_t>(in);
    const int heads = read_pod<std::int32_t>(in);
    const auto rows = read_pod<std::uint64_t>(in);
    Dataset d = make_dataset(FeatureLayout(layers, heads));
    std::vector<double> b(d.layout.balanced_size());
    std::vector<double> p(FeatureLayout::prior_size());
    for (std::uint64_t i = 0; i < rows; ++i) {
        RowInfo info;
        info.caption_id.resize(read_pod<std::uint32_t>(in));
        in.read(info.caption_id.data(), static_cast<std::streamsize>(info.caption_id.size()));
        info.category.resize(read_pod<std::uint32_t>(in));
        in.read(info.category.data(), static_cast<std::streamsize>(info.category.size()));
        info.token_index = read_pod<std::int32_t>(in);
        info.repetition = read_pod<std::int32_t>(in);
        info.first_occurrence = read_pod<std::uint8_t>(in) != 0;
        d.labels.push_back(read_pod<std::int8_t>(in));
        in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size() * 8));
        in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size() * 8));
        if (!in) {
            fail(ErrorKind::validation, path.string() + ": truncated at row " + std::to_string(i));
        }
        d.balanced.append_row(b);
        d.prior.append_row(p);
        d.info.push_back(std::move(info));
    }
    return d;
}

}  // namespace haloprobe
