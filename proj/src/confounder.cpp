#include "haloprobe/confounder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "haloprobe/error.hpp"

namespace haloprobe {

namespace {

int sign(double v) { return (v > 0) - (v < 0); }

const char* class_name(std::size_t y) { return y == 1 ? "correct" : "hallucinated"; }

}  // namespace

LayerRange parse_layer_range(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        fail(ErrorKind::config, "layer range '" + text + "' must look like begin:end");
    }
    try {
        return {std::stoi(text.substr(0, colon)), std::stoi(text.substr(colon + 1))};
    } catch (const std::exception&) {
        fail(ErrorKind::config, "layer range '" + text + "' must look like begin:end");
    }
}

OccurrenceFilter parse_occurrence_filter(const std::string& text) {
    if (text == "any") return OccurrenceFilter::any;
    if (text == "first") return OccurrenceFilter::first;
    if (text == "repeated") return OccurrenceFilter::repeated;
    fail(ErrorKind::config, "occurrence filter must be any, first or repeated");
}

double attention_value(const TokenTrace& token, const CorpusHeader& header, LayerRange layers) {
    if (layers.begin < 0 || layers.end > header.layers || layers.begin >= layers.end) {
        fail(ErrorKind::config, "layer range [" + std::to_string(layers.begin) + ", " +
                                    std::to_string(layers.end) + ") outside 0.." +
                                    std::to_string(header.layers));
    }
    const auto h = static_cast<std::size_t>(header.heads);
    const auto begin = token.attn_mean_cur.begin() + static_cast<std::ptrdiff_t>(layers.begin * h);
    const auto end = token.attn_mean_cur.begin() + static_cast<std::ptrdiff_t>(layers.end * h);
    double sum = 0.0;
    for (auto it = begin; it != end; ++it) sum += *it;
    return sum / static_cast<double>(end - begin);
}

double ConditionalCurve::reweighted_marginal(ObjectLabel label) const {
    const auto y = static_cast<std::size_t>(to_int(label));
    double acc = 0.0;
    for (const auto& b : bins) {
        acc += static_cast<double>(b.count[y]) / static_cast<double>(total[y]) * b.mean[y];
    }
    return acc;
}

ConditionalCurve curve_from_samples(std::span<const AttentionSample> samples, int position_width) {
    if (position_width <= 0) fail(ErrorKind::config, "position bin width must be positive");
    ConditionalCurve c;
    c.position_width = position_width;
    std::map<int, std::array<double, 2>> sums;
    std::map<int, std::array<std::size_t, 2>> counts;
    std::array<double, 2> total_sum{};
    for (const auto& s : samples) {
        const auto y = static_cast<std::size_t>(to_int(s.label));
        const int bin = s.token_index / position_width;
        sums[bin][y] += s.value;
        counts[bin][y] += 1;
        total_sum[y] += s.value;
        c.total[y] += 1;
    }
    for (const auto& [bin, n] : counts) {
        CurveBin b;
        b.position_bin = bin;
        b.count = n;
        for (std::size_t y = 0; y < 2; ++y) {
            b.mean[y] = n[y] ? sums[bin][y] / static_cast<double>(n[y]) : 0.0;
        }
        c.bins.push_back(b);
    }
    for (std::size_t y = 0; y < 2; ++y) {
        c.marginal_mean[y] = c.total[y] ? total_sum[y] / static_cast<double>(c.total[y]) : 0.0;
    }
    return c;
}

std::vector<AttentionSample> attention_samples(std::span<const CaptionTrace> corpus,
                                               const CorpusHeader& header, LayerRange layers,
                                               OccurrenceFilter occurrence) {
    std::vector<AttentionSample> out;
    for (const auto& c : corpus) {
        for (const auto& m : c.mentions) {
            if (!m.label) {
                fail(ErrorKind::validation, "caption " + c.caption_id + " has unlabeled mentions");
            }
            if ((occurrence == OccurrenceFilter::first && !m.first_occurrence) ||
                (occurrence == OccurrenceFilter::repeated && m.first_occurrence)) {
                continue;
            }
            const auto& t = c.tokens.at(static_cast<std::size_t>(m.token_index));
            out.push_back({m.token_index, *m.label, attention_value(t, header, layers)});
        }
    }
    return out;
}

ConditionalCurve attention_curve(std::span<const CaptionTrace> corpus, const CorpusHeader& header,
                                 LayerRange layers, OccurrenceFilter occurrence,
                                 int position_width) {
    const auto samples = attention_samples(corpus, header, layers, occurrence);
    return curve_from_samples(samples, position_width);
}

SimpsonResult simpson_check(const ConditionalCurve& curve) {
    if (curve.total[0] == 0 || curve.total[1] == 0) {
        fail(ErrorKind::validation, "Simpson check needs both classes in the curve");
    }
    SimpsonResult r;
    std::size_t ge = 0;
    for (const auto& b : curve.bins) {
        if (b.count[0] == 0 || b.count[1] == 0) continue;
        const double gap = b.mean[0] - b.mean[1];
        ++r.compared_bins;
        ge += gap >= 0.0;
        r.weighted_bin_sign += static_cast<double>(std::min(b.count[0], b.count[1])) * sign(gap);
    }
    r.bins_halluc_ge_correct =
        r.compared_bins ? static_cast<double>(ge) / static_cast<double>(r.compared_bins) : 0.0;
    r.marginal_gap = curve.marginal_mean[0] - curve.marginal_mean[1];
    const int majority = sign(r.weighted_bin_sign);
    const int marginal = sign(r.marginal_gap);
    r.reversal = majority != 0 && marginal != 0 && majority != marginal;
    return r;
}

std::vector<ObjectMention> labeled_mentions(std::span<const CaptionTrace> corpus) {
    std::vector<ObjectMention> out;
    for (const auto& c : corpus) {
        out.insert(out.end(), c.mentions.begin(), c.mentions.end());
    }
    return out;
}

ClassConditionalDists class_conditional_dists(std::span<const ObjectMention> mentions,
                                              int position_width) {
    if (position_width <= 0) fail(ErrorKind::config, "position bin width must be positive");
    ClassConditionalDists d;
    d.position_width = position_width;
    std::array<std::map<int, std::size_t>, 2> pos;
    std::array<std::map<int, std::size_t>, 2> first;
    std::array<std::array<std::size_t, 4>, 2> rep{};
    for (const auto& m : mentions) {
        if (!m.label) fail(ErrorKind::validation, "class distributions need labeled mentions");
        const auto y = static_cast<std::size_t>(to_int(*m.label));
        const int bin = m.token_index / position_width;
        d.counts[y] += 1;
        pos[y][bin] += 1;
        first[y][bin] += m.first_occurrence ? 1 : 0;
        rep[y][static_cast<std::size_t>(std::clamp(m.repetition, 1, 4) - 1)] += 1;
    }
    for (std::size_t y = 0; y < 2; ++y) {
        if (d.counts[y] == 0) {
            fail(ErrorKind::validation, std::string("no ") + class_name(y) + " mentions");
        }
        const auto n = static_cast<double>(d.counts[y]);
        for (const auto& [bin, c] : pos[y]) {
            d.position[y][bin] = static_cast<double>(c) / n;
            d.first_occurrence[y][bin] = static_cast<double>(first[y][bin]) / static_cast<double>(c);
        }
        for (std::size_t r = 0; r < 4; ++r) {
            d.repetition[y][r] = static_cast<double>(rep[y][r]) / n;
        }
    }
    std::set<int> bins;
    for (const auto& p : pos) {
        for (const auto& kv : p) bins.insert(kv.first);
    }
    for (int bin : bins) {
        const auto c1 = static_cast<double>(pos[1].count(bin) ? pos[1].at(bin) : 0);
        const auto c0 = static_cast<double>(pos[0].count(bin) ? pos[0].at(bin) : 0);
        d.correct_rate[bin] = c1 / (c0 + c1);
    }
    return d;
}

DegenerationMetrics degeneration_metrics(std::span<const std::string> tokens, int n) {
    if (n < 1) fail(ErrorKind::config, "n-gram order must be at least 1");
    DegenerationMetrics m;
    m.length = tokens.size();
    m.vocab_size = std::set<std::string>(tokens.begin(), tokens.end()).size();
    m.longest_repeated_span = longest_repeated_span(tokens);
    const auto order = static_cast<std::size_t>(n);
    if (tokens.size() < order) return m;

    std::map<std::vector<std::string>, std::size_t> counts;
    for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
        counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                        tokens.begin() + static_cast<std::ptrdiff_t>(i + order))] += 1;
    }
    double total = 0.0, extra = 0.0, repeated = 0.0;
    for (const auto& kv : counts) {
        const auto c = static_cast<double>(kv.second);
        total += c;
        extra += c - 1.0;
        if (kv.second > 1) repeated += c;
    }
    m.redundancy = extra / total;
    m.repetition = repeated / total;
    m.distinct = static_cast<double>(counts.size()) / total;
    return m;
}

std::size_t longest_repeated_span(std::span<const std::string> tokens) {
    // run[j] = length of the common run ending at (i, j) for the current i.
    const std::size_t n = tokens.size();
    std::vector<std::size_t> run(n + 1, 0), prev(n + 1, 0);
    std::size_t best = 0;
    for (std::size_t i = 1; i <= n; ++i) {
        std::fill(run.begin(), run.end(), 0);
        for (std::size_t j = i + 1; j <= n; ++j) {
            if (tokens[i - 1] == tokens[j - 1]) {
                run[j] = prev[j - 1] + 1;
                best = std::max(best, run[j]);
            }
        }
        std::swap(run, prev);
    }
    return best;
}

void write_curve_csv(std::ostream& out, const ConditionalCurve& curve, const std::string& series) {
    out << "series,position_bin,t_begin,class,count,mean\n";
    for (const auto& b : curve.bins) {
        for (std::size_t y = 0; y < 2; ++y) {
            if (b.count[y] == 0) continue;
            out << series << ',' << b.position_bin << ',' << b.position_bin * curve.position_width
                << ',' << class_name(y) << ',' << b.count[y] << ',' << b.mean[y] << '\n';
        }
    }
    for (std::size_t y = 0; y < 2; ++y) {
        out << series << ",marginal,," << class_name(y) << ',' << curve.total[y] << ','
            << curve.marginal_mean[y] << '\n';
    }
}

void write_dists_csv(std::ostream& out, const ClassConditionalDists& d) {
    out << "table,key,class,value\n";
    for (std::size_t y = 0; y < 2; ++y) {
        for (const auto& [bin, p] : d.position[y]) {
            out << "p_position," << bin * d.position_width << ',' << class_name(y) << ',' << p << '\n';
        }
        for (std::size_t r = 0; r < 4; ++r) {
            out << "p_repetition," << r + 1 << ',' << class_name(y) << ',' << d.repetition[y][r]
                << '\n';
        }
        for (const auto& [bin, p] : d.first_occurrence[y]) {
            out << "p_first," << bin * d.position_width << ',' << class_name(y) << ',' << p << '\n';
        }
    }
    for (const auto& [bin, p] : d.correct_rate) {
        out << "p_correct_given_position," << bin * d.position_width << ",all," << p << '\n';
    }
}

}  // namespace haloprobe
