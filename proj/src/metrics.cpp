#include "haloprobe/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "haloprobe/error.hpp"

namespace haloprobe {

namespace {

void check_sizes(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        fail(ErrorKind::validation, "score and label counts differ");
    }
    for (int y : labels) {
        if (y != 0 && y != 1) fail(ErrorKind::validation, "labels must be 0 or 1");
    }
}

std::vector<std::size_t> descending(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

double safe_div(double a, double b) { return b > 0 ? a / b : 0.0; }

nlohmann::json nullable(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
    check_sizes(scores, labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Average ranks (1-based) over tie groups.
    double rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum += avg;
                ++positives;
            }
        }
        i = j;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) return std::nullopt;
    const auto p = static_cast<double>(positives);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
    check_sizes(scores, labels);
    const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const auto neg = static_cast<double>(labels.size()) - pos;
    std::vector<CurvePoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
    const auto order = descending(scores);
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == s; ++i) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
        }
        out.push_back({s, safe_div(fp, neg), safe_div(tp, pos)});
    }
    return out;
}

std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const int> labels) {
    check_sizes(scores, labels);
    const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    std::vector<CurvePoint> out;
    const auto order = descending(scores);
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == s; ++i) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
        }
        out.push_back({s, safe_div(tp, pos), safe_div(tp, tp + fp)});
    }
    return out;
}

BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const int> labels,
                             double threshold) {
    check_sizes(scores, labels);
    BinaryMetrics m;
    m.n = scores.size();
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        const bool actual = labels[i] == 1;
        (predicted ? (actual ? tp : fp) : (actual ? fn : tn)) += 1;
    }
    m.accuracy = safe_div(tp + tn, static_cast<double>(m.n));
    m.precision = safe_div(tp, tp + fp);
    m.recall = safe_div(tp, tp + fn);
    m.f1 = safe_div(2 * m.precision * m.recall, m.precision + m.recall);
    m.auroc = auroc(scores, labels);
    if (!m.auroc) m.auroc_note = "undefined: only one class present";
    return m;
}

DetectionReport detection_report(std::span<const TokenScore> scores, double threshold,
                                 int position_width) {
    if (position_width <= 0) fail(ErrorKind::config, "position bin width must be positive");
    std::vector<double> s;
    std::vector<int> y;
    std::map<int, std::pair<std::vector<double>, std::vector<int>>> bins;
    for (const auto& t : scores) {
        if (!t.label) fail(ErrorKind::validation, "detection report needs labeled scores");
        s.push_back(t.p_correct);
        y.push_back(to_int(*t.label));
        auto& b = bins[t.token_index / position_width];
        b.first.push_back(t.p_correct);
        b.second.push_back(to_int(*t.label));
    }
    if (s.empty()) fail(ErrorKind::validation, "no scores to evaluate");
    DetectionReport r;
    r.overall = binary_metrics(s, y, threshold);
    for (const auto& [bin, data] : bins) {
        r.by_position.push_back({bin * position_width, binary_metrics(data.first, data.second, threshold)});
    }
    r.roc = roc_curve(s, y);
    r.pr = pr_curve(s, y);
    return r;
}

nlohmann::json to_json(const BinaryMetrics& m) {
    nlohmann::json j{{"n", m.n},           {"accuracy", m.accuracy}, {"precision", m.precision},
                     {"recall", m.recall}, {"f1", m.f1},             {"auroc", nullable(m.auroc)}};
    if (!m.auroc_note.empty()) j["auroc_note"] = m.auroc_note;
    return j;
}

nlohmann::json to_json(const DetectionReport& r, bool include_curves) {
    nlohmann::json j{{"positive_class", "correct"}, {"overall", to_json(r.overall)}};
    auto& bins = j["by_position"] = nlohmann::json::array();
    for (const auto& b : r.by_position) {
        auto entry = to_json(b.metrics);
        entry["position_begin"] = b.position_begin;
        bins.push_back(std::move(entry));
    }
    if (include_curves) {
        auto pts = [](const std::vector<CurvePoint>& c) {
            nlohmann::json a = nlohmann::json::array();
            for (const auto& p : c) a.push_back({p.x, p.y});
            return a;
        };
        j["roc"] = pts(r.roc);
        j["pr"] = pts(r.pr);
    }
    return j;
}

void write_curve(std::ostream& out, std::span<const CurvePoint> curve, const char* x_name,
                 const char* y_name) {
    out << x_name << ',' << y_name << '\n';
    for (const auto& p : curve) out << p.x << ',' << p.y << '\n';
}

MitigationReport mitigation_report(std::span<const LabeledCaption> baseline,
                                   std::span<const LabeledCaption> mitigated,
                                   const GroundTruth& truth, F1Averaging averaging) {
    std::multiset<std::string> a, b;
    for (const auto& c : baseline) a.insert(c.image_id);
    for (const auto& c : mitigated) b.insert(c.image_id);
    if (a != b) {
        fail(ErrorKind::validation, "baseline and mitigated corpora cover different images");
    }
    MitigationReport r;
    r.baseline = {chair_metrics(baseline), object_f1(baseline, truth, averaging)};
    r.mitigated = {chair_metrics(mitigated), object_f1(mitigated, truth, averaging)};
    if (r.baseline.chair.instance && r.mitigated.chair.instance) {
        r.delta_instance = *r.mitigated.chair.instance - *r.baseline.chair.instance;
    }
    r.delta_sentence = r.mitigated.chair.sentence - r.baseline.chair.sentence;
    r.delta_f1 = r.mitigated.f1.f1 - r.baseline.f1.f1;
    return r;
}

nlohmann::json to_json(const MitigationReport& r) {
    auto side = [](const CaptionMetrics& m) {
        return nlohmann::json{{"C_s", m.chair.sentence},
                              {"C_i", nullable(m.chair.instance)},
                              {"F1", m.f1.f1},
                              {"precision", m.f1.precision},
                              {"recall", m.f1.recall},
                              {"captions", m.chair.captions},
                              {"mentions", m.chair.mentions}};
    };
    return {{"baseline", side(r.baseline)},
            {"mitigated", side(r.mitigated)},
            {"delta", {{"C_s", r.delta_sentence}, {"C_i", nullable(r.delta_instance)}, {"F1", r.delta_f1}}}};
}

}  // namespace haloprobe
