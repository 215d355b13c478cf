#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/labeler.hpp"
#include "haloprobe/posterior.hpp"

namespace haloprobe {

/// Mann-Whitney AUROC with half credit for ties. `labels` are 1 for the
/// positive class. Null when either class is absent.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels);

struct CurvePoint {
    double threshold = 0.0;
    double x = 0.0;  // FPR for ROC, recall for PR
    double y = 0.0;  // TPR for ROC, precision for PR
};

/// One point per distinct score (descending), starting at (0,0) for ROC.
std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const int> labels);

struct BinaryMetrics {
    std::size_t n = 0;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::optional<double> auroc;
    std::string auroc_note;
};

BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const int> labels,
                             double threshold = kDefaultThreshold);

struct PositionBinMetrics {
    int position_begin = 0;
    BinaryMetrics metrics;
};

/// Positive class = correct; the score is p_correct.
struct DetectionReport {
    BinaryMetrics overall;
    std::vector<PositionBinMetrics> by_position;
    std::vector<CurvePoint> roc;
    std::vector<CurvePoint> pr;
};

DetectionReport detection_report(std::span<const TokenScore> scores,
                                 double threshold = kDefaultThreshold, int position_width = 25);

nlohmann::json to_json(const BinaryMetrics& m);
nlohmann::json to_json(const DetectionReport& r, bool include_curves = false);
void write_curve(std::ostream& out, std::span<const CurvePoint> curve, const char* x_name,
                 const char* y_name);

struct CaptionMetrics {
    ChairMetrics chair;
    ObjectF1 f1;
};

struct MitigationReport {
    CaptionMetrics baseline;
    CaptionMetrics mitigated;
    std::optional<double> delta_instance;
    double delta_sentence = 0.0;
    double delta_f1 = 0.0;
};

/// Both corpora must cover the same images.
MitigationReport mitigation_report(std::span<const LabeledCaption> baseline,
                                   std::span<const LabeledCaption> mitigated,
                                   const GroundTruth& truth,
                                   F1Averaging averaging = F1Averaging::micro);

nlohmann::json to_json(const MitigationReport& r);

}  // namespace haloprobe
