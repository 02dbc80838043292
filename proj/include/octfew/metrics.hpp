#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace octfew {

// Thrown when a metric has no defined value on the given matrix (e.g.
// Cohen's kappa with p_e = 1, or RCI with a single true class).
struct UndefinedMetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// K x K counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
    int k = 0;
    std::vector<int64_t> counts;  // row-major k*k

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int k_) : k(k_), counts(static_cast<size_t>(k_) * k_, 0) {}

    int64_t& at(int i, int j) { return counts[static_cast<size_t>(i) * k + j]; }
    int64_t at(int i, int j) const { return counts[static_cast<size_t>(i) * k + j]; }
    int64_t total() const;
    int64_t row_sum(int i) const;
    int64_t col_sum(int j) const;
    int64_t trace() const;
};

ConfusionMatrix confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred, int k);

double accuracy(const ConfusionMatrix& cm);
// TPR per class; classes with no true samples report nullopt, never 0.
std::vector<std::optional<double>> per_class_tpr(const ConfusionMatrix& cm);
double cohens_kappa(const ConfusionMatrix& cm);   // throws UndefinedMetricError when p_e = 1
double mcc_multiclass(const ConfusionMatrix& cm); // 0 when a denominator factor is 0
double rci(const ConfusionMatrix& cm);            // I(T;P)/H(T); throws when H(T) = 0
double balanced_accuracy(const ConfusionMatrix& cm);  // mean of defined TPRs

struct MetricReport {
    double accuracy = 0.0;
    double kappa = 0.0;
    double rci = 0.0;
    double mcc = 0.0;
    double balanced_accuracy = 0.0;
    std::vector<std::optional<double>> per_class_tpr;
};

MetricReport compute_report(const ConfusionMatrix& cm);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // sample (n-1) standard deviation
};

struct AggregateReport {
    int fold_count = 0;
    MeanStd accuracy, kappa, rci, mcc, balanced_accuracy;
    // Per class: aggregated over folds where the TPR was defined.
    std::vector<std::optional<MeanStd>> per_class_tpr;
};

AggregateReport aggregate_folds(const std::vector<MetricReport>& reports);

nlohmann::ordered_json confusion_to_json(const ConfusionMatrix& cm);
ConfusionMatrix confusion_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json metric_report_to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::ordered_json& j);

// "97.85 ± 0.31" for percent-scaled metrics, "0.972 ± 0.004" otherwise.
std::string format_percent_pm(double mean, double stddev);
std::string format_value_pm(double mean, double stddev);

// Fixed-width summary table (accuracy %, kappa, RCI, MCC, BA), one row per
// named aggregate, plus a per-class TPR table; `csv` variants round-trip
// through standard CSV parsers. Undefined TPR renders as an em dash.
std::string render_summary_table(const std::vector<std::pair<std::string, AggregateReport>>& rows);
std::string render_summary_csv(const std::vector<std::pair<std::string, AggregateReport>>& rows);
std::string render_per_class_table(const std::vector<std::pair<std::string, AggregateReport>>& rows);
std::string render_per_class_csv(const std::vector<std::pair<std::string, AggregateReport>>& rows);

}  // namespace octfew
