#include "octfew/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "octfew/manifest.hpp"

namespace octfew {

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
}

int64_t ConfusionMatrix::row_sum(int i) const {
    int64_t t = 0;
    for (int j = 0; j < k; ++j) t += at(i, j);
    return t;
}

int64_t ConfusionMatrix::col_sum(int j) const {
    int64_t t = 0;
    for (int i = 0; i < k; ++i) t += at(i, j);
    return t;
}

int64_t ConfusionMatrix::trace() const {
    int64_t t = 0;
    for (int i = 0; i < k; ++i) t += at(i, i);
    return t;
}

ConfusionMatrix confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
    if (y_true.size() != y_pred.size())
        throw std::runtime_error("confusion: length mismatch, " + std::to_string(y_true.size()) +
                                 " truths vs " + std::to_string(y_pred.size()) + " predictions");
    if (y_true.empty()) throw std::runtime_error("confusion: empty label sequences");
    ConfusionMatrix cm(k);
    for (size_t i = 0; i < y_true.size(); ++i) {
        const int t = y_true[i], p = y_pred[i];
        if (t < 0 || t >= k || p < 0 || p >= k)
            throw std::runtime_error("confusion: label out of range at position " + std::to_string(i));
        ++cm.at(t, p);
    }
    return cm;
}

namespace {

void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.k <= 0 || cm.total() <= 0)
        throw std::runtime_error("metric requires a nonempty confusion matrix");
}

}  // namespace

double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

std::vector<std::optional<double>> per_class_tpr(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::vector<std::optional<double>> tpr(static_cast<size_t>(cm.k));
    for (int i = 0; i < cm.k; ++i) {
        const int64_t rs = cm.row_sum(i);
        if (rs > 0) tpr[static_cast<size_t>(i)] = static_cast<double>(cm.at(i, i)) / static_cast<double>(rs);
    }
    return tpr;
}

double cohens_kappa(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const double total = static_cast<double>(cm.total());
    const double po = static_cast<double>(cm.trace()) / total;
    double pe = 0.0;
    for (int i = 0; i < cm.k; ++i)
        pe += static_cast<double>(cm.row_sum(i)) * static_cast<double>(cm.col_sum(i)) / (total * total);
    if (pe >= 1.0 - 1e-15)
        throw UndefinedMetricError(
            "Cohen's kappa undefined: expected agreement p_e = 1 (both marginals collapse onto "
            "one class)");
    return (po - pe) / (1.0 - pe);
}

double mcc_multiclass(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const double total = static_cast<double>(cm.total());
    // Covariance form: (c*s - sum_i t_i p_i) / sqrt((s^2 - sum p_i^2)(s^2 - sum t_i^2))
    const double c = static_cast<double>(cm.trace());
    double sum_tp = 0.0, sum_pp = 0.0, sum_tt = 0.0;
    for (int i = 0; i < cm.k; ++i) {
        const double t = static_cast<double>(cm.row_sum(i));
        const double p = static_cast<double>(cm.col_sum(i));
        sum_tp += t * p;
        sum_pp += p * p;
        sum_tt += t * t;
    }
    const double num = c * total - sum_tp;
    const double den1 = total * total - sum_pp;
    const double den2 = total * total - sum_tt;
    if (den1 <= 0.0 || den2 <= 0.0) return 0.0;  // constant predictor / single true class
    return num / std::sqrt(den1 * den2);
}

double rci(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const double total = static_cast<double>(cm.total());
    // I(T;P)/H(T) from the empirical joint; 0*log 0 = 0; ratio is
    // logarithm-base independent, natural log used here.
    auto xlogx = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };

    double h_t = 0.0;
    for (int i = 0; i < cm.k; ++i) h_t -= xlogx(static_cast<double>(cm.row_sum(i)) / total);
    if (h_t <= 0.0)
        throw UndefinedMetricError("RCI undefined: single true class present, H(T) = 0");

    double mi = 0.0;
    for (int i = 0; i < cm.k; ++i) {
        const double pi = static_cast<double>(cm.row_sum(i)) / total;
        if (pi <= 0.0) continue;
        for (int j = 0; j < cm.k; ++j) {
            const double pj = static_cast<double>(cm.col_sum(j)) / total;
            const double pij = static_cast<double>(cm.at(i, j)) / total;
            if (pij > 0.0 && pj > 0.0) mi += pij * std::log(pij / (pi * pj));
        }
    }
    if (mi < 0.0) mi = 0.0;  // guard tiny negative round-off
    return mi / h_t;
}

double balanced_accuracy(const ConfusionMatrix& cm) {
    const auto tpr = per_class_tpr(cm);
    double sum = 0.0;
    int defined = 0;
    for (const auto& t : tpr)
        if (t) {
            sum += *t;
            ++defined;
        }
    if (defined == 0)
        throw UndefinedMetricError("balanced accuracy undefined: no class has a defined TPR");
    return sum / static_cast<double>(defined);
}

MetricReport compute_report(const ConfusionMatrix& cm) {
    MetricReport r;
    r.accuracy = accuracy(cm);
    r.kappa = cohens_kappa(cm);
    r.rci = rci(cm);
    r.mcc = mcc_multiclass(cm);
    r.balanced_accuracy = balanced_accuracy(cm);
    r.per_class_tpr = per_class_tpr(cm);
    return r;
}

namespace {

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    const double n = static_cast<double>(xs.size());
    for (double x : xs) ms.mean += x;
    ms.mean /= n;
    if (xs.size() >= 2) {
        double ss = 0.0;
        for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
        ms.stddev = std::sqrt(ss / (n - 1.0));
    }
    return ms;
}

}  // namespace

AggregateReport aggregate_folds(const std::vector<MetricReport>& reports) {
    if (reports.size() < 2)
        throw std::runtime_error("aggregate_folds: need at least 2 fold reports, got " +
                                 std::to_string(reports.size()));
    AggregateReport agg;
    agg.fold_count = static_cast<int>(reports.size());
    auto collect = [&](auto getter) {
        std::vector<double> xs;
        xs.reserve(reports.size());
        for (const auto& r : reports) xs.push_back(getter(r));
        return mean_std(xs);
    };
    agg.accuracy = collect([](const MetricReport& r) { return r.accuracy; });
    agg.kappa = collect([](const MetricReport& r) { return r.kappa; });
    agg.rci = collect([](const MetricReport& r) { return r.rci; });
    agg.mcc = collect([](const MetricReport& r) { return r.mcc; });
    agg.balanced_accuracy = collect([](const MetricReport& r) { return r.balanced_accuracy; });

    size_t k = 0;
    for (const auto& r : reports) k = std::max(k, r.per_class_tpr.size());
    agg.per_class_tpr.resize(k);
    for (size_t c = 0; c < k; ++c) {
        std::vector<double> xs;
        for (const auto& r : reports)
            if (c < r.per_class_tpr.size() && r.per_class_tpr[c]) xs.push_back(*r.per_class_tpr[c]);
        if (!xs.empty()) {
            MeanStd ms = mean_std(xs);
            if (xs.size() < 2) ms.stddev = 0.0;
            agg.per_class_tpr[c] = ms;
        }
    }
    return agg;
}

nlohmann::ordered_json confusion_to_json(const ConfusionMatrix& cm) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int i = 0; i < cm.k; ++i) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (int j = 0; j < cm.k; ++j) row.push_back(cm.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

ConfusionMatrix confusion_from_json(const nlohmann::ordered_json& j) {
    ConfusionMatrix cm(static_cast<int>(j.size()));
    for (int i = 0; i < cm.k; ++i) {
        const auto& row = j.at(static_cast<size_t>(i));
        if (static_cast<int>(row.size()) != cm.k)
            throw std::runtime_error("confusion_from_json: ragged matrix");
        for (int c = 0; c < cm.k; ++c) cm.at(i, c) = row.at(static_cast<size_t>(c)).get<int64_t>();
    }
    return cm;
}

nlohmann::ordered_json metric_report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["accuracy"] = r.accuracy;
    j["kappa"] = r.kappa;
    j["rci"] = r.rci;
    j["mcc"] = r.mcc;
    j["balanced_accuracy"] = r.balanced_accuracy;
    nlohmann::ordered_json tpr = nlohmann::ordered_json::array();
    for (const auto& t : r.per_class_tpr) {
        if (t)
            tpr.push_back(*t);
        else
            tpr.push_back(nullptr);
    }
    j["per_class_tpr"] = std::move(tpr);
    return j;
}

MetricReport metric_report_from_json(const nlohmann::ordered_json& j) {
    MetricReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.kappa = j.at("kappa").get<double>();
    r.rci = j.at("rci").get<double>();
    r.mcc = j.at("mcc").get<double>();
    r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
    for (const auto& t : j.at("per_class_tpr")) {
        if (t.is_null())
            r.per_class_tpr.push_back(std::nullopt);
        else
            r.per_class_tpr.push_back(t.get<double>());
    }
    return r;
}

std::string format_percent_pm(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", mean * 100.0, stddev * 100.0);
    return buf;
}

std::string format_value_pm(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", mean, stddev);
    return buf;
}

namespace {

void pad_to(std::string& s, size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::string render_summary_table(const std::vector<std::pair<std::string, AggregateReport>>& rows) {
    const std::vector<std::string> headers = {"Method", "Accuracy (%)", "Cohen's κ", "RCI", "MCC", "BA"};
    std::vector<std::vector<std::string>> cells;
    cells.push_back(headers);
    for (const auto& [name, a] : rows)
        cells.push_back({name, format_percent_pm(a.accuracy.mean, a.accuracy.stddev),
                         format_value_pm(a.kappa.mean, a.kappa.stddev),
                         format_value_pm(a.rci.mean, a.rci.stddev),
                         format_value_pm(a.mcc.mean, a.mcc.stddev),
                         format_value_pm(a.balanced_accuracy.mean, a.balanced_accuracy.stddev)});
    std::vector<size_t> widths(headers.size(), 0);
    for (const auto& row : cells)
        for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
    std::ostringstream out;
    for (size_t r = 0; r < cells.size(); ++r) {
        for (size_t i = 0; i < cells[r].size(); ++i) {
            std::string c = cells[r][i];
            pad_to(c, widths[i] + 2);
            out << c;
        }
        out << "\n";
        if (r == 0) {
            size_t line = 0;
            for (size_t w : widths) line += w + 2;
            out << std::string(line, '-') << "\n";
        }
    }
    return out.str();
}

std::string render_summary_csv(const std::vector<std::pair<std::string, AggregateReport>>& rows) {
    std::ostringstream out;
    out << "method,accuracy_pct_mean,accuracy_pct_std,kappa_mean,kappa_std,rci_mean,rci_std,"
           "mcc_mean,mcc_std,ba_mean,ba_std\n";
    char buf[256];
    for (const auto& [name, a] : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                      csv_escape(name).c_str(), a.accuracy.mean * 100.0, a.accuracy.stddev * 100.0,
                      a.kappa.mean, a.kappa.stddev, a.rci.mean, a.rci.stddev, a.mcc.mean,
                      a.mcc.stddev, a.balanced_accuracy.mean, a.balanced_accuracy.stddev);
        out << buf;
    }
    return out.str();
}

std::string render_per_class_table(const std::vector<std::pair<std::string, AggregateReport>>& rows) {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> head = {"Method"};
    for (const auto& c : all_classes()) head.push_back(class_name(c));
    cells.push_back(head);
    for (const auto& [name, a] : rows) {
        std::vector<std::string> row = {name};
        for (int c = 0; c < kNumClasses; ++c) {
            if (c < static_cast<int>(a.per_class_tpr.size()) && a.per_class_tpr[static_cast<size_t>(c)]) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.2f",
                              a.per_class_tpr[static_cast<size_t>(c)]->mean * 100.0);
                row.push_back(buf);
            } else {
                row.push_back("—");
            }
        }
        cells.push_back(std::move(row));
    }
    std::vector<size_t> widths(head.size(), 0);
    for (const auto& row : cells)
        for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
    std::ostringstream out;
    for (size_t r = 0; r < cells.size(); ++r) {
        for (size_t i = 0; i < cells[r].size(); ++i) {
            std::string c = cells[r][i];
            pad_to(c, widths[i] + 2);
            out << c;
        }
        out << "\n";
        if (r == 0) {
            size_t line = 0;
            for (size_t w : widths) line += w + 2;
            out << std::string(line, '-') << "\n";
        }
    }
    return out.str();
}

std::string render_per_class_csv(const std::vector<std::pair<std::string, AggregateReport>>& rows) {
    std::ostringstream out;
    out << "method";
    for (const auto& c : all_classes()) out << "," << class_name(c);
    out << "\n";
    for (const auto& [name, a] : rows) {
        out << csv_escape(name);
        for (int c = 0; c < kNumClasses; ++c) {
            out << ",";
            if (c < static_cast<int>(a.per_class_tpr.size()) && a.per_class_tpr[static_cast<size_t>(c)]) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.4f", a.per_class_tpr[static_cast<size_t>(c)]->mean);
                out << buf;
            }
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace octfew
