#pragma once
/**
 * metrics.hpp
 *
 * Confusion matrices, per-class precision/recall/F1, the combined score
 * m * prod(F1) / sum(F1), binary collapse of connectivity labels and report
 * emission (JSON, CSV, SVG).
 *
 * Precision, recall or F1 with a zero denominator resolve to 0 and mark the
 * class as degenerate.
 */

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "catalog.hpp"
#include "image.hpp"

namespace streamgate {

struct ConfusionMatrix {
    int m = 0;
    std::vector<std::int64_t> cells;  // row-major, rows = truth, cols = predicted

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes)
        : m(classes), cells(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {}

    // 1-based class indices
    std::int64_t& at(int truth, int pred) { return cells[std::size_t(truth - 1) * std::size_t(m) + std::size_t(pred - 1)]; }
    [[nodiscard]] std::int64_t at(int truth, int pred) const {
        return cells[std::size_t(truth - 1) * std::size_t(m) + std::size_t(pred - 1)];
    }
    [[nodiscard]] std::int64_t row_sum(int a) const {
        std::int64_t s = 0;
        for (int j = 1; j <= m; ++j) s += at(a, j);
        return s;
    }
    [[nodiscard]] std::int64_t col_sum(int a) const {
        std::int64_t s = 0;
        for (int i = 1; i <= m; ++i) s += at(i, a);
        return s;
    }
    [[nodiscard]] std::int64_t total() const {
        std::int64_t s = 0;
        for (auto c : cells) s += c;
        return s;
    }
    [[nodiscard]] std::int64_t trace() const {
        std::int64_t s = 0;
        for (int a = 1; a <= m; ++a) s += at(a, a);
        return s;
    }
    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& truth, int m) {
    if (m < 1) throw ValidationError("confusion: class count must be >= 1");
    if (pred.size() != truth.size())
        throw ValidationError("confusion: length mismatch (" + std::to_string(pred.size()) + " vs " +
                              std::to_string(truth.size()) + ")");
    if (pred.empty()) throw ValidationError("confusion: empty label vectors");
    ConfusionMatrix cm(m);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 1 || pred[i] > m || truth[i] < 1 || truth[i] > m)
            throw ValidationError("confusion: label out of range at position " + std::to_string(i));
        ++cm.at(truth[i], pred[i]);
    }
    return cm;
}

struct ClassScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate = false;
};

inline ClassScore class_f1(const ConfusionMatrix& cm, int a) {
    if (a < 1 || a > cm.m) throw ValidationError("class_f1: class index out of range");
    ClassScore s;
    const auto tp = static_cast<double>(cm.at(a, a));
    const auto col = cm.col_sum(a), row = cm.row_sum(a);
    if (col > 0) s.precision = tp / static_cast<double>(col);
    else s.degenerate = true;
    if (row > 0) s.recall = tp / static_cast<double>(row);
    else s.degenerate = true;
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    else s.degenerate = true;
    return s;
}

/// m * prod(F1_i) / sum(F1_i); 0 when any term is 0.
inline double combined_f1(const std::vector<double>& f1) {
    double prod = 1.0, sum = 0.0;
    for (double v : f1) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("combined_f1: F1 values must lie in [0, 1]");
        prod *= v;
        sum += v;
    }
    if (f1.empty() || sum == 0.0 || prod == 0.0) return 0.0;
    return static_cast<double>(f1.size()) * prod / sum;
}

/// m / sum(1/F1_i), evaluated as m * prod / sum_i prod_{j != i} so that for
/// two classes it is bit-identical to combined_f1. 0 when any term is 0.
inline double harmonic_f1(const std::vector<double>& f1) {
    if (f1.empty()) return 0.0;
    double prod = 1.0, denom = 0.0;
    for (std::size_t i = 0; i < f1.size(); ++i) {
        if (f1[i] == 0.0) return 0.0;
        prod *= f1[i];
        double others = 1.0;
        for (std::size_t j = 0; j < f1.size(); ++j)
            if (j != i) others *= f1[j];
        denom += others;
    }
    return static_cast<double>(f1.size()) * prod / denom;
}

inline constexpr int kDisconnected = 1;
inline constexpr int kConnected = 2;

inline int collapse_binary(int label) {
    if (!valid_label(label)) throw ValidationError("collapse_binary: label out of range: " + std::to_string(label));
    return label <= 3 ? kDisconnected : kConnected;
}

inline std::vector<int> collapse_binary(const std::vector<int>& labels) {
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) out.push_back(collapse_binary(l));
    return out;
}

struct MetricsReport {
    int m = 0;
    ConfusionMatrix cm;
    std::vector<ClassScore> per_class;
    std::vector<std::int64_t> support;  // true count per class
    double combined = 0.0;
    double harmonic = 0.0;
    double accuracy = 0.0;
    std::int64_t n = 0;
    double disconnected_f1 = 0.0;  // binary task only
};

inline MetricsReport report_from_confusion(const ConfusionMatrix& cm) {
    MetricsReport r;
    r.m = cm.m;
    r.cm = cm;
    r.n = cm.total();
    std::vector<double> f1;
    for (int a = 1; a <= cm.m; ++a) {
        r.per_class.push_back(class_f1(cm, a));
        r.support.push_back(cm.row_sum(a));
        f1.push_back(r.per_class.back().f1);
    }
    r.combined = combined_f1(f1);
    r.harmonic = harmonic_f1(f1);
    r.accuracy = r.n ? static_cast<double>(cm.trace()) / static_cast<double>(r.n) : 0.0;
    if (cm.m == 2) r.disconnected_f1 = r.per_class[0].f1;
    return r;
}

inline MetricsReport compute_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int m) {
    return report_from_confusion(confusion(pred, truth, m));
}

inline std::string class_name(int m, int a) {
    if (m == 2) return a == kDisconnected ? "disconnected" : "connected";
    return "class_" + std::to_string(a);
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["classes"] = r.m;
    j["n"] = r.n;
    j["accuracy"] = r.accuracy;
    j["combined_f1"] = r.combined;
    j["harmonic_f1"] = r.harmonic;
    if (r.m == 2) j["disconnected_f1"] = r.disconnected_f1;
    auto per = nlohmann::ordered_json::array();
    for (int a = 1; a <= r.m; ++a) {
        const auto& s = r.per_class[std::size_t(a - 1)];
        per.push_back({{"class", a},
                       {"name", class_name(r.m, a)},
                       {"precision", s.precision},
                       {"recall", s.recall},
                       {"f1", s.f1},
                       {"support", r.support[std::size_t(a - 1)]},
                       {"degenerate", s.degenerate}});
    }
    j["per_class"] = per;
    auto rows = nlohmann::ordered_json::array();
    for (int i = 1; i <= r.m; ++i) {
        auto row = nlohmann::ordered_json::array();
        for (int k = 1; k <= r.m; ++k) row.push_back(r.cm.at(i, k));
        rows.push_back(row);
    }
    j["confusion"] = rows;
    return j;
}

// ---------------------------------------------------------------------------
// Predictions file: id,predicted_label,p_1..p_m

struct PredictionRow {
    std::string id;
    int predicted_label = 0;
    std::vector<double> probabilities;
};

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9f", v);
    return buf;
}

inline void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows, int m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << "id,predicted_label";
    for (int a = 1; a <= m; ++a) out << ",p_" << a;
    out << '\n';
    for (const auto& r : rows) {
        if (r.id.find_first_of(",\n\"") != std::string::npos)
            throw ValidationError("predictions: id '" + r.id + "' cannot be written to CSV");
        out << r.id << ',' << r.predicted_label;
        for (double p : r.probabilities) out << ',' << format_real(p);
        out << '\n';
    }
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

/// Returns the rows and sets `m` from the header.
inline std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path, int& m) {
    std::ifstream in(path);
    if (!in) throw ValidationError("missing predictions file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("predictions: empty file");
    auto split = [](const std::string& s) {
        std::vector<std::string> f;
        std::stringstream ss(s);
        std::string x;
        while (std::getline(ss, x, ',')) f.push_back(x);
        return f;
    };
    const auto header = split(line);
    if (header.size() < 4 || header[0] != "id" || header[1] != "predicted_label")
        throw ValidationError("predictions: header must be id,predicted_label,p_1..p_m");
    m = static_cast<int>(header.size()) - 2;
    std::vector<PredictionRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split(line);
        if (f.size() != header.size())
            throw ValidationError("predictions: line " + std::to_string(lineno) + " has the wrong field count");
        PredictionRow r;
        r.id = f[0];
        try {
            r.predicted_label = std::stoi(f[1]);
            for (std::size_t k = 2; k < f.size(); ++k) r.probabilities.push_back(std::stod(f[k]));
        } catch (const std::exception&) {
            throw ValidationError("predictions: line " + std::to_string(lineno) + " is not numeric");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

struct Evaluation {
    MetricsReport report;
    std::optional<MetricsReport> binary;  // 6-class input collapsed to 2 classes
};

/// Joins predictions to truth labels by id. `task_classes` is 2 or 6; truth
/// labels (1..6) are collapsed for the 2-class task.
inline Evaluation evaluate(const std::vector<PredictionRow>& preds, const Catalog& truth, int task_classes) {
    if (task_classes != 2 && task_classes != kNumLabels)
        throw ValidationError("evaluate: task must be 2-class or 6-class");
    if (preds.empty()) throw ValidationError("evaluate: no predictions");
    std::vector<std::string> unknown;
    std::vector<int> p, t;
    for (const auto& row : preds) {
        const ImageRecord* rec = truth.find(row.id);
        if (!rec || !rec->label) {
            unknown.push_back(row.id);
            continue;
        }
        p.push_back(row.predicted_label);
        t.push_back(task_classes == 2 ? collapse_binary(*rec->label) : *rec->label);
    }
    if (!unknown.empty()) {
        std::string msg = "evaluate: predictions for ids without a labelled truth record:";
        for (std::size_t i = 0; i < unknown.size() && i < 20; ++i) msg += " " + unknown[i];
        if (unknown.size() > 20) msg += " ... (" + std::to_string(unknown.size()) + " total)";
        throw ValidationError(msg);
    }
    Evaluation ev;
    ev.report = compute_metrics(p, t, task_classes);
    if (task_classes == kNumLabels) ev.binary = compute_metrics(collapse_binary(p), collapse_binary(t), 2);
    return ev;
}

inline nlohmann::ordered_json to_json(const Evaluation& ev) {
    nlohmann::ordered_json j = to_json(ev.report);
    if (ev.binary) j["binary"] = to_json(*ev.binary);
    return j;
}

inline std::string report_csv(const Evaluation& ev) {
    std::ostringstream out;
    out << "task,class,name,precision,recall,f1,support,degenerate\n";
    auto rows = [&](const MetricsReport& r, const std::string& task) {
        for (int a = 1; a <= r.m; ++a) {
            const auto& s = r.per_class[std::size_t(a - 1)];
            out << task << ',' << a << ',' << class_name(r.m, a) << ',' << format_real(s.precision) << ','
                << format_real(s.recall) << ',' << format_real(s.f1) << ',' << r.support[std::size_t(a - 1)] << ','
                << (s.degenerate ? 1 : 0) << '\n';
        }
        out << task << ",all,combined,,," << format_real(r.combined) << ',' << r.n << ",0\n";
        out << task << ",all,harmonic,,," << format_real(r.harmonic) << ',' << r.n << ",0\n";
        out << task << ",all,accuracy,,," << format_real(r.accuracy) << ',' << r.n << ",0\n";
    };
    rows(ev.report, std::to_string(ev.report.m) + "-class");
    if (ev.binary) rows(*ev.binary, "2-class");
    return out.str();
}

/// Static bar chart of per-class F1.
inline std::string report_svg(const MetricsReport& r) {
    const int bar = 48, gap = 16, left = 48, top = 24, height = 200;
    const int width = left + r.m * (bar + gap) + gap;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << (top + height + 48)
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << left << "\" y=\"16\">per-class F1 (combined " << format_real(r.combined).substr(0, 6)
      << ", accuracy " << format_real(r.accuracy).substr(0, 6) << ")</text>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width << "\" y2=\"" << top + height
      << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const int y = top + height - t * height / 4;
        s << "<text x=\"4\" y=\"" << y + 4 << "\">" << format_real(t / 4.0).substr(0, 4) << "</text>\n";
    }
    for (int a = 1; a <= r.m; ++a) {
        const double f = r.per_class[std::size_t(a - 1)].f1;
        const int h = static_cast<int>(f * height + 0.5);
        const int x = left + gap + (a - 1) * (bar + gap);
        s << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar << "\" height=\"" << h
          << "\" fill=\"#4a7ab0\"/>\n";
        s << "<text x=\"" << x << "\" y=\"" << top + height + 16 << "\">" << class_name(r.m, a) << "</text>\n";
        s << "<text x=\"" << x << "\" y=\"" << top + height - h - 4 << "\">" << format_real(f).substr(0, 5)
          << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// Writes report.json, report.csv and report.svg into `dir`.
inline void write_reports(const Evaluation& ev, const std::filesystem::path& dir, const std::string& stem = "report") {
    std::filesystem::create_directories(dir);
    auto put = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary);
        out << text;
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    };
    put(stem + ".json", to_json(ev).dump(2) + "\n");
    put(stem + ".csv", report_csv(ev));
    put(stem + ".svg", report_svg(ev.report));
}

}  // namespace streamgate
