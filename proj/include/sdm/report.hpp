#pragma once

#include <iomanip>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sdm/estimator.hpp"

namespace sdm {

// One accuracy/fraction cell of the evaluation table. Accuracy is absent
// exactly when no point was admitted into the cell.
struct ReportCell {
  std::size_t admitted = 0;
  std::size_t correct = 0;
  std::size_t population = 0;  // stratum size in the full test set

  std::optional<double> accuracy() const {
    if (admitted == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(admitted);
  }
  double admitted_fraction(std::size_t test_size) const {
    return test_size == 0 ? 0.0 : static_cast<double>(admitted) / static_cast<double>(test_size);
  }
};

struct CalibrationReport {
  std::string estimator_name;
  double alpha_prime = 0.95;
  std::size_t test_size = 0;
  std::vector<ReportCell> by_true_class;
  std::vector<ReportCell> by_predicted_class;
  ReportCell marginal;
  bool index_conditional_pass = false;  // both stratifications >= alpha'
  std::vector<std::string> failing_strata;
};

struct EvalPoint {
  std::size_t label = 0;
  std::size_t prediction = 0;
  bool admitted = false;
};

// Accuracy over admitted points stratified by the true and the predicted
// label. The index-conditional check passes iff every nonempty stratum
// accuracy reaches alpha'; an empty admitted set passes vacuously.
inline CalibrationReport evaluate_estimator(const std::vector<EvalPoint>& points,
                                            std::size_t class_count, double alpha_prime,
                                            const std::string& estimator_name = "sdm") {
  CalibrationReport report;
  report.estimator_name = estimator_name;
  report.alpha_prime = alpha_prime;
  report.test_size = points.size();
  report.by_true_class.assign(class_count, {});
  report.by_predicted_class.assign(class_count, {});
  for (const auto& pt : points) {
    if (pt.label >= class_count || pt.prediction >= class_count) {
      throw Error("evaluate_estimator: class index out of range");
    }
    report.by_true_class[pt.label].population += 1;
    report.by_predicted_class[pt.prediction].population += 1;
    report.marginal.population += 1;
    if (!pt.admitted) continue;
    const bool correct = pt.label == pt.prediction;
    auto bump = [correct](ReportCell& cell) {
      cell.admitted += 1;
      if (correct) cell.correct += 1;
    };
    bump(report.by_true_class[pt.label]);
    bump(report.by_predicted_class[pt.prediction]);
    bump(report.marginal);
  }
  report.index_conditional_pass = true;
  for (std::size_t c = 0; c < class_count; ++c) {
    const auto acc_y = report.by_true_class[c].accuracy();
    if (acc_y && *acc_y < alpha_prime) {
      report.index_conditional_pass = false;
      report.failing_strata.push_back("y=" + std::to_string(c));
    }
    const auto acc_pred = report.by_predicted_class[c].accuracy();
    if (acc_pred && *acc_pred < alpha_prime) {
      report.index_conditional_pass = false;
      report.failing_strata.push_back("yhat=" + std::to_string(c));
    }
  }
  return report;
}

inline std::vector<EvalPoint> make_eval_points(const std::vector<Verdict>& verdicts,
                                               const std::vector<std::size_t>& labels) {
  if (verdicts.size() != labels.size()) throw Error("make_eval_points: misaligned inputs");
  std::vector<EvalPoint> points(verdicts.size());
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    points[i] = {labels[i], verdicts[i].prediction, verdicts[i].admitted};
  }
  return points;
}

// An admitted point whose recorded label disagrees with the prediction;
// candidates for annotation review.
struct SuspectEntry {
  std::string id;
  std::size_t label = 0;
  std::size_t prediction = 0;
  double p_lower_adjusted = 0.0;
  std::size_t q = 0;
  long hard_qbin = 0;
  std::vector<std::string> exemplar_ids;
};

// Admitted disagreements sorted descending by the adjusted lower estimate;
// the sort is stable, so ties keep input order.
inline std::vector<SuspectEntry> suspect_annotation_report(
    const std::vector<Verdict>& verdicts, const std::vector<std::size_t>& labels) {
  if (verdicts.size() != labels.size()) {
    throw Error("suspect_annotation_report: misaligned inputs");
  }
  std::vector<SuspectEntry> entries;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const Verdict& v = verdicts[i];
    if (!v.admitted || v.prediction == labels[i]) continue;
    SuspectEntry e;
    e.id = v.id;
    e.label = labels[i];
    e.prediction = v.prediction;
    e.p_lower_adjusted = v.p_lower_adjusted.value_or(0.0);
    e.q = v.q;
    e.hard_qbin = v.hard_qbin;
    e.exemplar_ids = v.exemplar_ids;
    entries.push_back(std::move(e));
  }
  std::stable_sort(entries.begin(), entries.end(), [](const SuspectEntry& a, const SuspectEntry& b) {
    return a.p_lower_adjusted > b.p_lower_adjusted;
  });
  return entries;
}

namespace detail {
inline nlohmann::json cell_to_json(const ReportCell& cell, std::size_t test_size) {
  nlohmann::json obj;
  if (const auto acc = cell.accuracy()) {
    obj["accuracy"] = *acc;
  } else {
    obj["accuracy"] = nullptr;
  }
  obj["admitted"] = cell.admitted;
  obj["admitted_fraction"] = cell.admitted_fraction(test_size);
  return obj;
}

inline std::string format_accuracy(const std::optional<double>& acc) {
  if (!acc) return "  N/A";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << *acc;
  return os.str();
}

inline std::string format_fraction(double f) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << f;
  return os.str();
}
}  // namespace detail

// Canonical machine-readable form of the report.
inline nlohmann::json report_to_json(const CalibrationReport& report) {
  nlohmann::json obj;
  obj["estimator"] = report.estimator_name;
  obj["alpha_prime"] = report.alpha_prime;
  obj["test_size"] = report.test_size;
  obj["index_conditional_pass"] = report.index_conditional_pass;
  obj["failing_strata"] = report.failing_strata;
  obj["by_true_class"] = nlohmann::json::array();
  for (const auto& cell : report.by_true_class) {
    obj["by_true_class"].push_back(detail::cell_to_json(cell, report.test_size));
  }
  obj["by_predicted_class"] = nlohmann::json::array();
  for (const auto& cell : report.by_predicted_class) {
    obj["by_predicted_class"].push_back(detail::cell_to_json(cell, report.test_size));
  }
  obj["marginal"] = detail::cell_to_json(report.marginal, report.test_size);
  return obj;
}

// Aligned text table mirroring the accuracy/fraction presentation:
// accuracies with 3 decimals, fractions with 2, N/A for empty cells.
inline std::string report_to_text(const CalibrationReport& report) {
  std::ostringstream os;
  os << "estimator: " << report.estimator_name << "  alpha': " << report.alpha_prime
     << "  |test|: " << report.test_size << "\n";
  os << std::left << std::setw(12) << "stratum" << std::setw(10) << "acc" << std::setw(10)
     << "n/|test|" << "\n";
  for (std::size_t c = 0; c < report.by_true_class.size(); ++c) {
    const auto& cell = report.by_true_class[c];
    os << std::left << std::setw(12) << ("y=" + std::to_string(c)) << std::setw(10)
       << detail::format_accuracy(cell.accuracy()) << std::setw(10)
       << detail::format_fraction(cell.admitted_fraction(report.test_size)) << "\n";
  }
  for (std::size_t c = 0; c < report.by_predicted_class.size(); ++c) {
    const auto& cell = report.by_predicted_class[c];
    os << std::left << std::setw(12) << ("yhat=" + std::to_string(c)) << std::setw(10)
       << detail::format_accuracy(cell.accuracy()) << std::setw(10)
       << detail::format_fraction(cell.admitted_fraction(report.test_size)) << "\n";
  }
  os << std::left << std::setw(12) << "marginal" << std::setw(10)
     << detail::format_accuracy(report.marginal.accuracy()) << std::setw(10)
     << detail::format_fraction(report.marginal.admitted_fraction(report.test_size)) << "\n";
  os << "index-conditional: " << (report.index_conditional_pass ? "PASS" : "FAIL");
  if (!report.failing_strata.empty()) {
    os << " (";
    for (std::size_t i = 0; i < report.failing_strata.size(); ++i) {
      if (i) os << ", ";
      os << report.failing_strata[i];
    }
    os << ")";
  }
  os << "\n";
  return os.str();
}

inline nlohmann::json suspects_to_json(const std::vector<SuspectEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json obj;
    obj["id"] = e.id;
    obj["label"] = e.label;
    obj["prediction"] = e.prediction;
    obj["p_lower"] = e.p_lower_adjusted;
    obj["q"] = e.q;
    obj["hard_qbin"] = e.hard_qbin;
    obj["exemplar_ids"] = e.exemplar_ids;
    arr.push_back(obj);
  }
  return arr;
}

}  // namespace sdm
