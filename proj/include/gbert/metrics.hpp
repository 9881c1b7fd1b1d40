#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <string>
#include <vector>

#include "gbert/error.hpp"

namespace gbert {

/// Evaluation summary for one corpus pass. Averaging conventions are fixed
/// here and echoed into every serialized report so results stay auditable:
/// Jaccard and F1 are per-visit means over thresholded sets (both-empty
/// visit contributes 1 to each), PR-AUC is the per-visit average precision
/// (step interpolation, ties broken by label index), and visits without a
/// single positive label are skipped for PR-AUC and counted.
struct MetricsReport {
  double jaccard = 0.0;
  double f1 = 0.0;
  double pr_auc = 0.0;
  std::size_t n_patients = 0;
  std::size_t n_visits = 0;
  std::size_t n_skipped_no_positives = 0;
  double threshold = 0.3;
  std::string config_fingerprint;
  std::uint64_t seed = 0;

  void write_json(const std::string& path) const {
    nlohmann::json j;
    j["jaccard"] = jaccard;
    j["f1"] = f1;
    j["pr_auc"] = pr_auc;
    j["n_patients"] = n_patients;
    j["n_visits"] = n_visits;
    j["n_skipped_no_positives"] = n_skipped_no_positives;
    j["threshold"] = threshold;
    j["config_fingerprint"] = config_fingerprint;
    j["seed"] = seed;
    j["conventions"] = {{"jaccard_empty", "both_empty_counts_as_1"},
                        {"f1", "per_visit_sample_average"},
                        {"pr_auc", "per_visit_average_precision_step_interpolated"}};
    std::ofstream out(path);
    if (!out) {
      throw ValidationError("cannot write report '" + path + "'");
    }
    out << j.dump(2) << '\n';
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
      throw ValidationError("cannot write report '" + path + "'");
    }
    out << "jaccard,f1,pr_auc,n_patients,n_visits,n_skipped_no_positives,threshold,seed,"
           "config_fingerprint\n";
    out.precision(17);
    out << jaccard << ',' << f1 << ',' << pr_auc << ',' << n_patients << ',' << n_visits << ','
        << n_skipped_no_positives << ',' << threshold << ',' << seed << ','
        << config_fingerprint << '\n';
  }
};

/// |Y ∩ Yhat| / |Y ∪ Yhat| on sorted index vectors; 1 when both are empty.
inline double jaccard_sets(const std::vector<std::size_t>& truth,
                           const std::vector<std::size_t>& pred) {
  if (truth.empty() && pred.empty()) {
    return 1.0;
  }
  std::vector<std::size_t> inter, uni;
  std::set_intersection(truth.begin(), truth.end(), pred.begin(), pred.end(),
                        std::back_inserter(inter));
  std::set_union(truth.begin(), truth.end(), pred.begin(), pred.end(), std::back_inserter(uni));
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

/// Per-visit F1 = 2PR/(P+R); 1 when both sets are empty, 0 when P+R = 0.
inline double f1_sets(const std::vector<std::size_t>& truth,
                      const std::vector<std::size_t>& pred) {
  if (truth.empty() && pred.empty()) {
    return 1.0;
  }
  if (truth.empty() || pred.empty()) {
    return 0.0;
  }
  std::vector<std::size_t> inter;
  std::set_intersection(truth.begin(), truth.end(), pred.begin(), pred.end(),
                        std::back_inserter(inter));
  const double p = static_cast<double>(inter.size()) / static_cast<double>(pred.size());
  const double r = static_cast<double>(inter.size()) / static_cast<double>(truth.size());
  if (p + r == 0.0) {
    return 0.0;
  }
  return 2.0 * p * r / (p + r);
}

/// Average precision of one visit: sweep labels by descending probability
/// (ties by ascending label index), AP = Σ (R_i − R_{i−1}) P_i. Returns
/// false when the visit has no positive label (caller skips it).
inline bool average_precision(const std::vector<char>& truth_indicator,
                              const std::vector<double>& probs, double* out) {
  if (truth_indicator.size() != probs.size()) {
    throw ShapeError("average_precision: indicator and probability sizes differ");
  }
  const std::size_t n = probs.size();
  std::size_t n_pos = 0;
  for (const char t : truth_indicator) {
    n_pos += t ? 1 : 0;
  }
  if (n_pos == 0) {
    return false;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (truth_indicator[order[i]]) {
      ++tp;
      // Recall rises by 1/n_pos here; precision is tp / (i+1).
      ap += (1.0 / static_cast<double>(n_pos)) *
            (static_cast<double>(tp) / static_cast<double>(i + 1));
    }
  }
  *out = ap;
  return true;
}

/// Thresholded prediction set from a probability vector (p >= threshold),
/// returned as sorted label indices.
inline std::vector<std::size_t> threshold_predictions(const std::vector<double>& probs,
                                                      double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] >= threshold) {
      out.push_back(i);
    }
  }
  return out;
}

/// Streaming accumulator over evaluated visits.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double threshold = 0.3) : threshold_(threshold) {}

  void add_visit(const std::vector<std::size_t>& truth, const std::vector<double>& probs) {
    const auto pred = threshold_predictions(probs, threshold_);
    jaccard_sum_ += jaccard_sets(truth, pred);
    f1_sum_ += f1_sets(truth, pred);
    ++n_visits_;
    std::vector<char> ind(probs.size(), 0);
    for (const std::size_t t : truth) {
      if (t >= probs.size()) {
        throw ShapeError("metrics: truth label index out of probability range");
      }
      ind[t] = 1;
    }
    double ap = 0.0;
    if (average_precision(ind, probs, &ap)) {
      ap_sum_ += ap;
      ++n_ap_visits_;
    } else {
      ++n_skipped_;
    }
  }

  MetricsReport report(std::size_t n_patients) const {
    MetricsReport r;
    r.threshold = threshold_;
    r.n_patients = n_patients;
    r.n_visits = n_visits_;
    r.n_skipped_no_positives = n_skipped_;
    if (n_visits_ > 0) {
      r.jaccard = jaccard_sum_ / static_cast<double>(n_visits_);
      r.f1 = f1_sum_ / static_cast<double>(n_visits_);
    }
    if (n_ap_visits_ > 0) {
      r.pr_auc = ap_sum_ / static_cast<double>(n_ap_visits_);
    }
    return r;
  }

 private:
  double threshold_;
  double jaccard_sum_ = 0.0;
  double f1_sum_ = 0.0;
  double ap_sum_ = 0.0;
  std::size_t n_visits_ = 0;
  std::size_t n_ap_visits_ = 0;
  std::size_t n_skipped_ = 0;
};

}  // namespace gbert
