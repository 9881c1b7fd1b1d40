#pragma once

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/ontology.hpp"

namespace gbert {

/// One hospital visit: deduplicated, index-sorted leaf codes per type.
struct Visit {
  std::vector<std::size_t> dx;
  std::vector<std::size_t> rx;
};

struct PatientRecord {
  std::string pid;
  std::vector<Visit> visits;

  bool multi_visit() const { return visits.size() > 1; }
};

namespace detail {

inline std::vector<std::size_t> canonical_codes(std::vector<std::size_t> codes) {
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
  return codes;
}

}  // namespace detail

/// Builds a Visit from code labels: resolves against the trees, requires
/// leaves, dedups, sorts by node index.
inline Visit make_visit(const std::vector<std::string>& dx_labels,
                        const std::vector<std::string>& rx_labels, const OntologyTree& dx_tree,
                        const OntologyTree& rx_tree) {
  Visit v;
  for (const auto& lbl : dx_labels) {
    const std::size_t node = dx_tree.node_of(lbl);
    if (!dx_tree.is_leaf(node)) {
      throw ValidationError("diagnosis code '" + lbl + "' is not a leaf code");
    }
    v.dx.push_back(node);
  }
  for (const auto& lbl : rx_labels) {
    const std::size_t node = rx_tree.node_of(lbl);
    if (!rx_tree.is_leaf(node)) {
      throw ValidationError("medication code '" + lbl + "' is not a leaf code");
    }
    v.rx.push_back(node);
  }
  v.dx = detail::canonical_codes(std::move(v.dx));
  v.rx = detail::canonical_codes(std::move(v.rx));
  return v;
}

/// JSON-lines loader: one patient per line,
/// {"pid": str, "visits": [{"dx": [codes], "rx": [codes]}]}.
inline std::vector<PatientRecord> load_records(const std::string& path,
                                               const OntologyTree& dx_tree,
                                               const OntologyTree& rx_tree) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open record file '" + path + "'");
  }
  std::vector<PatientRecord> out;
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) {
    throw ValidationError(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("pid") || !j.contains("visits")) {
      fail("expected an object with 'pid' and 'visits'");
    }
    if (!j["pid"].is_string() || !j["visits"].is_array() || j["visits"].empty()) {
      fail("'pid' must be a string and 'visits' a non-empty array");
    }
    PatientRecord rec;
    rec.pid = j["pid"].get<std::string>();
    for (const auto& jv : j["visits"]) {
      if (!jv.is_object() || !jv.contains("dx") || !jv.contains("rx") || !jv["dx"].is_array() ||
          !jv["rx"].is_array()) {
        fail("each visit must be an object with 'dx' and 'rx' arrays");
      }
      std::vector<std::string> dx_labels, rx_labels;
      for (const auto& c : jv["dx"]) {
        if (!c.is_string()) {
          fail("'dx' entries must be strings");
        }
        dx_labels.push_back(c.get<std::string>());
      }
      for (const auto& c : jv["rx"]) {
        if (!c.is_string()) {
          fail("'rx' entries must be strings");
        }
        rx_labels.push_back(c.get<std::string>());
      }
      try {
        rec.visits.push_back(make_visit(dx_labels, rx_labels, dx_tree, rx_tree));
      } catch (const ValidationError& e) {
        fail(e.what());
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void save_records(const std::string& path, const std::vector<PatientRecord>& records,
                         const OntologyTree& dx_tree, const OntologyTree& rx_tree) {
  std::ofstream out(path);
  if (!out) {
    throw ValidationError("cannot write record file '" + path + "'");
  }
  for (const auto& rec : records) {
    nlohmann::json j;
    j["pid"] = rec.pid;
    j["visits"] = nlohmann::json::array();
    for (const auto& v : rec.visits) {
      nlohmann::json jv;
      jv["dx"] = nlohmann::json::array();
      for (const std::size_t c : v.dx) {
        jv["dx"].push_back(dx_tree.label(c));
      }
      jv["rx"] = nlohmann::json::array();
      for (const std::size_t c : v.rx) {
        jv["rx"].push_back(rx_tree.label(c));
      }
      j["visits"].push_back(std::move(jv));
    }
    out << j.dump() << '\n';
  }
  if (!out) {
    throw ValidationError("write failed for record file '" + path + "'");
  }
}

}  // namespace gbert
