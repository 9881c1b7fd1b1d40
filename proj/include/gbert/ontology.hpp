#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gbert/error.hpp"

namespace gbert {

enum class CodeType { kDiagnosis, kMedication };

inline const char* code_type_name(CodeType t) {
  return t == CodeType::kDiagnosis ? "diagnosis" : "medication";
}

/// Rooted tree of codes. Node 0 is always the root; the other indices follow
/// first appearance in the source file, which keeps loads deterministic.
/// Immutable after construction.
class OntologyTree {
 public:
  OntologyTree(CodeType type, std::vector<std::string> labels, std::vector<int> parent)
      : type_(type), labels_(std::move(labels)), parent_(std::move(parent)) {
    validate_and_index();
  }

  CodeType type() const { return type_; }
  std::size_t size() const { return labels_.size(); }
  const std::string& label(std::size_t node) const {
    check_node(node);
    return labels_[node];
  }
  int parent(std::size_t node) const {
    check_node(node);
    return parent_[node];
  }
  bool is_leaf(std::size_t node) const {
    check_node(node);
    return children_[node].empty();
  }
  const std::vector<std::size_t>& leaves() const { return leaves_; }

  /// Direct children, in node-index order.
  const std::vector<std::size_t>& ch(std::size_t node) const {
    check_node(node);
    return children_[node];
  }

  /// Strict ancestors, nearest parent first, root last. Empty for the root.
  std::vector<std::size_t> pa(std::size_t node) const {
    check_node(node);
    std::vector<std::size_t> out;
    int p = parent_[node];
    while (p >= 0) {
      out.push_back(static_cast<std::size_t>(p));
      p = parent_[static_cast<std::size_t>(p)];
    }
    return out;
  }

  std::size_t depth(std::size_t node) const { return pa(node).size(); }

  /// Node index for a code label; throws ValidationError for unknown codes.
  std::size_t node_of(const std::string& label) const {
    const auto it = index_.find(label);
    if (it == index_.end()) {
      throw ValidationError("unknown " + std::string(code_type_name(type_)) + " code '" + label +
                            "'");
    }
    return it->second;
  }

  bool has_code(const std::string& label) const { return index_.count(label) != 0; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
      throw ValidationError("cannot write ontology file '" + path + "'");
    }
    out << "#root " << labels_[0] << "\n";
    for (std::size_t i = 1; i < labels_.size(); ++i) {
      out << labels_[i] << '\t' << labels_[static_cast<std::size_t>(parent_[i])] << '\n';
    }
    if (!out) {
      throw ValidationError("write failed for ontology file '" + path + "'");
    }
  }

  static OntologyTree load(const std::string& path, CodeType type) {
    std::ifstream in(path);
    if (!in) {
      throw ValidationError("cannot open ontology file '" + path + "'");
    }
    std::string line;
    std::size_t line_no = 0;
    std::string root_label;
    bool have_root = false;
    std::vector<std::string> labels;
    std::vector<int> parent;
    std::unordered_map<std::string, std::size_t> index;
    const auto intern = [&](const std::string& lbl) {
      const auto it = index.find(lbl);
      if (it != index.end()) {
        return it->second;
      }
      const std::size_t id = labels.size();
      labels.push_back(lbl);
      parent.push_back(-2);  // -2 = not yet assigned
      index.emplace(lbl, id);
      return id;
    };
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') {
        line.pop_back();
      }
      if (line.empty()) {
        continue;
      }
      if (line[0] == '#') {
        std::istringstream hs(line);
        std::string directive, code;
        hs >> directive >> code;
        if (directive == "#root") {
          if (have_root) {
            throw ValidationError(path + ":" + std::to_string(line_no) +
                                  ": duplicate #root declaration");
          }
          if (code.empty()) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": #root without a code");
          }
          have_root = true;
          root_label = code;
          const std::size_t r = intern(code);
          if (r != 0) {
            throw ValidationError(path + ":" + std::to_string(line_no) +
                                  ": #root must precede edge lines");
          }
          parent[0] = -1;
        }
        continue;  // other # lines are comments
      }
      if (!have_root) {
        throw ValidationError(path + ":" + std::to_string(line_no) +
                              ": missing root: first non-comment line must follow a #root header");
      }
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
        throw ValidationError(path + ":" + std::to_string(line_no) +
                              ": expected 'child<TAB>parent'");
      }
      const std::string child_lbl = line.substr(0, tab);
      const std::string parent_lbl = line.substr(tab + 1);
      const std::size_t c = intern(child_lbl);
      const std::size_t p = intern(parent_lbl);
      if (c == 0) {
        throw ValidationError(path + ":" + std::to_string(line_no) + ": duplicate parent: root '" +
                              child_lbl + "' cannot have a parent");
      }
      if (parent[c] != -2) {
        throw ValidationError(path + ":" + std::to_string(line_no) + ": duplicate parent for '" +
                              child_lbl + "'");
      }
      if (c == p) {
        throw ValidationError(path + ":" + std::to_string(line_no) + ": cycle: '" + child_lbl +
                              "' is its own parent");
      }
      parent[c] = static_cast<int>(p);
    }
    if (!have_root) {
      throw ValidationError(path + ": missing root: no #root header found");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (parent[i] == -2) {
        throw ValidationError(path + ": orphan node '" + labels[i] +
                              "': referenced as a parent but never attached to the tree");
      }
    }
    return OntologyTree(type, std::move(labels), std::move(parent));
  }

 private:
  CodeType type_;
  std::vector<std::string> labels_;
  std::vector<int> parent_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::size_t> leaves_;
  std::unordered_map<std::string, std::size_t> index_;

  void check_node(std::size_t node) const {
    if (node >= labels_.size()) {
      throw ValidationError("ontology node index " + std::to_string(node) + " out of range (" +
                            std::to_string(labels_.size()) + " nodes)");
    }
  }

  void validate_and_index() {
    const std::size_t n = labels_.size();
    if (n == 0) {
      throw ValidationError("ontology: empty tree");
    }
    if (parent_.size() != n) {
      throw ValidationError("ontology: parent array size mismatch");
    }
    if (parent_[0] != -1) {
      throw ValidationError("ontology: node 0 must be the root");
    }
    children_.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      index_.emplace(labels_[i], i);
      if (i > 0) {
        if (parent_[i] < 0 || static_cast<std::size_t>(parent_[i]) >= n) {
          throw ValidationError("ontology: node '" + labels_[i] + "' has an invalid parent index");
        }
        children_[static_cast<std::size_t>(parent_[i])].push_back(i);
      }
    }
    if (index_.size() != n) {
      throw ValidationError("ontology: duplicate code labels");
    }
    // Cycle / reachability: hop to the root, bounded by node count.
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t hops = 0;
      int p = parent_[i];
      while (p >= 0) {
        if (++hops > n) {
          throw ValidationError("ontology: cycle detected at node '" + labels_[i] + "'");
        }
        p = parent_[static_cast<std::size_t>(p)];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (children_[i].empty()) {
        leaves_.push_back(i);
      }
    }
  }
};

}  // namespace gbert
