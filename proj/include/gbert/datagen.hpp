#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/ontology.hpp"
#include "gbert/pretrain.hpp"
#include "gbert/records.hpp"
#include "gbert/rng.hpp"

namespace gbert {

/// Desk-scale synthetic corpus: latent condition clusters tie correlated
/// diagnosis and medication leaf pools together inside ontology subtrees, so
/// both the code hierarchy and the dx<->rx coupling carry learnable signal.
struct GeneratorConfig {
  std::size_t n_single = 2000;  // single-visit patients
  std::size_t n_multi = 500;    // multi-visit patients
  std::size_t dx_leaves = 120;
  std::size_t rx_leaves = 60;
  std::size_t depth = 4;  // tree levels including root and leaf level
  std::size_t n_clusters = 12;
  std::size_t cluster_dx_pool = 12;  // leaves per cluster pool
  std::size_t cluster_rx_pool = 8;
  double mean_dx_per_visit = 6.0;
  double mean_rx_per_visit = 5.0;
  double extra_visit_mean = 0.36;  // multi-visit count = 2 + Poisson(mean)
  std::size_t max_visits = 8;
  double noise_rate = 0.05;  // per-code chance of a uniformly random leaf
  std::uint64_t seed = 1;
};

struct Corpus {
  OntologyTree dx_tree;
  OntologyTree rx_tree;
  std::vector<PatientRecord> records;  // singles first, then multi-visit
};

struct CorpusSplit {
  std::vector<PatientRecord> train;  // multi-visit patients
  std::vector<PatientRecord> val;
  std::vector<PatientRecord> test;
  std::vector<Visit> pretrain_visits;  // singles + train visit slices
};

namespace detail {

/// Balanced tree: root, depth-2 internal levels with uniform fanout, leaves
/// attached round-robin to the deepest internal level.
inline OntologyTree synthetic_tree(CodeType type, std::size_t n_leaves, std::size_t depth,
                                   const std::string& prefix) {
  if (depth < 2) {
    throw ValidationError("ontology depth must be at least 2 (root plus leaves)");
  }
  if (n_leaves == 0) {
    throw ValidationError("ontology needs at least one leaf");
  }
  const std::size_t internal_levels = depth - 2;
  const double fan = internal_levels == 0
                         ? 1.0
                         : std::ceil(std::pow(static_cast<double>(n_leaves),
                                              1.0 / static_cast<double>(internal_levels + 1)));
  const std::size_t fanout = std::max<std::size_t>(2, static_cast<std::size_t>(fan));
  std::vector<std::string> labels{prefix + ".root"};
  std::vector<int> parent{-1};
  std::vector<std::size_t> level{0};  // node indices of the current level
  for (std::size_t l = 1; l <= internal_levels; ++l) {
    std::vector<std::size_t> next;
    for (const std::size_t p : level) {
      for (std::size_t k = 0; k < fanout; ++k) {
        labels.push_back(prefix + ".g" + std::to_string(l) + "." + std::to_string(next.size()));
        parent.push_back(static_cast<int>(p));
        next.push_back(labels.size() - 1);
      }
    }
    level = std::move(next);
  }
  for (std::size_t i = 0; i < n_leaves; ++i) {
    std::string num = std::to_string(i);
    while (num.size() < 3) {
      num.insert(num.begin(), '0');
    }
    labels.push_back(prefix + num);
    parent.push_back(static_cast<int>(level[i % level.size()]));
  }
  return OntologyTree(type, std::move(labels), std::move(parent));
}

inline std::vector<std::size_t> subtree_leaves(const OntologyTree& tree, std::size_t root) {
  std::vector<std::size_t> out;
  std::vector<std::size_t> stack{root};
  while (!stack.empty()) {
    const std::size_t node = stack.back();
    stack.pop_back();
    if (tree.is_leaf(node)) {
      out.push_back(node);
    } else {
      const auto& kids = tree.ch(node);
      stack.insert(stack.end(), kids.rbegin(), kids.rend());
    }
  }
  return out;
}

/// A cluster pool: pick a random anchor leaf, walk up its ancestors to the
/// smallest subtree holding enough leaves, sample the pool inside it.
inline std::vector<std::size_t> cluster_pool(const OntologyTree& tree, std::size_t pool_size,
                                             Rng& rng) {
  const auto& leaves = tree.leaves();
  if (pool_size > leaves.size()) {
    throw ValidationError("cluster pool of " + std::to_string(pool_size) +
                          " exceeds vocabulary of " + std::to_string(leaves.size()) + " leaves");
  }
  const std::size_t anchor = leaves[rng.uniform_index(leaves.size())];
  std::vector<std::size_t> candidates{anchor};
  for (const std::size_t up : tree.pa(anchor)) {
    candidates.push_back(up);
  }
  for (const std::size_t root : candidates) {
    std::vector<std::size_t> pool = subtree_leaves(tree, root);
    if (pool.size() >= pool_size) {
      rng.shuffle(pool);
      pool.resize(pool_size);
      return pool;
    }
  }
  throw ValidationError("unreachable: root subtree smaller than its own leaf count");
}

/// Draws ~`mean` codes for one visit: pool codes without replacement, with a
/// small chance per code of a uniformly random leaf instead.
inline std::vector<std::size_t> draw_codes(const std::vector<std::size_t>& pool,
                                           const std::vector<std::size_t>& leaves, double mean,
                                           double noise_rate, Rng& rng) {
  std::size_t n = std::max<std::size_t>(1, rng.poisson(mean));
  n = std::min(n, leaves.size());
  std::vector<std::size_t> shuffled = pool;
  rng.shuffle(shuffled);
  std::vector<std::size_t> codes;
  std::size_t next_pool = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (next_pool < shuffled.size() && !rng.bernoulli(noise_rate)) {
      codes.push_back(shuffled[next_pool++]);
    } else {
      codes.push_back(leaves[rng.uniform_index(leaves.size())]);
    }
  }
  return gbert::detail::canonical_codes(std::move(codes));
}

}  // namespace detail

inline void validate_config(const GeneratorConfig& config) {
  if (config.n_single == 0 && config.n_multi == 0) {
    throw ValidationError("generator needs at least one patient");
  }
  if (config.n_clusters == 0) {
    throw ValidationError("generator needs at least one cluster");
  }
  if (config.cluster_dx_pool > config.dx_leaves || config.cluster_rx_pool > config.rx_leaves) {
    throw ValidationError("cluster pool exceeds leaf vocabulary");
  }
  if (config.mean_dx_per_visit > static_cast<double>(config.dx_leaves) ||
      config.mean_rx_per_visit > static_cast<double>(config.rx_leaves)) {
    throw ValidationError("per-visit code mean exceeds leaf vocabulary");
  }
  if (config.mean_dx_per_visit <= 0.0 || config.mean_rx_per_visit <= 0.0) {
    throw ValidationError("per-visit code means must be positive");
  }
  if (config.max_visits < 2) {
    throw ValidationError("multi-visit cap must allow at least two visits");
  }
  if (config.noise_rate < 0.0 || config.noise_rate >= 1.0) {
    throw ValidationError("noise rate outside [0, 1)");
  }
}

inline Corpus generate_corpus(const GeneratorConfig& config) {
  validate_config(config);
  Corpus corpus{detail::synthetic_tree(CodeType::kDiagnosis, config.dx_leaves, config.depth, "D"),
                detail::synthetic_tree(CodeType::kMedication, config.rx_leaves, config.depth, "R"),
                {}};

  Rng cluster_rng(derive_seed(config.seed, "clusters"));
  std::vector<std::vector<std::size_t>> dx_pools, rx_pools;
  for (std::size_t k = 0; k < config.n_clusters; ++k) {
    dx_pools.push_back(detail::cluster_pool(corpus.dx_tree, config.cluster_dx_pool, cluster_rng));
    rx_pools.push_back(detail::cluster_pool(corpus.rx_tree, config.cluster_rx_pool, cluster_rng));
  }

  const auto make_patient = [&](const std::string& pid, bool multi, Rng& rng) {
    PatientRecord rec;
    rec.pid = pid;
    const std::size_t n_clusters = 1 + rng.uniform_index(3);
    std::vector<std::size_t> dx_pool, rx_pool;
    for (std::size_t c = 0; c < n_clusters; ++c) {
      const std::size_t k = rng.uniform_index(config.n_clusters);
      dx_pool.insert(dx_pool.end(), dx_pools[k].begin(), dx_pools[k].end());
      rx_pool.insert(rx_pool.end(), rx_pools[k].begin(), rx_pools[k].end());
    }
    dx_pool = gbert::detail::canonical_codes(std::move(dx_pool));
    rx_pool = gbert::detail::canonical_codes(std::move(rx_pool));
    std::size_t n_visits = 1;
    if (multi) {
      n_visits = std::min<std::size_t>(2 + rng.poisson(config.extra_visit_mean),
                                       config.max_visits);
    }
    for (std::size_t v = 0; v < n_visits; ++v) {
      Visit visit;
      visit.dx = detail::draw_codes(dx_pool, corpus.dx_tree.leaves(), config.mean_dx_per_visit,
                                    config.noise_rate, rng);
      visit.rx = detail::draw_codes(rx_pool, corpus.rx_tree.leaves(), config.mean_rx_per_visit,
                                    config.noise_rate, rng);
      rec.visits.push_back(std::move(visit));
    }
    return rec;
  };

  for (std::size_t i = 0; i < config.n_single; ++i) {
    const std::string pid = "s" + std::to_string(i);
    Rng rng(derive_seed(config.seed, "patient." + pid));
    corpus.records.push_back(make_patient(pid, false, rng));
  }
  for (std::size_t i = 0; i < config.n_multi; ++i) {
    const std::string pid = "m" + std::to_string(i);
    Rng rng(derive_seed(config.seed, "patient." + pid));
    corpus.records.push_back(make_patient(pid, true, rng));
  }
  return corpus;
}

/// Splits multi-visit patients by patient into train/validation/test and
/// assembles the pre-training visit pool from single-visit patients plus
/// visit slices of the TRAINING multi-visit patients only.
inline CorpusSplit split_corpus(const std::vector<PatientRecord>& records, double r_train,
                                double r_val, double r_test, std::uint64_t seed) {
  if (std::abs(r_train + r_val + r_test - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  if (r_train <= 0.0 || r_val < 0.0 || r_test < 0.0) {
    throw ValidationError("split ratios must be non-negative with positive train share");
  }
  std::vector<PatientRecord> singles;
  std::vector<PatientRecord> multi;
  for (const auto& r : records) {
    (r.multi_visit() ? multi : singles).push_back(r);
  }
  if (multi.size() < 3) {
    throw ValidationError("need at least 3 multi-visit patients to split, have " +
                          std::to_string(multi.size()));
  }
  std::vector<std::size_t> order(multi.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const std::size_t n = multi.size();
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                         std::floor(r_val * static_cast<double>(n))));
  const std::size_t n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(r_test * static_cast<double>(n))));
  if (n_val + n_test >= n) {
    throw ValidationError("split leaves no training patients");
  }
  const std::size_t n_train = n - n_val - n_test;
  CorpusSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const PatientRecord& r = multi[order[i]];
    if (i < n_train) {
      split.train.push_back(r);
    } else if (i < n_train + n_val) {
      split.val.push_back(r);
    } else {
      split.test.push_back(r);
    }
  }
  split.pretrain_visits = pretrain_pool(singles, split.train);
  return split;
}

}  // namespace gbert
