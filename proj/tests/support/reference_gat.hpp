#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gbert/ontology.hpp"

namespace testsupport {

// Straight-line reimplementation of the graph-attention equations with plain
// loops over std::vector<double>. No tape, no Eigen, no shared code with the
// library path; used as the independent route in dual-route checks.

struct RefHead {
  std::size_t m = 0;
  std::size_t in_dim = 0;
  std::vector<double> W;  // row-major (m, in_dim)
  std::vector<double> a;  // (2m)
};

inline std::vector<double> ref_project(const RefHead& h, const std::vector<double>& x) {
  std::vector<double> out(h.m, 0.0);
  for (std::size_t i = 0; i < h.m; ++i) {
    for (std::size_t j = 0; j < h.in_dim; ++j) {
      out[i] += h.W[i * h.in_dim + j] * x[j];
    }
  }
  return out;
}

inline double ref_leaky(double x, double slope) { return x < 0.0 ? slope * x : x; }

// alpha_j = softmax_j(LeakyReLU(a^T [W h_c || W h_j])) over the neighborhood
// rows (center first).
inline std::vector<double> ref_attention(const std::vector<std::vector<double>>& nbhd,
                                         const RefHead& h, double attn_slope) {
  const std::vector<double> pc = ref_project(h, nbhd[0]);
  std::vector<double> logits(nbhd.size(), 0.0);
  for (std::size_t j = 0; j < nbhd.size(); ++j) {
    const std::vector<double> pj = ref_project(h, nbhd[j]);
    double e = 0.0;
    for (std::size_t i = 0; i < h.m; ++i) {
      e += h.a[i] * pc[i];
    }
    for (std::size_t i = 0; i < h.m; ++i) {
      e += h.a[h.m + i] * pj[i];
    }
    logits[j] = ref_leaky(e, attn_slope);
  }
  double denom = 0.0;
  for (const double l : logits) {
    denom += std::exp(l);
  }
  std::vector<double> alpha(nbhd.size());
  for (std::size_t j = 0; j < nbhd.size(); ++j) {
    alpha[j] = std::exp(logits[j]) / denom;
  }
  return alpha;
}

// Concatenation over heads of act(sum_j alpha_j W h_j).
inline std::vector<double> ref_aggregate(const std::vector<std::vector<double>>& nbhd,
                                         const std::vector<RefHead>& heads, double attn_slope,
                                         double act_slope) {
  std::vector<double> out;
  for (const RefHead& h : heads) {
    const std::vector<double> alpha = ref_attention(nbhd, h, attn_slope);
    std::vector<double> mixed(h.m, 0.0);
    for (std::size_t j = 0; j < nbhd.size(); ++j) {
      const std::vector<double> pj = ref_project(h, nbhd[j]);
      for (std::size_t i = 0; i < h.m; ++i) {
        mixed[i] += alpha[j] * pj[i];
      }
    }
    for (std::size_t i = 0; i < h.m; ++i) {
      out.push_back(ref_leaky(mixed[i], act_slope));
    }
  }
  return out;
}

// Full two-stage pass. `we` holds one row per tree node; returns one row per
// leaf in tree.leaves() order.
inline std::vector<std::vector<double>> ref_two_stage(const gbert::OntologyTree& tree,
                                                      const std::vector<std::vector<double>>& we,
                                                      const std::vector<RefHead>& stage1,
                                                      const std::vector<RefHead>& stage2,
                                                      double attn_slope, double act_slope) {
  std::vector<std::vector<double>> h_e(tree.size());
  for (std::size_t c = 0; c < tree.size(); ++c) {
    std::vector<std::vector<double>> nbhd{we[c]};
    for (const std::size_t child : tree.ch(c)) {
      nbhd.push_back(we[child]);
    }
    h_e[c] = ref_aggregate(nbhd, stage1, attn_slope, act_slope);
  }
  std::vector<std::vector<double>> out;
  for (const std::size_t leaf : tree.leaves()) {
    std::vector<std::vector<double>> nbhd{h_e[leaf]};
    for (const std::size_t anc : tree.pa(leaf)) {
      nbhd.push_back(h_e[anc]);
    }
    out.push_back(ref_aggregate(nbhd, stage2, attn_slope, act_slope));
  }
  return out;
}

}  // namespace testsupport
