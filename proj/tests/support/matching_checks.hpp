#pragma once

// Property and oracle sweeps over random graph pairs. Each returns the worst
// observed deviation so callers can compare against their own tolerance.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "op_suite.hpp"
#include "oracles.hpp"
#include "sgm/graph_matching.hpp"

namespace sgm::testing {

inline SceneGraph random_graph(const GraphDims& d, std::mt19937_64& rng) {
  const std::size_t m = d.nodes();
  return {Tensor::randn({m, d.node}, rng), Tensor::randn({m * m, d.edge}, rng), m};
}

// Same graph with node i moved to position perm[i].
inline SceneGraph permute_graph(const SceneGraph& g, const std::vector<std::size_t>& perm) {
  const std::size_t m = g.node_count, dn = g.nodes.dim(1), de = g.edges.dim(1);
  Tensor nodes({m, dn}), edges({m * m, de});
  for (std::size_t i = 0; i < m; ++i) {
    nodes.mat().row(static_cast<Eigen::Index>(perm[i])) = g.nodes.mat().row(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < m; ++j)
      edges.mat().row(static_cast<Eigen::Index>(perm[i] * m + perm[j])) =
          g.edges.mat().row(static_cast<Eigen::Index>(i * m + j));
  }
  return {nodes, edges, m};
}

inline Tensor append_ones(const Tensor& x) {
  Tensor out({x.dim(0), x.dim(1) + 1});
  out.mat().leftCols(x.dim(1)) = x.mat();
  out.mat().col(static_cast<Eigen::Index>(x.dim(1))).setOnes();
  return out;
}

struct InvariantReport {
  std::size_t trials = 0;
  std::size_t degenerate = 0;  // self-matches with a zero-norm representation
  double self_match = 0.0;     // max |match(a, a) - 1|
  double symmetry = 0.0;       // max |match(a, b) - match(b, a)|
  double range = 0.0;          // max distance of any score outside [0, 1]
  double attention_sums = 0.0;  // max |row or column sum - 1|
  double hull = 0.0;           // max excursion of cross rows beyond the partner's coordinate range
  double aggregation_perm = 0.0;
  double graph_perm = 0.0;  // score change when one graph's nodes are relabelled
};

inline InvariantReport matching_invariants(std::size_t trials, std::uint64_t seed) {
  InvariantReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    std::mt19937_64 rng(seed * 1000003u + t);
    GraphDims d = GraphDims::mini();
    d.grid = 2 + t % 3;
    const Ablation ablation{t % 7 == 5, t % 7 == 6};
    std::mt19937_64 prng(rng());
    GmmParams p = GmmParams::init(d, ablation, prng);
    for (auto& np : p.parameters())
      if (np.tensor.rank() == 1) np.tensor.vec() = Tensor::uniform(np.tensor.shape(), prng, -0.2f, 0.2f).vec();
    SceneGraph a = random_graph(d, rng), b = random_graph(d, rng);
    const std::size_t m = d.nodes();
    ++rep.trials;

    MatchDiagnostics diag;
    const double self = match(a, a, p, &diag);
    if (diag.degenerate_pairs) ++rep.degenerate;
    else rep.self_match = std::max(rep.self_match, std::abs(self - 1.0));
    const double ab = match(a, b, p), ba = match(b, a, p);
    rep.symmetry = std::max(rep.symmetry, std::abs(ab - ba));
    for (double s : {self, ab, ba}) rep.range = std::max({rep.range, -s, s - 1.0});

    // A shared constant column shifts every logit equally, so the extra output
    // column is exactly the attention weight sum.
    auto [ca, cb] = interact(append_ones(a.nodes), append_ones(b.nodes), m);
    for (std::size_t i = 0; i < m; ++i) {
      rep.attention_sums = std::max(rep.attention_sums, std::abs(ca.mat()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d.node)) - 1.0));
      rep.attention_sums = std::max(rep.attention_sums, std::abs(cb.mat()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d.node)) - 1.0));
    }
    auto [xa, xb] = interact(a.nodes, b.nodes, m);
    auto hull = [&](const Tensor& cross, const Tensor& partner) {
      const Eigen::RowVectorXf lo = partner.mat().colwise().minCoeff(), hi = partner.mat().colwise().maxCoeff();
      for (Eigen::Index i = 0; i < cross.mat().rows(); ++i)
        for (Eigen::Index k = 0; k < cross.mat().cols(); ++k) {
          const double v = cross.mat()(i, k);
          rep.hull = std::max({rep.hull, static_cast<double>(lo(k)) - v, v - static_cast<double>(hi(k))});
        }
    };
    hull(xa, b.nodes);
    hull(xb, a.nodes);

    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor u = Tensor::uniform({m, d.update}, rng, 0.0f, 1.0f);
    Tensor up({m, d.update});
    for (std::size_t i = 0; i < m; ++i)
      up.mat().row(static_cast<Eigen::Index>(perm[i])) = u.mat().row(static_cast<Eigen::Index>(i));
    Tensor r1 = aggregate(u, m, p), r2 = aggregate(up, m, p);
    rep.aggregation_perm = std::max(rep.aggregation_perm, static_cast<double>((r1.vec() - r2.vec()).cwiseAbs().maxCoeff()));

    const double permuted = match(permute_graph(a, perm), b, p);
    rep.graph_perm = std::max(rep.graph_perm, std::abs(permuted - ab));
  }
  return rep;
}

struct OracleReport {
  std::size_t trials = 0;
  double graph = 0.0;  // construction: nodes and edges
  double propagation = 0.0;
  double interaction = 0.0;
  double update = 0.0;
  double aggregation = 0.0;
  double score = 0.0;

  double worst() const { return std::max({graph, propagation, interaction, update, aggregation, score}); }
};

// Fused layers against the loop oracles on mini models with M = 4, fed with
// the library's own upstream outputs so each layer is compared in isolation,
// plus the composed score against the fully independent oracle pipeline.
inline OracleReport oracle_equivalence(std::size_t trials, std::uint64_t seed) {
  OracleReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    const Ablation ablation{t % 5 == 3, t % 5 == 4};
    MiniModel mm = mini_model(seed * 7919u + t, ablation);
    const GraphDims& d = mm.gcm.dims;
    const std::size_t m = d.nodes();
    std::mt19937_64 rng(seed * 31u + t);
    Tensor sa = Tensor::uniform({d.channels, d.grid, d.grid}, rng, 0.0f, 1.0f);
    Tensor sb = Tensor::uniform({d.channels, d.grid, d.grid}, rng, 0.0f, 1.0f);
    ++rep.trials;

    SceneGraph ga = build_graph(sa, mm.gcm), gb = build_graph(sb, mm.gcm);
    oracle::Graph oa = oracle::build_graph(sa, mm.gcm), ob = oracle::build_graph(sb, mm.gcm);
    rep.graph = std::max(rep.graph, oracle::max_diff(ga.nodes, oa.nodes));
    std::vector<oracle::Vec> flat;
    for (const auto& row : oa.edges) flat.insert(flat.end(), row.begin(), row.end());
    rep.graph = std::max(rep.graph, oracle::max_diff(ga.edges, flat));

    // Layer by layer on the library's graph.
    auto rows_of = [](const Tensor& x) {
      std::vector<oracle::Vec> out;
      const oracle::Mat mat = oracle::to_mat(x);
      for (Eigen::Index r = 0; r < mat.rows(); ++r) out.push_back(mat.row(r).transpose());
      return out;
    };
    auto as_graph = [&](const SceneGraph& g) {
      oracle::Graph og;
      og.nodes = rows_of(g.nodes);
      auto e = rows_of(g.edges);
      og.edges.assign(m, std::vector<oracle::Vec>(m));
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) og.edges[i][j] = e[i * m + j];
      return og;
    };
    const oracle::Graph fa = as_graph(ga), fb = as_graph(gb);

    Tensor intra_a, intra_b;
    std::vector<oracle::Vec> oi_a, oi_b;
    if (!ablation.no_propagation) {
      intra_a = propagate(ga, mm.gmm);
      intra_b = propagate(gb, mm.gmm);
      oi_a = oracle::propagate(fa, mm.gmm);
      rep.propagation = std::max(rep.propagation, oracle::max_diff(intra_a, oi_a));
      rep.propagation = std::max(rep.propagation, oracle::max_diff(intra_b, oracle::propagate(fb, mm.gmm)));
      oi_a = rows_of(intra_a);
      oi_b = rows_of(intra_b);
    }
    Tensor cross_a, cross_b;
    std::vector<oracle::Vec> oc_a, oc_b;
    if (!ablation.no_interaction) {
      std::tie(cross_a, cross_b) = interact(ga.nodes, gb.nodes, m);
      auto [xa, xb] = oracle::interact(fa.nodes, fb.nodes);
      rep.interaction = std::max({rep.interaction, oracle::max_diff(cross_a, xa), oracle::max_diff(cross_b, xb)});
      oc_a = rows_of(cross_a);
      oc_b = rows_of(cross_b);
    }
    Tensor ua = update(ga.nodes, intra_a, cross_a, mm.gmm), ub = update(gb.nodes, intra_b, cross_b, mm.gmm);
    rep.update = std::max({rep.update, oracle::max_diff(ua, oracle::update(fa.nodes, oi_a, oc_a, mm.gmm)),
                           oracle::max_diff(ub, oracle::update(fb.nodes, oi_b, oc_b, mm.gmm))});
    Tensor ra = aggregate(ua, m, mm.gmm);
    rep.aggregation = std::max(rep.aggregation, oracle::max_diff(ra, {oracle::aggregate(rows_of(ua), mm.gmm)}));

    // End to end: library score vs the independent pipeline from the raw maps.
    const double fused = match(ga, gb, mm.gmm);
    const double expected = oracle::match(oa, ob, mm.gmm).score;
    rep.score = std::max(rep.score, std::abs(fused - expected));
  }
  return rep;
}

}  // namespace sgm::testing
