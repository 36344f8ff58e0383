#pragma once

// Graph matching: intra-graph propagation, cross-graph attention, node update,
// gated aggregation and a cosine score scaled to [0, 1].
//
// Every layer works on G graphs stacked as row blocks of M rows (see
// SceneGraph). Pair scoring gathers the blocks named by two index lists, so one
// call scores a whole episode.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgm/scene_graph.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

struct Ablation {
  bool no_propagation = false;
  bool no_interaction = false;
  bool operator==(const Ablation&) const = default;
};

struct GmmParams {
  GraphDims dims;
  Ablation ablation;
  Mlp2 propagation;     // (e_m | e_n | d_mn) -> prop_hidden -> prop; absent without propagation
  Tensor update_weight;  // update x (node [+ prop] [+ node])
  Tensor update_bias;
  Tensor gate_weight;  // 1 x (2 * update): (node | graph mean) -> gate logit
  Tensor gate_bias;

  static GmmParams init(const GraphDims& dims, const Ablation& ablation, std::mt19937_64& rng);
  std::size_t update_input() const;
  TensorList parameters() const;
};

// Mean over all n (including m) of the propagation MLP on (e_m | e_n | d_mn).
// Returns [G*M x prop].
Tensor propagate(const SceneGraph& graph, const GmmParams& params);

// Dot-product attention between paired blocks of node rows. The first output
// holds, for each row of `a`, the softmax(over b)-weighted mean of b's rows;
// the second the converse with the softmax taken over a.
std::pair<Tensor, Tensor> interact(const Tensor& nodes_a, const Tensor& nodes_b, std::size_t node_count);

// Pair-independent part of the update layer: W_e e + W_i intra + b.
Tensor update_base(const Tensor& nodes, const Tensor& intra, const GmmParams& params);
// ReLU(W [e | intra | cross] + b). `intra` or `cross` are ignored when the
// corresponding layer is ablated.
Tensor update(const Tensor& nodes, const Tensor& intra, const Tensor& cross, const GmmParams& params);

// Gated sum of node rows per block: r = sum_m sigmoid(w . (u_m | mean u)) u_m.
// Returns [G x update].
Tensor aggregate(const Tensor& updated, std::size_t node_count, const GmmParams& params);

// Per-graph quantities that do not depend on the matched partner.
struct GraphEncoding {
  Tensor nodes;  // [G*M x node]
  Tensor base;   // [G*M x update], pre-activation
  std::size_t node_count = 0;

  std::size_t graphs() const { return node_count ? nodes.dim(0) / node_count : 0; }
};

GraphEncoding encode_graph(const SceneGraph& graph, const GmmParams& params);

struct MatchDiagnostics {
  std::size_t degenerate_pairs = 0;  // zero-norm graph representation, scored 0.5
  std::vector<std::string> warnings;
};

// Scores pairs (a[index_a[p]], b[index_b[p]]) -> [P] in [0, 1].
Tensor score_pairs(const GraphEncoding& a, std::span<const std::size_t> index_a, const GraphEncoding& b,
                   std::span<const std::size_t> index_b, const GmmParams& params,
                   MatchDiagnostics* diagnostics = nullptr);

// Similarity of two single graphs.
float match(const SceneGraph& a, const SceneGraph& b, const GmmParams& params,
            MatchDiagnostics* diagnostics = nullptr);

// Row-softmax attention weights from support nodes (rows) to query nodes.
Tensor export_matching_weights(const SceneGraph& support, const SceneGraph& query);

}  // namespace sgm
