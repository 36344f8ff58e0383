#include "sgm/graph_matching.hpp"

#include <cmath>

#include "sgm/errors.hpp"
#include "sgm/kernels.hpp"

namespace sgm {

GmmParams GmmParams::init(const GraphDims& dims, const Ablation& ablation, std::mt19937_64& rng) {
  GmmParams p;
  p.dims = dims;
  p.ablation = ablation;
  if (!ablation.no_propagation)
    p.propagation = Mlp2::init(2 * dims.node + dims.edge, dims.prop_hidden, dims.prop, rng);
  const std::size_t in = p.update_input();
  p.update_weight = Tensor::randn({dims.update, in}, rng, std::sqrt(2.0f / static_cast<float>(in)), true);
  p.update_bias = Tensor::zeros({dims.update}, true);
  p.gate_weight =
      Tensor::randn({1, 2 * dims.update}, rng, std::sqrt(1.0f / static_cast<float>(2 * dims.update)), true);
  p.gate_bias = Tensor::zeros({1}, true);
  return p;
}

std::size_t GmmParams::update_input() const {
  return dims.node + (ablation.no_propagation ? 0 : dims.prop) + (ablation.no_interaction ? 0 : dims.node);
}

TensorList GmmParams::parameters() const {
  TensorList out;
  if (!ablation.no_propagation) propagation.append_to(out, "gmm.propagation");
  out.push_back({"gmm.update.weight", update_weight});
  out.push_back({"gmm.update.bias", update_bias});
  out.push_back({"gmm.gate.weight", gate_weight});
  out.push_back({"gmm.gate.bias", gate_bias});
  return out;
}

Tensor propagate(const SceneGraph& graph, const GmmParams& params) {
  if (params.ablation.no_propagation) throw ArgumentError("propagate: model was built without propagation");
  graph.check();
  const std::size_t m = graph.node_count, dn = params.dims.node, de = params.dims.edge;
  if (graph.nodes.dim(1) != dn || graph.edges.dim(1) != de)
    throw StructureError("propagate: graph widths " + std::to_string(graph.nodes.dim(1)) + "/" +
                         std::to_string(graph.edges.dim(1)) + " do not match the model");
  // The first layer splits over (e_m | e_n | d_mn). The output layer is affine,
  // so the neighbour mean is taken on the hidden activations before it.
  const Mlp2& mlp = params.propagation;
  Tensor from = linear(graph.nodes, slice_cols(mlp.w1, 0, dn), mlp.b1);
  Tensor to = linear(graph.nodes, slice_cols(mlp.w1, dn, dn));
  Tensor along = linear(graph.edges, slice_cols(mlp.w1, 2 * dn, de));
  Tensor hidden = relu(add(pair_sum(from, to, m), along));
  return linear(group_mean(hidden, m), mlp.w2, mlp.b2);
}

std::pair<Tensor, Tensor> interact(const Tensor& nodes_a, const Tensor& nodes_b, std::size_t node_count) {
  if (!nodes_a.defined() || !nodes_b.defined() || nodes_a.rank() != 2 || nodes_b.rank() != 2 ||
      nodes_a.dim(1) != nodes_b.dim(1))
    throw StructureError("interact: node embeddings of the two graphs differ in width");
  return cross_attention(nodes_a, nodes_b, node_count);
}

namespace {

std::size_t intra_offset(const GmmParams& p) { return p.dims.node; }
std::size_t cross_offset(const GmmParams& p) {
  return p.dims.node + (p.ablation.no_propagation ? 0 : p.dims.prop);
}

void require_rows(const Tensor& t, std::size_t rows, const char* what) {
  if (!t.defined() || t.rank() != 2 || t.dim(0) != rows)
    throw StructureError(std::string("update: ") + what + " has " +
                         (t.defined() ? to_string(t.shape()) : std::string("no value")) + ", expected " +
                         std::to_string(rows) + " rows");
}

Tensor cross_term(const Tensor& cross, const GmmParams& p) {
  return linear(cross, slice_cols(p.update_weight, cross_offset(p), p.dims.node));
}

}  // namespace

Tensor update_base(const Tensor& nodes, const Tensor& intra, const GmmParams& params) {
  Tensor base = linear(nodes, slice_cols(params.update_weight, 0, params.dims.node), params.update_bias);
  if (!params.ablation.no_propagation) {
    require_rows(intra, nodes.dim(0), "intra representation");
    base = add(base, linear(intra, slice_cols(params.update_weight, intra_offset(params), params.dims.prop)));
  }
  return base;
}

Tensor update(const Tensor& nodes, const Tensor& intra, const Tensor& cross, const GmmParams& params) {
  Tensor pre = update_base(nodes, intra, params);
  if (!params.ablation.no_interaction) {
    require_rows(cross, nodes.dim(0), "cross representation");
    pre = add(pre, cross_term(cross, params));
  }
  return relu(pre);
}

Tensor aggregate(const Tensor& updated, std::size_t node_count, const GmmParams& params) {
  const std::size_t du = params.dims.update;
  Tensor graph_mean = group_mean(updated, node_count);
  Tensor logit = add(linear(updated, slice_cols(params.gate_weight, 0, du), params.gate_bias),
                     repeat_rows(linear(graph_mean, slice_cols(params.gate_weight, du, du)), node_count));
  return group_sum(mul_rows(updated, sigmoid(logit)), node_count);
}

GraphEncoding encode_graph(const SceneGraph& graph, const GmmParams& params) {
  graph.check();
  if (graph.nodes.dim(1) != params.dims.node)
    throw StructureError("encode_graph: node width " + std::to_string(graph.nodes.dim(1)) + " does not match " +
                         std::to_string(params.dims.node));
  GraphEncoding enc;
  enc.nodes = graph.nodes;
  enc.node_count = graph.node_count;
  Tensor intra;
  if (!params.ablation.no_propagation) intra = propagate(graph, params);
  enc.base = update_base(graph.nodes, intra, params);
  return enc;
}

Tensor score_pairs(const GraphEncoding& a, std::span<const std::size_t> index_a, const GraphEncoding& b,
                   std::span<const std::size_t> index_b, const GmmParams& params, MatchDiagnostics* diagnostics) {
  if (index_a.size() != index_b.size()) throw ArgumentError("score_pairs: index lists differ in length");
  if (index_a.empty()) throw ArgumentError("score_pairs: no pairs");
  if (a.node_count != b.node_count)
    throw StructureError("score_pairs: graphs have " + std::to_string(a.node_count) + " and " +
                         std::to_string(b.node_count) + " nodes");
  const std::size_t m = a.node_count;
  for (std::size_t i : index_a)
    if (i >= a.graphs()) throw ArgumentError("score_pairs: index " + std::to_string(i) + " out of range");
  for (std::size_t i : index_b)
    if (i >= b.graphs()) throw ArgumentError("score_pairs: index " + std::to_string(i) + " out of range");

  Tensor pre_a = gather_groups(a.base, index_a, m);
  Tensor pre_b = gather_groups(b.base, index_b, m);
  if (!params.ablation.no_interaction) {
    auto [cross_a, cross_b] = interact(gather_groups(a.nodes, index_a, m), gather_groups(b.nodes, index_b, m), m);
    pre_a = add(pre_a, cross_term(cross_a, params));
    pre_b = add(pre_b, cross_term(cross_b, params));
  }
  Tensor ra = aggregate(relu(pre_a), m, params);
  Tensor rb = aggregate(relu(pre_b), m, params);
  std::size_t degenerate = 0;
  Tensor score = affine(row_cosine(ra, rb, &degenerate), 0.5f, 0.5f);
  if (diagnostics && degenerate) {
    diagnostics->degenerate_pairs += degenerate;
    diagnostics->warnings.push_back(std::to_string(degenerate) +
                                    " pair(s) had a zero-norm graph representation; scored 0.5");
  }
  return score;
}

float match(const SceneGraph& a, const SceneGraph& b, const GmmParams& params, MatchDiagnostics* diagnostics) {
  if (a.graphs() != 1 || b.graphs() != 1) throw ArgumentError("match: expected single graphs");
  const std::size_t zero[1] = {0};
  return score_pairs(encode_graph(a, params), zero, encode_graph(b, params), zero, params, diagnostics).item();
}

Tensor export_matching_weights(const SceneGraph& support, const SceneGraph& query) {
  support.check();
  query.check();
  if (support.graphs() != 1 || query.graphs() != 1) throw ArgumentError("export_matching_weights: expected single graphs");
  if (support.nodes.dim(1) != query.nodes.dim(1))
    throw StructureError("export_matching_weights: node widths differ");
  Tensor out({support.node_count, query.node_count});
  auto w = out.mat();
  w.noalias() = support.nodes.mat() * query.nodes.mat().transpose();
  kernels::softmax_rows(w);
  return out;
}

}  // namespace sgm
