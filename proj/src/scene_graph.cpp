#include "sgm/scene_graph.hpp"

#include <cmath>
#include <vector>

#include "sgm/errors.hpp"

namespace sgm {

GraphDims GraphDims::mini() {
  GraphDims d;
  d.channels = 6;
  d.grid = 2;
  d.node_hidden = 7;
  d.node = 5;
  d.edge_hidden = 6;
  d.edge = 4;
  d.prop_hidden = 8;
  d.prop = 6;
  d.update = 5;
  return d;
}

Mlp2 Mlp2::init(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
  Mlp2 m;
  m.w1 = Tensor::randn({hidden, in}, rng, std::sqrt(2.0f / static_cast<float>(in)), true);
  m.b1 = Tensor::zeros({hidden}, true);
  m.w2 = Tensor::randn({out, hidden}, rng, std::sqrt(1.0f / static_cast<float>(hidden)), true);
  m.b2 = Tensor::zeros({out}, true);
  return m;
}

Tensor Mlp2::forward(const Tensor& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

void Mlp2::append_to(TensorList& list, const std::string& prefix) const {
  list.push_back({prefix + ".w1", w1});
  list.push_back({prefix + ".b1", b1});
  list.push_back({prefix + ".w2", w2});
  list.push_back({prefix + ".b2", b2});
}

GcmParams GcmParams::init(const GraphDims& dims, std::mt19937_64& rng) {
  GcmParams p;
  p.dims = dims;
  const std::size_t c = dims.channels;
  p.encoder_kernel = Tensor::randn({c, c, 3, 3}, rng, std::sqrt(2.0f / static_cast<float>(c * 9)), true);
  p.encoder_gamma = Tensor::full({c}, 1.0f, true);
  p.encoder_beta = Tensor::zeros({c}, true);
  p.encoder_stats = BatchNormStats::init(c);
  p.node = Mlp2::init(c, dims.node_hidden, dims.node, rng);
  p.edge = Mlp2::init(dims.edge_input(), dims.edge_hidden, dims.edge, rng);
  return p;
}

TensorList GcmParams::parameters() const {
  TensorList out{{"gcm.encoder.kernel", encoder_kernel},
                 {"gcm.encoder.gamma", encoder_gamma},
                 {"gcm.encoder.beta", encoder_beta}};
  node.append_to(out, "gcm.node");
  edge.append_to(out, "gcm.edge");
  return out;
}

TensorList GcmParams::state() const {
  TensorList out = parameters();
  out.push_back({"gcm.encoder.running_mean", encoder_stats.running_mean});
  out.push_back({"gcm.encoder.running_var", encoder_stats.running_var});
  return out;
}

void SceneGraph::check() const {
  if (!nodes.defined() || !edges.defined() || nodes.rank() != 2 || edges.rank() != 2 || node_count == 0)
    throw StructureError("scene graph: nodes and edges must be matrices with M > 0");
  const std::size_t g = nodes.dim(0) / node_count;
  if (nodes.dim(0) != g * node_count || edges.dim(0) != g * node_count * node_count)
    throw StructureError("scene graph: " + std::to_string(nodes.dim(0)) + " node rows and " +
                         std::to_string(edges.dim(0)) + " edge rows do not match M = " + std::to_string(node_count));
}

SceneGraph SceneGraph::select(std::size_t g) const {
  if (g >= graphs()) throw ArgumentError("scene graph: index " + std::to_string(g) + " out of range");
  const std::size_t idx[1] = {g};
  return {gather_groups(nodes, idx, node_count), gather_groups(edges, idx, node_count * node_count), node_count};
}

namespace {

SceneGraph encode_maps(const Tensor& spatial, const GcmParams& p, BatchNormStats& stats, Mode mode) {
  const GraphDims& d = p.dims;
  Tensor maps = spatial;
  if (spatial.defined() && spatial.rank() == 3)
    maps = reshape(spatial, {1, spatial.dim(0), spatial.dim(1), spatial.dim(2)});
  if (!maps.defined() || maps.rank() != 4 || maps.dim(1) != d.channels || maps.dim(2) != d.grid ||
      maps.dim(3) != d.grid)
    throw DimensionError("build_graph: expected spatial map " + std::to_string(d.channels) + " x " +
                         std::to_string(d.grid) + " x " + std::to_string(d.grid) + ", got " +
                         (spatial.defined() ? to_string(spatial.shape()) : std::string("undefined")));
  const std::size_t graphs = maps.dim(0), c = d.channels, m = d.nodes();

  Tensor x = relu(batchnorm2d(conv2d(maps, p.encoder_kernel), p.encoder_gamma, p.encoder_beta, stats, mode));
  Tensor local = map_to_rows(x);  // [G*M x C]

  SceneGraph g;
  g.node_count = m;
  g.nodes = p.node.forward(local);

  // The edge MLP's first layer splits over its four concatenated inputs; the
  // one-hot blocks reduce to picking weight columns by position.
  const Tensor& w1 = p.edge.w1;
  Tensor from = add(linear(local, slice_cols(w1, 0, c), p.edge.b1), tile_rows(transpose(slice_cols(w1, c, m)), graphs));
  Tensor to = add(linear(local, slice_cols(w1, c + m, c)), tile_rows(transpose(slice_cols(w1, 2 * c + m, m)), graphs));
  g.edges = linear(relu(pair_sum(from, to, m)), p.edge.w2, p.edge.b2);
  return g;
}

}  // namespace

SceneGraph build_graph(const Tensor& spatial, const GcmParams& params) {
  BatchNormStats stats = params.encoder_stats;
  return encode_maps(spatial, params, stats, Mode::Eval);
}

SceneGraph build_graph_train(const Tensor& spatial, GcmParams& params) {
  return encode_maps(spatial, params, params.encoder_stats, Mode::Train);
}

Tensor prototype_map(std::span<const Tensor> support) {
  if (support.empty()) throw ArgumentError("class prototype: empty support set");
  Tensor out = support.front().clone();
  out.set_requires_grad(false);
  for (std::size_t i = 1; i < support.size(); ++i) {
    if (support[i].shape() != out.shape())
      throw DimensionError("class prototype: support map " + std::to_string(i) + " has shape " +
                           to_string(support[i].shape()) + ", expected " + to_string(out.shape()));
    out.vec() += support[i].vec();
  }
  if (support.size() > 1) out.vec() /= static_cast<float>(support.size());
  return out;
}

SceneGraph class_prototype_graph(std::span<const Tensor> support, const GcmParams& params) {
  return build_graph(prototype_map(support), params);
}

}  // namespace sgm
