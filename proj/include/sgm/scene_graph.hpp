#pragma once

// Graph construction: a spatial feature map becomes a scene graph with one node
// per spatial position and one position-aware edge per ordered node pair.

#include <cstddef>
#include <random>
#include <span>
#include <string>

#include "sgm/ops.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

// Layer widths shared by graph construction and matching. Defaults give the
// full-size model; tests shrink them.
struct GraphDims {
  std::size_t channels = 256;  // backbone output channels C
  std::size_t grid = 4;        // spatial side; M = grid * grid
  std::size_t node_hidden = 256;
  std::size_t node = 128;
  std::size_t edge_hidden = 256;
  std::size_t edge = 64;
  std::size_t prop_hidden = 512;
  std::size_t prop = 512;
  std::size_t update = 256;

  std::size_t nodes() const { return grid * grid; }
  std::size_t edge_input() const { return 2 * channels + 2 * nodes(); }
  bool operator==(const GraphDims&) const = default;

  static GraphDims mini();
};

// Linear -> ReLU -> Linear.
struct Mlp2 {
  Tensor w1, b1, w2, b2;

  static Mlp2 init(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  void append_to(TensorList& list, const std::string& prefix) const;
};

struct GcmParams {
  GraphDims dims;
  Tensor encoder_kernel;  // C x C x 3 x 3
  Tensor encoder_gamma;
  Tensor encoder_beta;
  BatchNormStats encoder_stats;
  Mlp2 node;  // C -> node_hidden -> node
  Mlp2 edge;  // (l_m | onehot m | l_n | onehot n) -> edge_hidden -> edge

  static GcmParams init(const GraphDims& dims, std::mt19937_64& rng);
  TensorList parameters() const;
  // Parameters plus encoder running statistics.
  TensorList state() const;
};

// G graphs stacked as row blocks: nodes [G*M x node], edges [G*M*M x edge]
// with edge (m, n) of graph g at row (g*M + m)*M + n.
struct SceneGraph {
  Tensor nodes;
  Tensor edges;
  std::size_t node_count = 0;

  std::size_t graphs() const { return node_count ? nodes.dim(0) / node_count : 0; }
  // Copy of graph g as a single-graph SceneGraph (differentiable).
  SceneGraph select(std::size_t g) const;
  // Throws StructureError when nodes and edges disagree on M.
  void check() const;
};

// Builds one graph per spatial map. Input is C x h x w or G x C x h x w with
// h * w = M. Uses the encoder's running statistics.
SceneGraph build_graph(const Tensor& spatial, const GcmParams& params);
// Batch-statistics variant that also updates the encoder running statistics.
SceneGraph build_graph_train(const Tensor& spatial, GcmParams& params);

// Elementwise mean of support maps. Throws ArgumentError when empty.
Tensor prototype_map(std::span<const Tensor> support);
SceneGraph class_prototype_graph(std::span<const Tensor> support, const GcmParams& params);

}  // namespace sgm
