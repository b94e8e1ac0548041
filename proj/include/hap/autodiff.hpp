#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <variant>
#include <vector>

#include "hap/tensor.hpp"

namespace hap {

// Reverse-mode differentiation over a recorded (static) tape.
//
// Activations are column-major matrices laid out as (channels, batch *
// positions): column n * P + p holds position p of example n. Dense layers act
// per column, convolutions see P = H * W, attention sees P = sequence length.
//
// Hessian-vector products replay the tape with every value carried together
// with its directional derivative along v, then run the same backward pass on
// those pairs. The tangent of the resulting gradient is H v; no Hessian is
// formed. ReLU is treated as piecewise linear, so its second derivative at the
// kink is 0.

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
  kParameter,
  kConstant,
  kMatMul,
  kConv2d,
  kBiasAdd,
  kRelu,
  kAvgPool,
  kSoftmax,
  kCrossEntropy,
  kMse,
  kAdd,
  kMul,
  kReshape,
  kAttention,
};

const char* op_name(OpKind op);

// Stride-1 k x k convolution over (channels_in, N * height * width).
struct ConvGeometry {
  Index channels_in = 0;
  Index height = 0;
  Index width = 0;
  Index kernel = 3;
  bool same_padding = true;

  Index out_height() const { return same_padding ? height : height - kernel + 1; }
  Index out_width() const { return same_padding ? width : width - kernel + 1; }
};

struct PoolGeometry {
  Index height = 0;
  Index width = 0;
  Index kernel = 2;
};

// kFlatten: (C, N * P) -> (C * P, N), feature index c * P + p.
// kUnflatten: the inverse.
struct ReshapeSpec {
  enum class Kind : std::uint8_t { kFlatten, kUnflatten };
  Kind kind = Kind::kFlatten;
  Index channels = 0;
  Index positions = 0;
};

// Multi-head scaled dot-product attention on projected Q, K, V, each
// (heads * head_dim, N * seq_len). Head h owns rows [h * head_dim, (h+1) *
// head_dim).
struct AttentionGeometry {
  Index heads = 0;
  Index head_dim = 0;
  Index seq_len = 0;
};

struct Node {
  using Attributes = std::variant<std::monostate, std::size_t, ConvGeometry, PoolGeometry,
                                  ReshapeSpec, AttentionGeometry,
                                  std::shared_ptr<const Eigen::MatrixXd>>;
  OpKind op = OpKind::kConstant;
  std::vector<NodeId> inputs;
  Attributes attributes;
  bool requires_grad = false;
};

// Input features and targets, one example per row: inputs (N, F), targets
// (N, K). A one-hot target row selects a class for cross-entropy.
struct Batch {
  Tensor inputs;
  Tensor targets;

  Index size() const { return inputs.rank() == 0 ? 0 : inputs.dim(0); }
};

// Immutable record of one forward evaluation. Safe to share across threads.
class Tape {
 public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const Eigen::MatrixXd& value(NodeId id) const { return values_.at(static_cast<std::size_t>(id)); }
  const std::vector<Eigen::MatrixXd>& values() const { return values_; }
  // im2col of a conv node's input; empty for other nodes.
  const Eigen::MatrixXd& patches(NodeId id) const { return patches_.at(static_cast<std::size_t>(id)); }
  const TensorList& params() const { return params_; }
  NodeId output() const { return output_; }

  bool scalar_output() const {
    const auto& v = value(output_);
    return v.rows() == 1 && v.cols() == 1;
  }
  double loss() const { return value(output_)(0, 0); }

 private:
  friend class GraphBuilder;

  std::vector<Node> nodes_;
  std::vector<Eigen::MatrixXd> values_;
  std::vector<Eigen::MatrixXd> patches_;
  TensorList params_;
  NodeId output_ = -1;
};

// Records nodes and evaluates them eagerly. Every produced value is checked
// for NaN/Inf.
class GraphBuilder {
 public:
  explicit GraphBuilder(TensorList params);

  NodeId parameter(std::size_t index);
  NodeId constant(Eigen::MatrixXd value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId conv2d(NodeId weight, NodeId x, const ConvGeometry& geometry);
  NodeId bias_add(NodeId x, NodeId bias);
  NodeId relu(NodeId x);
  NodeId avg_pool(NodeId x, const PoolGeometry& geometry);
  NodeId softmax(NodeId x);
  NodeId cross_entropy(NodeId logits, NodeId targets);
  NodeId mse(NodeId prediction, NodeId targets);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId reshape(NodeId x, const ReshapeSpec& spec);
  NodeId attention(NodeId q, NodeId k, NodeId v, const AttentionGeometry& geometry);

  const Eigen::MatrixXd& value(NodeId id) const;
  const TensorList& params() const { return tape_.params_; }

  Tape finish(NodeId output) &&;

 private:
  NodeId push(Node node);

  Tape tape_;
};

// Builds the loss graph for one batch and returns the loss node.
using ModelFn = std::function<NodeId(GraphBuilder&, const Batch&)>;

struct ForwardResult {
  double loss = 0.0;
  Tape tape;
};

ForwardResult forward(const ModelFn& model_fn, const TensorList& params, const Batch& batch);

// d loss / d params, same shapes as the tape's params.
TensorList gradient(const Tape& tape);

// H v without forming H.
TensorList hvp(const Tape& tape, const TensorList& v);

// v^T H v. Only the part of the graph downstream of v's nonzero tensors is
// differentiated twice, so a direction confined to one layer is cheap.
double quadratic_form(const Tape& tape, const TensorList& v);

// Parameter tensors enter the graph as (dim0, rest) matrices, rank-1 tensors as
// column vectors.
Eigen::MatrixXd param_matrix(const Tensor& t);

}  // namespace hap
