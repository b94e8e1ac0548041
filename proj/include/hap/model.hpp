#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hap/autodiff.hpp"
#include "hap/tensor.hpp"

namespace hap {

// ---- layer descriptors ----------------------------------------------------------

// Applied per position, so a Dense before Flatten acts as a pointwise map.
struct Dense {
  Index in = 0;
  Index out = 0;
};

// Same-padded 3x3 convolution; height/width are the input spatial size.
struct Conv3x3 {
  Index c_in = 0;
  Index c_out = 0;
  Index height = 0;
  Index width = 0;
};

struct Conv1x1 {
  Index c_in = 0;
  Index c_out = 0;
  Index height = 0;
  Index width = 0;
};

enum class ChannelKind : std::uint8_t { kSpatial, kPointwise };

// 3x3 layer in which some output channels were replaced by 1x1 filters.
// channels[j] says which bank produces output channel j; within a bank the
// filters keep their relative output order.
struct HybridConv {
  Index c_in = 0;
  Index height = 0;
  Index width = 0;
  std::vector<ChannelKind> channels;

  Index c_out() const { return static_cast<Index>(channels.size()); }
  Index spatial_count() const;
  Index pointwise_count() const;
};

// Bias-free multi-head self-attention: Q, K, V projections (heads * head_dim,
// d_model) and output projection (d_model, heads * head_dim). head_dim 0 means
// d_model / n_heads.
struct AttentionBlock {
  Index d_model = 0;
  Index n_heads = 0;
  Index head_dim = 0;

  Index resolved_head_dim() const { return head_dim > 0 ? head_dim : d_model / n_heads; }
  Index inner() const { return n_heads * resolved_head_dim(); }
};

struct Relu {};
struct AvgPool {
  Index kernel = 2;
};
// (C, positions) -> (C * positions); required before the output layer when
// the input has spatial or sequence extent.
struct Flatten {};
struct Softmax {};

using Layer = std::variant<Dense, Conv3x3, Conv1x1, HybridConv, AttentionBlock, Relu, AvgPool,
                           Flatten, Softmax>;

enum class LossKind : std::uint8_t { kCrossEntropy, kMse };

// Per-example input: channels x height x width. Sequences use height as the
// token count and width 1; flat feature vectors use 1 x 1.
struct InputShape {
  Index channels = 0;
  Index height = 1;
  Index width = 1;

  Index positions() const { return height * width; }
  Index features() const { return channels * positions(); }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

struct ModelSpec {
  InputShape input;
  std::vector<Layer> layers;
  LossKind loss = LossKind::kCrossEntropy;
};

std::string layer_name(const Layer& layer);
bool is_parametric(const Layer& layer);

// Throws ShapeError naming the first incompatible layer.
void validate(const ModelSpec& spec);
Index output_dim(const ModelSpec& spec);

// Parameter tensor shapes in declaration order.
std::vector<Shape> param_shapes(const ModelSpec& spec);

// ---- groups -------------------------------------------------------------------

using GroupId = std::int32_t;

enum class GroupKind : std::uint8_t { kOutChannel, kHead };

const char* group_kind_name(GroupKind kind);

// Prunable unit. members are global indices into the flattened parameter
// vector (tensors concatenated in declaration order).
struct ParamGroup {
  GroupId id = 0;
  std::size_t layer = 0;
  Index index = 0;
  GroupKind kind = GroupKind::kOutChannel;
  std::vector<Index> members;
  // Output channels feeding the model output, an attention block or a softmax
  // cannot be removed structurally.
  bool prunable = true;
  // 3x3 output channel, i.e. eligible for an implant.
  bool spatial = false;

  Index p() const { return static_cast<Index>(members.size()); }
};

std::vector<ParamGroup> enumerate_groups(const ModelSpec& spec);

struct ModelInstance {
  ModelSpec spec;
  TensorList params;
  std::vector<ParamGroup> groups;

  // Index of the first parameter tensor of each layer (unused for layers
  // without parameters).
  std::vector<std::size_t> param_slot;
};

// Validates params against the spec and derives groups.
ModelInstance assemble(ModelSpec spec, TensorList params);

// He-uniform weights, zero biases.
ModelInstance build(const ModelSpec& spec, std::uint64_t seed);

bool operator==(const ModelInstance& a, const ModelInstance& b);

// Squared norm of a group's members.
double group_sq_norm(const ModelInstance& model, const ParamGroup& group);

// Copy of the model with the given groups' members set to zero.
ModelInstance zero_groups(const ModelInstance& model, std::span<const GroupId> groups);

// ---- evaluation -----------------------------------------------------------------

// Builds the network output for batch.inputs and returns its node, shape (K, N).
NodeId build_output(GraphBuilder& builder, const ModelSpec& spec, const Tensor& inputs);

// Output node followed by the spec's loss against batch.targets.
ModelFn loss_fn(const ModelSpec& spec);

Eigen::MatrixXd predict(const ModelInstance& model, const Tensor& inputs);
double evaluate_loss(const ModelInstance& model, const Batch& batch);
ForwardResult record(const ModelInstance& model, const Batch& batch);

// ---- accounting -------------------------------------------------------------------

struct LayerCost {
  std::size_t layer = 0;
  std::string name;
  Index params = 0;
  Index macs = 0;
};

// MACs of one forward pass for a single example; parametric layers only.
struct CostReport {
  Index total_params = 0;
  Index total_flops = 0;
  std::vector<LayerCost> layers;
};

CostReport cost(const ModelInstance& model);
CostReport cost(const ModelInstance& model, const InputShape& input_shape);
CostReport cost(const ModelSpec& spec);

// ---- structural edits -------------------------------------------------------------

enum class Decision : std::uint8_t { kKeep, kPrune, kImplant };

const char* decision_name(Decision d);

// How a 3x3 filter is collapsed into the 1x1 filter of an implant.
enum class ImplantInit : std::uint8_t {
  kCenterTap,  // w1[ci] = w3[ci, 1, 1]
  kKernelSum,  // w1[ci] = sum of w3[ci, :, :]; exact on spatially constant input
};

// Removes Pruned groups (and the matching input slices of the next parametric
// layer) and collapses Implant channels to 1x1. decisions is indexed by group
// id. Throws InfeasibleError when a layer would lose every unit, Error on a
// decision the structure cannot honor.
ModelInstance restructure(const ModelInstance& model, std::span<const Decision> decisions,
                          ImplantInit init = ImplantInit::kCenterTap);

// restructure() restricted to Keep/Prune.
ModelInstance rebuild(const ModelInstance& model, std::span<const Decision> decisions);

// ---- checkpoints --------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> save(const ModelInstance& model);
ModelInstance load(std::span<const std::uint8_t> bytes);

void save_file(const ModelInstance& model, const std::string& path);
ModelInstance load_file(const std::string& path);

}  // namespace hap
