#include "hap/model.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hap/random.hpp"

namespace hap {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string at_layer(std::size_t i, const Layer& layer) {
  return "layer " + std::to_string(i) + " (" + layer_name(layer) + ")";
}

// Tracks the activation shape while walking a spec.
struct Cursor {
  Index channels;
  Index height;
  Index width;

  Index positions() const { return height * width; }
};

std::vector<std::size_t> compute_param_slots(const ModelSpec& spec) {
  std::vector<std::size_t> slots(spec.layers.size(), 0);
  std::size_t next = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    slots[i] = next;
    next += std::visit(Overloaded{
                           [](const Dense&) -> std::size_t { return 2; },
                           [](const Conv3x3&) -> std::size_t { return 2; },
                           [](const Conv1x1&) -> std::size_t { return 2; },
                           [](const HybridConv&) -> std::size_t { return 4; },
                           [](const AttentionBlock&) -> std::size_t { return 4; },
                           [](const auto&) -> std::size_t { return 0; },
                       },
                       spec.layers[i]);
  }
  return slots;
}

std::vector<Index> tensor_offsets(const std::vector<Shape>& shapes) {
  std::vector<Index> offsets(shapes.size() + 1, 0);
  for (std::size_t i = 0; i < shapes.size(); ++i) offsets[i + 1] = offsets[i] + shape_size(shapes[i]);
  return offsets;
}

}  // namespace

Index HybridConv::spatial_count() const {
  return static_cast<Index>(std::count(channels.begin(), channels.end(), ChannelKind::kSpatial));
}
Index HybridConv::pointwise_count() const { return c_out() - spatial_count(); }

std::string layer_name(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense& d) { return "dense(" + std::to_string(d.in) + "->" + std::to_string(d.out) + ")"; },
                        [](const Conv3x3& c) { return "conv3x3(" + std::to_string(c.c_in) + "->" + std::to_string(c.c_out) + ")"; },
                        [](const Conv1x1& c) { return "conv1x1(" + std::to_string(c.c_in) + "->" + std::to_string(c.c_out) + ")"; },
                        [](const HybridConv& c) {
                          return "hybrid(" + std::to_string(c.c_in) + "->" + std::to_string(c.spatial_count()) +
                                 "x3x3+" + std::to_string(c.pointwise_count()) + "x1x1)";
                        },
                        [](const AttentionBlock& a) {
                          return "attention(d=" + std::to_string(a.d_model) + ",heads=" + std::to_string(a.n_heads) + ")";
                        },
                        [](const Relu&) { return std::string("relu"); },
                        [](const AvgPool& p) { return "avgpool(" + std::to_string(p.kernel) + ")"; },
                        [](const Flatten&) { return std::string("flatten"); },
                        [](const Softmax&) { return std::string("softmax"); },
                    },
                    layer);
}

bool is_parametric(const Layer& layer) {
  return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv3x3>(layer) ||
         std::holds_alternative<Conv1x1>(layer) || std::holds_alternative<HybridConv>(layer) ||
         std::holds_alternative<AttentionBlock>(layer);
}

void validate(const ModelSpec& spec) {
  const auto& in = spec.input;
  if (in.channels <= 0 || in.height <= 0 || in.width <= 0) throw ShapeError("input shape must be positive");
  Cursor cur{in.channels, in.height, in.width};
  bool any_parametric = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    auto fail = [&](const std::string& why) { throw ShapeError(at_layer(i, layer) + ": " + why); };
    auto check_spatial = [&](Index c_in, Index h, Index w) {
      if (c_in != cur.channels) fail("expects " + std::to_string(c_in) + " input channels, got " + std::to_string(cur.channels));
      if (h != cur.height || w != cur.width) {
        fail("declared " + std::to_string(h) + "x" + std::to_string(w) + " input, got " +
             std::to_string(cur.height) + "x" + std::to_string(cur.width));
      }
    };
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     if (d.in <= 0 || d.out <= 0) fail("sizes must be positive");
                     if (d.in != cur.channels) fail("expects " + std::to_string(d.in) + " inputs, got " + std::to_string(cur.channels));
                     cur.channels = d.out;
                   },
                   [&](const Conv3x3& c) {
                     if (c.c_in <= 0 || c.c_out <= 0) fail("sizes must be positive");
                     check_spatial(c.c_in, c.height, c.width);
                     cur.channels = c.c_out;
                   },
                   [&](const Conv1x1& c) {
                     if (c.c_in <= 0 || c.c_out <= 0) fail("sizes must be positive");
                     check_spatial(c.c_in, c.height, c.width);
                     cur.channels = c.c_out;
                   },
                   [&](const HybridConv& c) {
                     if (c.c_in <= 0 || c.spatial_count() == 0 || c.pointwise_count() == 0) {
                       fail("needs both 3x3 and 1x1 channels");
                     }
                     check_spatial(c.c_in, c.height, c.width);
                     cur.channels = c.c_out();
                   },
                   [&](const AttentionBlock& a) {
                     if (a.d_model <= 0 || a.n_heads <= 0) fail("sizes must be positive");
                     if (a.head_dim == 0 && a.d_model % a.n_heads != 0) fail("n_heads must divide d_model");
                     if (a.head_dim < 0) fail("negative head_dim");
                     if (a.d_model != cur.channels) fail("d_model " + std::to_string(a.d_model) + " vs " + std::to_string(cur.channels) + " channels");
                   },
                   [&](const Relu&) {},
                   [&](const AvgPool& p) {
                     if (p.kernel <= 0 || cur.height % p.kernel != 0 || cur.width % p.kernel != 0) {
                       fail("kernel must divide the spatial size");
                     }
                     cur.height /= p.kernel;
                     cur.width /= p.kernel;
                   },
                   [&](const Flatten&) {
                     cur.channels *= cur.positions();
                     cur.height = cur.width = 1;
                   },
                   [&](const Softmax&) {},
               },
               layer);
    any_parametric = any_parametric || is_parametric(layer);
  }
  if (!any_parametric) throw ShapeError("model has no parametric layer");
  if (cur.positions() != 1) throw ShapeError("output still has spatial extent; add a flatten layer");
}

Index output_dim(const ModelSpec& spec) {
  validate(spec);
  Index channels = spec.input.channels;
  Index positions = spec.input.positions();
  for (const auto& layer : spec.layers) {
    std::visit(Overloaded{
                   [&](const Dense& d) { channels = d.out; },
                   [&](const Conv3x3& c) { channels = c.c_out; },
                   [&](const Conv1x1& c) { channels = c.c_out; },
                   [&](const HybridConv& c) { channels = c.c_out(); },
                   [&](const AvgPool& p) { positions /= p.kernel * p.kernel; },
                   [&](const Flatten&) {
                     channels *= positions;
                     positions = 1;
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return channels;
}

std::vector<Shape> param_shapes(const ModelSpec& spec) {
  std::vector<Shape> shapes;
  for (const auto& layer : spec.layers) {
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     shapes.push_back({d.out, d.in});
                     shapes.push_back({d.out});
                   },
                   [&](const Conv3x3& c) {
                     shapes.push_back({c.c_out, c.c_in, 3, 3});
                     shapes.push_back({c.c_out});
                   },
                   [&](const Conv1x1& c) {
                     shapes.push_back({c.c_out, c.c_in, 1, 1});
                     shapes.push_back({c.c_out});
                   },
                   [&](const HybridConv& c) {
                     shapes.push_back({c.spatial_count(), c.c_in, 3, 3});
                     shapes.push_back({c.spatial_count()});
                     shapes.push_back({c.pointwise_count(), c.c_in, 1, 1});
                     shapes.push_back({c.pointwise_count()});
                   },
                   [&](const AttentionBlock& a) {
                     shapes.push_back({a.inner(), a.d_model});
                     shapes.push_back({a.inner(), a.d_model});
                     shapes.push_back({a.inner(), a.d_model});
                     shapes.push_back({a.d_model, a.inner()});
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return shapes;
}

const char* group_kind_name(GroupKind kind) {
  return kind == GroupKind::kHead ? "head" : "out_channel";
}

std::vector<ParamGroup> enumerate_groups(const ModelSpec& spec) {
  validate(spec);
  const auto shapes = param_shapes(spec);
  const auto offsets = tensor_offsets(shapes);
  const auto slots = compute_param_slots(spec);

  // Output channels may be removed only when the next parametric layer reached
  // through relu/avgpool/flatten consumes them as plain input channels.
  auto downstream_accepts = [&](std::size_t layer) {
    for (std::size_t j = layer + 1; j < spec.layers.size(); ++j) {
      const Layer& next = spec.layers[j];
      if (std::holds_alternative<Relu>(next) || std::holds_alternative<AvgPool>(next) ||
          std::holds_alternative<Flatten>(next)) {
        continue;
      }
      return std::holds_alternative<Dense>(next) || std::holds_alternative<Conv3x3>(next) ||
             std::holds_alternative<Conv1x1>(next) || std::holds_alternative<HybridConv>(next);
    }
    return false;
  };

  std::vector<ParamGroup> groups;
  auto channel_group = [&](std::size_t layer, Index j, Index w_off, Index row_len, Index b_off, bool spatial) {
    ParamGroup g;
    g.id = static_cast<GroupId>(groups.size());
    g.layer = layer;
    g.index = j;
    g.kind = GroupKind::kOutChannel;
    g.members.reserve(static_cast<std::size_t>(row_len + 1));
    for (Index k = 0; k < row_len; ++k) g.members.push_back(w_off + k);
    g.members.push_back(b_off);
    g.prunable = downstream_accepts(layer);
    g.spatial = spatial;
    groups.push_back(std::move(g));
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::size_t s = slots[i];
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     for (Index j = 0; j < d.out; ++j) channel_group(i, j, offsets[s] + j * d.in, d.in, offsets[s + 1] + j, false);
                   },
                   [&](const Conv3x3& c) {
                     const Index row = c.c_in * 9;
                     for (Index j = 0; j < c.c_out; ++j) channel_group(i, j, offsets[s] + j * row, row, offsets[s + 1] + j, true);
                   },
                   [&](const Conv1x1& c) {
                     for (Index j = 0; j < c.c_out; ++j) channel_group(i, j, offsets[s] + j * c.c_in, c.c_in, offsets[s + 1] + j, false);
                   },
                   [&](const HybridConv& c) {
                     Index spatial = 0, pointwise = 0;
                     for (Index j = 0; j < c.c_out(); ++j) {
                       if (c.channels[static_cast<std::size_t>(j)] == ChannelKind::kSpatial) {
                         channel_group(i, j, offsets[s] + spatial * c.c_in * 9, c.c_in * 9, offsets[s + 1] + spatial, true);
                         ++spatial;
                       } else {
                         channel_group(i, j, offsets[s + 2] + pointwise * c.c_in, c.c_in, offsets[s + 3] + pointwise, false);
                         ++pointwise;
                       }
                     }
                   },
                   [&](const AttentionBlock& a) {
                     const Index dh = a.resolved_head_dim();
                     const Index inner = a.inner();
                     for (Index h = 0; h < a.n_heads; ++h) {
                       ParamGroup g;
                       g.id = static_cast<GroupId>(groups.size());
                       g.layer = i;
                       g.index = h;
                       g.kind = GroupKind::kHead;
                       for (std::size_t t = 0; t < 3; ++t) {
                         for (Index r = 0; r < dh; ++r)
                           for (Index c = 0; c < a.d_model; ++c) g.members.push_back(offsets[s + t] + (h * dh + r) * a.d_model + c);
                       }
                       for (Index r = 0; r < a.d_model; ++r)
                         for (Index c = 0; c < dh; ++c) g.members.push_back(offsets[s + 3] + r * inner + h * dh + c);
                       groups.push_back(std::move(g));
                     }
                   },
                   [](const auto&) {},
               },
               spec.layers[i]);
  }
  return groups;
}

ModelInstance assemble(ModelSpec spec, TensorList params) {
  validate(spec);
  const auto shapes = param_shapes(spec);
  if (shapes.size() != params.size()) {
    throw ShapeError("spec declares " + std::to_string(shapes.size()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (shapes[i] != params[i].shape()) {
      throw ShapeError("parameter " + std::to_string(i) + " has shape " + shape_string(params[i].shape()) +
                       ", spec expects " + shape_string(shapes[i]));
    }
  }
  ModelInstance m;
  m.groups = enumerate_groups(spec);
  m.param_slot = compute_param_slots(spec);
  m.spec = std::move(spec);
  m.params = std::move(params);
  return m;
}

ModelInstance build(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  TensorList params;
  auto he = [&](Shape shape, Index fan_in) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (Index k = 0; k < t.size(); ++k) t[k] = uniform(rng, -bound, bound);
    params.push_back(std::move(t));
  };
  auto zeros = [&](Shape shape) { params.push_back(Tensor::zeros(std::move(shape))); };
  for (const auto& layer : spec.layers) {
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     he({d.out, d.in}, d.in);
                     zeros({d.out});
                   },
                   [&](const Conv3x3& c) {
                     he({c.c_out, c.c_in, 3, 3}, c.c_in * 9);
                     zeros({c.c_out});
                   },
                   [&](const Conv1x1& c) {
                     he({c.c_out, c.c_in, 1, 1}, c.c_in);
                     zeros({c.c_out});
                   },
                   [&](const HybridConv& c) {
                     he({c.spatial_count(), c.c_in, 3, 3}, c.c_in * 9);
                     zeros({c.spatial_count()});
                     he({c.pointwise_count(), c.c_in, 1, 1}, c.c_in);
                     zeros({c.pointwise_count()});
                   },
                   [&](const AttentionBlock& a) {
                     for (int t = 0; t < 3; ++t) he({a.inner(), a.d_model}, a.d_model);
                     he({a.d_model, a.inner()}, a.inner());
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return assemble(spec, std::move(params));
}

namespace {
bool same_layer(const Layer& a, const Layer& b) {
  if (a.index() != b.index()) return false;
  return std::visit(Overloaded{
                        [&](const Dense& x) { const auto& y = std::get<Dense>(b); return x.in == y.in && x.out == y.out; },
                        [&](const Conv3x3& x) {
                          const auto& y = std::get<Conv3x3>(b);
                          return x.c_in == y.c_in && x.c_out == y.c_out && x.height == y.height && x.width == y.width;
                        },
                        [&](const Conv1x1& x) {
                          const auto& y = std::get<Conv1x1>(b);
                          return x.c_in == y.c_in && x.c_out == y.c_out && x.height == y.height && x.width == y.width;
                        },
                        [&](const HybridConv& x) {
                          const auto& y = std::get<HybridConv>(b);
                          return x.c_in == y.c_in && x.height == y.height && x.width == y.width && x.channels == y.channels;
                        },
                        [&](const AttentionBlock& x) {
                          const auto& y = std::get<AttentionBlock>(b);
                          return x.d_model == y.d_model && x.n_heads == y.n_heads && x.head_dim == y.head_dim;
                        },
                        [&](const AvgPool& x) { return x.kernel == std::get<AvgPool>(b).kernel; },
                        [](const auto&) { return true; },
                    },
                    a);
}
}  // namespace

bool operator==(const ModelInstance& a, const ModelInstance& b) {
  if (!(a.spec.input == b.spec.input) || a.spec.loss != b.spec.loss) return false;
  if (a.spec.layers.size() != b.spec.layers.size()) return false;
  for (std::size_t i = 0; i < a.spec.layers.size(); ++i) {
    if (!same_layer(a.spec.layers[i], b.spec.layers[i])) return false;
  }
  return a.params == b.params;
}

double group_sq_norm(const ModelInstance& model, const ParamGroup& group) {
  const auto flat = flatten(model.params);
  double acc = 0.0;
  for (Index k : group.members) acc += flat[k] * flat[k];
  return acc;
}

ModelInstance zero_groups(const ModelInstance& model, std::span<const GroupId> groups) {
  Eigen::VectorXd flat = flatten(model.params);
  for (GroupId id : groups) {
    for (Index k : model.groups.at(static_cast<std::size_t>(id)).members) flat[k] = 0.0;
  }
  ModelInstance out = model;
  out.params = unflatten(flat, model.params);
  return out;
}

// ---- evaluation ------------------------------------------------------------------

NodeId build_output(GraphBuilder& b, const ModelSpec& spec, const Tensor& inputs) {
  if (inputs.rank() != 2 || inputs.dim(1) != spec.input.features()) {
    throw ShapeError("inputs must be (N, " + std::to_string(spec.input.features()) + "), got " +
                     shape_string(inputs.shape()));
  }
  const Index n = inputs.dim(0);
  const auto slots = compute_param_slots(spec);
  NodeId x = b.constant(Eigen::Map<const Eigen::MatrixXd>(inputs.data().data(), spec.input.features(), n));
  Cursor cur{spec.input.channels, spec.input.height, spec.input.width};
  if (cur.positions() > 1) {
    x = b.reshape(x, {ReshapeSpec::Kind::kUnflatten, cur.channels, cur.positions()});
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::size_t s = slots[i];
    auto conv = [&](std::size_t w_slot, Index kernel, Index c_in) {
      const NodeId w = b.parameter(w_slot);
      const NodeId y = b.conv2d(w, x, {c_in, cur.height, cur.width, kernel, true});
      return b.bias_add(y, b.parameter(w_slot + 1));
    };
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     x = b.bias_add(b.matmul(b.parameter(s), x), b.parameter(s + 1));
                     cur.channels = d.out;
                   },
                   [&](const Conv3x3& c) {
                     x = conv(s, 3, c.c_in);
                     cur.channels = c.c_out;
                   },
                   [&](const Conv1x1& c) {
                     x = conv(s, 1, c.c_in);
                     cur.channels = c.c_out;
                   },
                   [&](const HybridConv& c) {
                     const NodeId spatial = conv(s, 3, c.c_in);
                     const NodeId pointwise = conv(s + 2, 1, c.c_in);
                     Eigen::MatrixXd place_s = Eigen::MatrixXd::Zero(c.c_out(), c.spatial_count());
                     Eigen::MatrixXd place_p = Eigen::MatrixXd::Zero(c.c_out(), c.pointwise_count());
                     Index si = 0, pi = 0;
                     for (Index j = 0; j < c.c_out(); ++j) {
                       if (c.channels[static_cast<std::size_t>(j)] == ChannelKind::kSpatial) place_s(j, si++) = 1.0;
                       else place_p(j, pi++) = 1.0;
                     }
                     x = b.add(b.matmul(b.constant(std::move(place_s)), spatial),
                               b.matmul(b.constant(std::move(place_p)), pointwise));
                     cur.channels = c.c_out();
                   },
                   [&](const AttentionBlock& a) {
                     const NodeId q = b.matmul(b.parameter(s), x);
                     const NodeId k = b.matmul(b.parameter(s + 1), x);
                     const NodeId v = b.matmul(b.parameter(s + 2), x);
                     const NodeId heads = b.attention(q, k, v, {a.n_heads, a.resolved_head_dim(), cur.positions()});
                     x = b.matmul(b.parameter(s + 3), heads);
                   },
                   [&](const Relu&) { x = b.relu(x); },
                   [&](const AvgPool& p) {
                     x = b.avg_pool(x, {cur.height, cur.width, p.kernel});
                     cur.height /= p.kernel;
                     cur.width /= p.kernel;
                   },
                   [&](const Flatten&) {
                     if (cur.positions() > 1) x = b.reshape(x, {ReshapeSpec::Kind::kFlatten, cur.channels, cur.positions()});
                     cur.channels *= cur.positions();
                     cur.height = cur.width = 1;
                   },
                   [&](const Softmax&) { x = b.softmax(x); },
               },
               spec.layers[i]);
  }
  return x;
}

ModelFn loss_fn(const ModelSpec& spec) {
  return [spec](GraphBuilder& b, const Batch& batch) {
    const NodeId out = build_output(b, spec, batch.inputs);
    const Index k = b.value(out).rows();
    if (batch.targets.rank() != 2 || batch.targets.dim(1) != k) {
      throw ShapeError("targets must be (N, " + std::to_string(k) + "), got " + shape_string(batch.targets.shape()));
    }
    const NodeId y = b.constant(Eigen::Map<const Eigen::MatrixXd>(batch.targets.data().data(), k, batch.size()));
    return spec.loss == LossKind::kCrossEntropy ? b.cross_entropy(out, y) : b.mse(out, y);
  };
}

Eigen::MatrixXd predict(const ModelInstance& model, const Tensor& inputs) {
  GraphBuilder b(model.params);
  const NodeId out = build_output(b, model.spec, inputs);
  return b.value(out);
}

ForwardResult record(const ModelInstance& model, const Batch& batch) {
  return forward(loss_fn(model.spec), model.params, batch);
}

double evaluate_loss(const ModelInstance& model, const Batch& batch) { return record(model, batch).loss; }

// ---- accounting -------------------------------------------------------------------

CostReport cost(const ModelSpec& spec) {
  validate(spec);
  CostReport report;
  Cursor cur{spec.input.channels, spec.input.height, spec.input.width};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerCost lc{i, layer_name(spec.layers[i]), 0, 0};
    const Index hw = cur.positions();
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     lc.params = d.out * d.in + d.out;
                     lc.macs = d.out * d.in * hw;
                     cur.channels = d.out;
                   },
                   [&](const Conv3x3& c) {
                     lc.params = c.c_out * (c.c_in * 9 + 1);
                     lc.macs = c.c_out * c.c_in * 9 * hw;
                     cur.channels = c.c_out;
                   },
                   [&](const Conv1x1& c) {
                     lc.params = c.c_out * (c.c_in + 1);
                     lc.macs = c.c_out * c.c_in * hw;
                     cur.channels = c.c_out;
                   },
                   [&](const HybridConv& c) {
                     lc.params = c.spatial_count() * (c.c_in * 9 + 1) + c.pointwise_count() * (c.c_in + 1);
                     lc.macs = (c.spatial_count() * 9 + c.pointwise_count()) * c.c_in * hw;
                     cur.channels = c.c_out();
                   },
                   [&](const AttentionBlock& a) {
                     lc.params = 4 * a.d_model * a.inner();
                     // Q, K, V and output projections plus the two score/value products.
                     lc.macs = 4 * a.d_model * a.inner() * hw + 2 * a.inner() * hw * hw;
                   },
                   [&](const AvgPool& p) {
                     cur.height /= p.kernel;
                     cur.width /= p.kernel;
                   },
                   [&](const Flatten&) {
                     cur.channels *= cur.positions();
                     cur.height = cur.width = 1;
                   },
                   [](const auto&) {},
               },
               spec.layers[i]);
    if (is_parametric(spec.layers[i])) {
      report.total_params += lc.params;
      report.total_flops += lc.macs;
      report.layers.push_back(std::move(lc));
    }
  }
  return report;
}

CostReport cost(const ModelInstance& model) { return cost(model.spec); }

CostReport cost(const ModelInstance& model, const InputShape& input_shape) {
  if (!(input_shape == model.spec.input)) {
    throw ShapeError("cost: input shape " + std::to_string(input_shape.channels) + "x" +
                     std::to_string(input_shape.height) + "x" + std::to_string(input_shape.width) +
                     " does not match the model's " + std::to_string(model.spec.input.channels) + "x" +
                     std::to_string(model.spec.input.height) + "x" + std::to_string(model.spec.input.width));
  }
  return cost(model.spec);
}

// ---- structural edits ---------------------------------------------------------------

const char* decision_name(Decision d) {
  switch (d) {
    case Decision::kKeep: return "keep";
    case Decision::kPrune: return "prune";
    case Decision::kImplant: return "implant";
  }
  return "unknown";
}

namespace {

std::vector<Index> kept_indices(const std::vector<bool>& mask) {
  std::vector<Index> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<Index>(i));
  return idx;
}

// One output channel of a convolution-like layer.
struct ChannelFilter {
  ChannelKind kind;
  Eigen::VectorXd weights;  // c_in * 9 (spatial) or c_in (pointwise)
  double bias;
};

}  // namespace

ModelInstance restructure(const ModelInstance& model, std::span<const Decision> decisions, ImplantInit init) {
  const auto& spec = model.spec;
  if (decisions.size() != model.groups.size()) {
    throw Error("plan has " + std::to_string(decisions.size()) + " decisions for " +
                std::to_string(model.groups.size()) + " groups");
  }
  std::vector<std::vector<Decision>> per_layer(spec.layers.size());
  for (const auto& g : model.groups) {
    const Decision d = decisions[static_cast<std::size_t>(g.id)];
    if (d == Decision::kPrune && !g.prunable) {
      throw Error("group " + std::to_string(g.id) + " cannot be pruned: its layer feeds " +
                  "a consumer that would be left with a dangling input");
    }
    if (d == Decision::kImplant && !g.spatial) {
      throw Error("group " + std::to_string(g.id) + " in " + layer_name(spec.layers[g.layer]) +
                  " is not a 3x3 channel; implants apply to 3x3 convolutions only");
    }
    auto& v = per_layer[g.layer];
    if (v.size() <= static_cast<std::size_t>(g.index)) v.resize(static_cast<std::size_t>(g.index) + 1, Decision::kKeep);
    v[static_cast<std::size_t>(g.index)] = d;
  }

  ModelSpec out_spec{spec.input, {}, spec.loss};
  TensorList out_params;
  std::vector<bool> in_mask(static_cast<std::size_t>(spec.input.channels), true);
  Cursor cur{spec.input.channels, spec.input.height, spec.input.width};

  auto require_unit = [&](std::size_t layer, std::size_t kept) {
    if (kept == 0) {
      throw InfeasibleError("min-one-per-layer", "plan removes every unit of layer " + std::to_string(layer) + " (" +
                                                     layer_name(spec.layers[layer]) + ")");
    }
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    const std::size_t s = model.param_slot[i];
    const auto& dec = per_layer[i];
    const auto keep_in = kept_indices(in_mask);
    const Index c_in_new = static_cast<Index>(keep_in.size());

    auto emit_conv = [&](const std::vector<ChannelFilter>& filters) {
      // Gather the surviving channels, slicing their input dimension.
      std::vector<ChannelFilter> out;
      std::vector<bool> out_mask(filters.size(), false);
      for (std::size_t j = 0; j < filters.size(); ++j) {
        const Decision d = j < dec.size() ? dec[j] : Decision::kKeep;
        if (d == Decision::kPrune) continue;
        out_mask[j] = true;
        const auto& f = filters[j];
        const Index taps = f.kind == ChannelKind::kSpatial ? 9 : 1;
        ChannelFilter nf{f.kind, Eigen::VectorXd(c_in_new * taps), f.bias};
        for (Index ci = 0; ci < c_in_new; ++ci)
          nf.weights.segment(ci * taps, taps) = f.weights.segment(keep_in[static_cast<std::size_t>(ci)] * taps, taps);
        if (d == Decision::kImplant) {
          Eigen::VectorXd w1(c_in_new);
          for (Index ci = 0; ci < c_in_new; ++ci) {
            w1[ci] = init == ImplantInit::kCenterTap ? nf.weights[ci * 9 + 4] : nf.weights.segment(ci * 9, 9).sum();
          }
          nf = {ChannelKind::kPointwise, std::move(w1), f.bias};
        }
        out.push_back(std::move(nf));
      }
      require_unit(i, out.size());
      std::vector<ChannelKind> kinds;
      for (const auto& f : out) kinds.push_back(f.kind);
      const Index n_sp = static_cast<Index>(std::count(kinds.begin(), kinds.end(), ChannelKind::kSpatial));
      const Index n_pw = static_cast<Index>(kinds.size()) - n_sp;
      auto bank = [&](ChannelKind kind, Index count, Index taps) {
        Tensor w(Shape{count, c_in_new, taps == 9 ? 3 : 1, taps == 9 ? 3 : 1});
        Tensor bias(Shape{count});
        Index r = 0;
        for (const auto& f : out) {
          if (f.kind != kind) continue;
          w.matrix().row(r) = f.weights.transpose();
          bias[r] = f.bias;
          ++r;
        }
        out_params.push_back(std::move(w));
        out_params.push_back(std::move(bias));
      };
      const Index c_out_new = static_cast<Index>(out.size());
      if (n_pw == 0) {
        out_spec.layers.push_back(Conv3x3{c_in_new, c_out_new, cur.height, cur.width});
        bank(ChannelKind::kSpatial, n_sp, 9);
      } else if (n_sp == 0) {
        out_spec.layers.push_back(Conv1x1{c_in_new, c_out_new, cur.height, cur.width});
        bank(ChannelKind::kPointwise, n_pw, 1);
      } else {
        out_spec.layers.push_back(HybridConv{c_in_new, cur.height, cur.width, kinds});
        bank(ChannelKind::kSpatial, n_sp, 9);
        bank(ChannelKind::kPointwise, n_pw, 1);
      }
      in_mask = std::move(out_mask);
      cur.channels = c_out_new;
    };

    auto filters_of = [&](const Tensor& w, const Tensor& b, ChannelKind kind) {
      std::vector<ChannelFilter> f;
      const auto m = w.matrix();
      for (Index j = 0; j < w.dim(0); ++j) f.push_back({kind, m.row(j).transpose(), b[j]});
      return f;
    };

    std::visit(Overloaded{
                   [&](const Dense& d) {
                     const auto w = model.params[s].matrix();
                     const auto& b = model.params[s + 1];
                     std::vector<Index> keep_out;
                     std::vector<bool> out_mask(static_cast<std::size_t>(d.out), false);
                     for (Index j = 0; j < d.out; ++j) {
                       const auto ju = static_cast<std::size_t>(j);
                       if (ju < dec.size() && dec[ju] == Decision::kPrune) continue;
                       keep_out.push_back(j);
                       out_mask[ju] = true;
                     }
                     require_unit(i, keep_out.size());
                     const Index ko = static_cast<Index>(keep_out.size());
                     Tensor nw(Shape{ko, c_in_new});
                     Tensor nb(Shape{ko});
                     for (Index r = 0; r < ko; ++r) {
                       for (Index c = 0; c < c_in_new; ++c) nw.matrix()(r, c) = w(keep_out[static_cast<std::size_t>(r)], keep_in[static_cast<std::size_t>(c)]);
                       nb[r] = b[keep_out[static_cast<std::size_t>(r)]];
                     }
                     out_spec.layers.push_back(Dense{c_in_new, ko});
                     out_params.push_back(std::move(nw));
                     out_params.push_back(std::move(nb));
                     in_mask = std::move(out_mask);
                     cur.channels = ko;
                   },
                   [&](const Conv3x3&) {
                     emit_conv(filters_of(model.params[s], model.params[s + 1], ChannelKind::kSpatial));
                   },
                   [&](const Conv1x1&) {
                     emit_conv(filters_of(model.params[s], model.params[s + 1], ChannelKind::kPointwise));
                   },
                   [&](const HybridConv& c) {
                     auto sp = filters_of(model.params[s], model.params[s + 1], ChannelKind::kSpatial);
                     auto pw = filters_of(model.params[s + 2], model.params[s + 3], ChannelKind::kPointwise);
                     std::vector<ChannelFilter> all;
                     std::size_t si = 0, pi = 0;
                     for (auto kind : c.channels) all.push_back(kind == ChannelKind::kSpatial ? sp[si++] : pw[pi++]);
                     emit_conv(all);
                   },
                   [&](const AttentionBlock& a) {
                     if (c_in_new != a.d_model) {
                       throw Error("attention block at layer " + std::to_string(i) + " lost input channels");
                     }
                     std::vector<Index> heads;
                     for (Index h = 0; h < a.n_heads; ++h) {
                       const auto hu = static_cast<std::size_t>(h);
                       if (hu < dec.size() && dec[hu] == Decision::kPrune) continue;
                       heads.push_back(h);
                     }
                     require_unit(i, heads.size());
                     if (static_cast<Index>(heads.size()) == a.n_heads) {
                       out_spec.layers.push_back(a);
                       for (std::size_t t = 0; t < 4; ++t) out_params.push_back(model.params[s + t]);
                       return;
                     }
                     const Index dh = a.resolved_head_dim();
                     const Index kept = static_cast<Index>(heads.size());
                     for (std::size_t t = 0; t < 3; ++t) {
                       const auto w = model.params[s + t].matrix();
                       Tensor nw(Shape{kept * dh, a.d_model});
                       for (Index h = 0; h < kept; ++h) nw.matrix().middleRows(h * dh, dh) = w.middleRows(heads[static_cast<std::size_t>(h)] * dh, dh);
                       out_params.push_back(std::move(nw));
                     }
                     const auto wo = model.params[s + 3].matrix();
                     Tensor nwo(Shape{a.d_model, kept * dh});
                     for (Index h = 0; h < kept; ++h) nwo.matrix().middleCols(h * dh, dh) = wo.middleCols(heads[static_cast<std::size_t>(h)] * dh, dh);
                     out_params.push_back(std::move(nwo));
                     out_spec.layers.push_back(AttentionBlock{a.d_model, kept, dh});
                   },
                   [&](const Relu& r) { out_spec.layers.push_back(r); },
                   [&](const Softmax& sm) { out_spec.layers.push_back(sm); },
                   [&](const AvgPool& p) {
                     out_spec.layers.push_back(p);
                     cur.height /= p.kernel;
                     cur.width /= p.kernel;
                   },
                   [&](const Flatten& f) {
                     const Index pos = cur.positions();
                     std::vector<bool> expanded;
                     expanded.reserve(in_mask.size() * static_cast<std::size_t>(pos));
                     for (bool kept : in_mask)
                       for (Index p = 0; p < pos; ++p) expanded.push_back(kept);
                     in_mask = std::move(expanded);
                     out_spec.layers.push_back(f);
                     cur.channels *= pos;
                     cur.height = cur.width = 1;
                   },
               },
               layer);
  }
  return assemble(std::move(out_spec), std::move(out_params));
}

ModelInstance rebuild(const ModelInstance& model, std::span<const Decision> decisions) {
  for (Decision d : decisions) {
    if (d == Decision::kImplant) throw Error("rebuild: plan contains implants; use apply_implant");
  }
  return restructure(model, decisions);
}

// ---- checkpoints ---------------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kMagic = {'H', 'A', 'P', 'M', 'O', 'D', 'E', 'L'};

enum class Tag : std::uint8_t {
  kDense = 1,
  kConv3x3 = 2,
  kConv1x1 = 3,
  kHybrid = 4,
  kAttention = 5,
  kRelu = 6,
  kAvgPool = 7,
  kFlatten = 8,
  kSoftmax = 9,
};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint64_t v) {
    if (v > 0xffffffffULL) throw FormatError("value does not fit the checkpoint's 32-bit field");
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("corrupt checkpoint: truncated at byte offset " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save(const ModelInstance& model) {
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint64_t>(model.spec.input.channels));
  w.u32(static_cast<std::uint64_t>(model.spec.input.height));
  w.u32(static_cast<std::uint64_t>(model.spec.input.width));
  w.u8(static_cast<std::uint8_t>(model.spec.loss));
  w.u32(model.spec.layers.size());
  for (const auto& layer : model.spec.layers) {
    Writer p;
    Tag tag = std::visit(Overloaded{
                             [&](const Dense& d) { p.u32(d.in); p.u32(d.out); return Tag::kDense; },
                             [&](const Conv3x3& c) { p.u32(c.c_in); p.u32(c.c_out); p.u32(c.height); p.u32(c.width); return Tag::kConv3x3; },
                             [&](const Conv1x1& c) { p.u32(c.c_in); p.u32(c.c_out); p.u32(c.height); p.u32(c.width); return Tag::kConv1x1; },
                             [&](const HybridConv& c) {
                               p.u32(c.c_in); p.u32(c.height); p.u32(c.width); p.u32(c.channels.size());
                               for (auto k : c.channels) p.u8(static_cast<std::uint8_t>(k));
                               return Tag::kHybrid;
                             },
                             [&](const AttentionBlock& a) { p.u32(a.d_model); p.u32(a.n_heads); p.u32(a.head_dim); return Tag::kAttention; },
                             [&](const Relu&) { return Tag::kRelu; },
                             [&](const AvgPool& a) { p.u32(a.kernel); return Tag::kAvgPool; },
                             [&](const Flatten&) { return Tag::kFlatten; },
                             [&](const Softmax&) { return Tag::kSoftmax; },
                         },
                         layer);
    w.u8(static_cast<std::uint8_t>(tag));
    w.u32(p.bytes().size());
    w.raw(p.bytes().data(), p.bytes().size());
  }
  w.u64(static_cast<std::uint64_t>(total_size(model.params)));
  for (const auto& t : model.params)
    for (Index k = 0; k < t.size(); ++k) w.f64(t[k]);
  return std::move(w.bytes());
}

ModelInstance load(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.u8() != static_cast<std::uint8_t>(c)) throw FormatError("corrupt checkpoint: bad magic (expected HAPMODEL)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  ModelSpec spec;
  spec.input.channels = r.u32();
  spec.input.height = r.u32();
  spec.input.width = r.u32();
  const std::uint8_t loss = r.u8();
  if (loss > static_cast<std::uint8_t>(LossKind::kMse)) throw FormatError("corrupt checkpoint: unknown loss kind");
  spec.loss = static_cast<LossKind>(loss);
  const std::uint32_t n_layers = r.u32();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::size_t at = r.pos();
    const auto tag = static_cast<Tag>(r.u8());
    const std::uint32_t len = r.u32();
    const std::size_t start = r.pos();
    switch (tag) {
      case Tag::kDense: { Dense d; d.in = r.u32(); d.out = r.u32(); spec.layers.push_back(d); break; }
      case Tag::kConv3x3: { Conv3x3 c; c.c_in = r.u32(); c.c_out = r.u32(); c.height = r.u32(); c.width = r.u32(); spec.layers.push_back(c); break; }
      case Tag::kConv1x1: { Conv1x1 c; c.c_in = r.u32(); c.c_out = r.u32(); c.height = r.u32(); c.width = r.u32(); spec.layers.push_back(c); break; }
      case Tag::kHybrid: {
        HybridConv c;
        c.c_in = r.u32(); c.height = r.u32(); c.width = r.u32();
        const std::uint32_t n = r.u32();
        if (n > r.remaining()) throw FormatError("corrupt checkpoint: hybrid channel list overruns payload");
        for (std::uint32_t k = 0; k < n; ++k) {
          const std::uint8_t kind = r.u8();
          if (kind > 1) throw FormatError("corrupt checkpoint: bad channel kind at byte offset " + std::to_string(r.pos() - 1));
          c.channels.push_back(static_cast<ChannelKind>(kind));
        }
        spec.layers.push_back(std::move(c));
        break;
      }
      case Tag::kAttention: { AttentionBlock a; a.d_model = r.u32(); a.n_heads = r.u32(); a.head_dim = r.u32(); spec.layers.push_back(a); break; }
      case Tag::kRelu: spec.layers.push_back(Relu{}); break;
      case Tag::kAvgPool: { AvgPool p; p.kernel = r.u32(); spec.layers.push_back(p); break; }
      case Tag::kFlatten: spec.layers.push_back(Flatten{}); break;
      case Tag::kSoftmax: spec.layers.push_back(Softmax{}); break;
      default:
        throw FormatError("corrupt checkpoint: unknown layer tag " + std::to_string(static_cast<int>(tag)) +
                          " at byte offset " + std::to_string(at));
    }
    if (r.pos() - start != len) {
      throw FormatError("corrupt checkpoint: descriptor length mismatch at byte offset " + std::to_string(at));
    }
  }
  std::vector<Shape> shapes;
  try {
    shapes = param_shapes(spec);
    validate(spec);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("corrupt checkpoint: invalid spec: ") + e.what());
  }
  Index expected = 0;
  for (const auto& s : shapes) expected += shape_size(s);
  const std::uint64_t count = r.u64();
  if (count != static_cast<std::uint64_t>(expected)) {
    throw FormatError("corrupt checkpoint: " + std::to_string(count) + " scalars stored, spec needs " +
                      std::to_string(expected));
  }
  if (r.remaining() != count * 8) {
    throw FormatError("corrupt checkpoint: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                      std::to_string(count * 8) + " (truncated or trailing data at byte offset " +
                      std::to_string(r.pos()) + ")");
  }
  TensorList params;
  for (const auto& s : shapes) {
    Tensor t(s);
    for (Index k = 0; k < t.size(); ++k) t[k] = r.f64();
    params.push_back(std::move(t));
  }
  return assemble(std::move(spec), std::move(params));
}

void save_file(const ModelInstance& model, const std::string& path) {
  const auto bytes = save(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

ModelInstance load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load(bytes);
}

}  // namespace hap
