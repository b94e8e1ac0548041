#include "hap/autodiff.hpp"

#include <cmath>
#include <string>

namespace hap {
namespace {

using Mat = Eigen::MatrixXd;

// Value paired with its directional derivative. Running the generic kernels
// below on Jets differentiates them along the seeded direction. An empty
// tangent stands for zero.
struct Jet {
  Mat v;
  Mat t;
};

// ---- kernel overloads: Mat and Jet -----------------------------------------

const Mat& value_of(const Mat& a) { return a; }
const Mat& value_of(const Jet& a) { return a.v; }

bool empty(const Mat& a) { return a.size() == 0; }
bool empty(const Jet& a) { return a.v.size() == 0; }
bool has_t(const Jet& a) { return a.t.size() != 0; }

// Sum of the tangent terms that are present.
template <class A, class B>
Mat tsum(bool ha, A&& fa, bool hb, B&& fb) {
  if (ha && hb) {
    Mat r = fa();
    r += fb();
    return r;
  }
  if (ha) return fa();
  if (hb) return fb();
  return Mat();
}

template <class F>
Mat tmap(const Jet& a, F&& f) {
  return has_t(a) ? Mat(f(a.t)) : Mat();
}

template <class M>
M zeros(Index rows, Index cols);
template <>
Mat zeros<Mat>(Index rows, Index cols) { return Mat::Zero(rows, cols); }
template <>
Jet zeros<Jet>(Index rows, Index cols) { return {Mat::Zero(rows, cols), Mat()}; }

Mat mm(const Mat& a, const Mat& b) { return a * b; }
Jet mm(const Jet& a, const Jet& b) {
  return {a.v * b.v, tsum(has_t(a), [&] { return Mat(a.t * b.v); }, has_t(b), [&] { return Mat(a.v * b.t); })};
}

Mat mm_tn(const Mat& a, const Mat& b) { return a.transpose() * b; }
Jet mm_tn(const Jet& a, const Jet& b) {
  return {a.v.transpose() * b.v, tsum(has_t(a), [&] { return Mat(a.t.transpose() * b.v); }, has_t(b),
                                      [&] { return Mat(a.v.transpose() * b.t); })};
}

Mat mm_nt(const Mat& a, const Mat& b) { return a * b.transpose(); }
Jet mm_nt(const Jet& a, const Jet& b) {
  return {a.v * b.v.transpose(), tsum(has_t(a), [&] { return Mat(a.t * b.v.transpose()); }, has_t(b),
                                      [&] { return Mat(a.v * b.t.transpose()); })};
}

Mat plus(const Mat& a, const Mat& b) { return a + b; }
Jet plus(const Jet& a, const Jet& b) {
  return {a.v + b.v, tsum(has_t(a), [&] { return a.t; }, has_t(b), [&] { return b.t; })};
}

Mat minus(const Mat& a, const Mat& b) { return a - b; }
Jet minus(const Jet& a, const Jet& b) {
  return {a.v - b.v, tsum(has_t(a), [&] { return a.t; }, has_t(b), [&] { return Mat(-b.t); })};
}

Mat hadamard(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }
Jet hadamard(const Jet& a, const Jet& b) {
  return {a.v.cwiseProduct(b.v), tsum(has_t(a), [&] { return Mat(a.t.cwiseProduct(b.v)); }, has_t(b),
                                      [&] { return Mat(a.v.cwiseProduct(b.t)); })};
}

Mat scale(const Mat& a, double s) { return a * s; }
Jet scale(const Jet& a, double s) { return {a.v * s, tmap(a, [&](const Mat& t) { return t * s; })}; }

// s is 1x1.
Mat times_scalar(const Mat& s, const Mat& a) { return a * s(0, 0); }
Jet times_scalar(const Jet& s, const Jet& a) {
  return {a.v * s.v(0, 0), tsum(has_t(a), [&] { return Mat(a.t * s.v(0, 0)); }, has_t(s),
                                [&] { return Mat(a.v * s.t(0, 0)); })};
}

Mat mask_mul(const Mat& a, const Mat& mask) { return a.cwiseProduct(mask); }
Jet mask_mul(const Jet& a, const Mat& mask) {
  return {a.v.cwiseProduct(mask), tmap(a, [&](const Mat& t) { return t.cwiseProduct(mask); })};
}

Mat row_sums(const Mat& a) { return a.rowwise().sum(); }
Jet row_sums(const Jet& a) { return {a.v.rowwise().sum(), tmap(a, [](const Mat& t) { return t.rowwise().sum(); })}; }

Mat col_sums(const Mat& a) { return a.colwise().sum(); }
Jet col_sums(const Jet& a) { return {a.v.colwise().sum(), tmap(a, [](const Mat& t) { return t.colwise().sum(); })}; }

Mat sum_all(const Mat& a) { return Mat::Constant(1, 1, a.sum()); }
Jet sum_all(const Jet& a) {
  return {Mat::Constant(1, 1, a.v.sum()), tmap(a, [](const Mat& t) { return Mat::Constant(1, 1, t.sum()); })};
}

// x + b 1^T, b a column.
Mat add_col_broadcast(const Mat& x, const Mat& b) { return x.colwise() + b.col(0); }
Jet add_col_broadcast(const Jet& x, const Jet& b) {
  Mat t;
  if (has_t(x) && has_t(b)) t = x.t.colwise() + b.t.col(0);
  else if (has_t(x)) t = x.t;
  else if (has_t(b)) t = b.t.col(0).replicate(1, x.v.cols());
  return {x.v.colwise() + b.v.col(0), std::move(t)};
}

// x - 1 r, r a row.
Mat sub_row_broadcast(const Mat& x, const Mat& r) { return x.rowwise() - r.row(0); }
Jet sub_row_broadcast(const Jet& x, const Jet& r) {
  Mat t;
  if (has_t(x) && has_t(r)) t = x.t.rowwise() - r.t.row(0);
  else if (has_t(x)) t = x.t;
  else if (has_t(r)) t = -r.t.row(0).replicate(x.v.rows(), 1);
  return {x.v.rowwise() - r.v.row(0), std::move(t)};
}

Mat softmax_cols(const Mat& z) {
  Mat s = z.rowwise() - z.colwise().maxCoeff();
  s = s.array().exp().matrix();
  s.array().rowwise() /= s.colwise().sum().array();
  return s;
}
Jet softmax_cols(const Jet& z) {
  Mat s = softmax_cols(z.v);
  if (!has_t(z)) return {std::move(s), Mat()};
  Mat st = s.cwiseProduct(z.t);
  Mat t = st - s * st.colwise().sum().asDiagonal();
  return {std::move(s), std::move(t)};
}

// log-sum-exp of each column, as a row.
Mat lse_cols(const Mat& z) {
  Eigen::RowVectorXd m = z.colwise().maxCoeff();
  Eigen::RowVectorXd sums = (z.rowwise() - m).array().exp().matrix().colwise().sum();
  return (sums.array().log() + m.array()).matrix();
}
Jet lse_cols(const Jet& z) {
  if (!has_t(z)) return {lse_cols(z.v), Mat()};
  Mat s = softmax_cols(z.v);
  return {lse_cols(z.v), s.cwiseProduct(z.t).colwise().sum()};
}

Mat block(const Mat& a, Index r, Index c, Index nr, Index nc) { return a.block(r, c, nr, nc); }
Jet block(const Jet& a, Index r, Index c, Index nr, Index nc) {
  return {a.v.block(r, c, nr, nc), tmap(a, [&](const Mat& t) { return t.block(r, c, nr, nc); })};
}

void add_block(Mat& dst, Index r, Index c, const Mat& src) {
  dst.block(r, c, src.rows(), src.cols()) += src;
}
void add_block(Jet& dst, Index r, Index c, const Jet& src) {
  dst.v.block(r, c, src.v.rows(), src.v.cols()) += src.v;
  if (!has_t(src)) return;
  if (!has_t(dst)) dst.t = Mat::Zero(dst.v.rows(), dst.v.cols());
  dst.t.block(r, c, src.t.rows(), src.t.cols()) += src.t;
}

template <class F>
Mat linear(const Mat& a, F&& f) { return f(a); }
template <class F>
Jet linear(const Jet& a, F&& f) { return {f(a.v), tmap(a, f)}; }

void accumulate(Mat& into, const Mat& g) {
  if (empty(into)) into = g;
  else into += g;
}
void accumulate(Jet& into, const Jet& g) {
  if (empty(into)) {
    into = g;
    return;
  }
  into.v += g.v;
  if (!has_t(g)) return;
  if (has_t(into)) into.t += g.t;
  else into.t = g.t;
}

// ---- linear index maps -------------------------------------------------------

Mat im2col(const Mat& x, const ConvGeometry& g) {
  const Index hw = g.height * g.width;
  const Index batch = x.cols() / hw;
  const Index oh = g.out_height(), ow = g.out_width();
  const Index pad = g.same_padding ? g.kernel / 2 : 0;
  const Index kk = g.kernel * g.kernel;
  Mat cols = Mat::Zero(g.channels_in * kk, batch * oh * ow);
  for (Index n = 0; n < batch; ++n) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index col = n * oh * ow + oy * ow + ox;
        for (Index ky = 0; ky < g.kernel; ++ky) {
          const Index y = oy + ky - pad;
          if (y < 0 || y >= g.height) continue;
          for (Index kx = 0; kx < g.kernel; ++kx) {
            const Index xx = ox + kx - pad;
            if (xx < 0 || xx >= g.width) continue;
            const Index src = n * hw + y * g.width + xx;
            const Index tap = ky * g.kernel + kx;
            for (Index c = 0; c < g.channels_in; ++c) {
              cols(c * kk + tap, col) = x(c, src);
            }
          }
        }
      }
    }
  }
  return cols;
}

Mat col2im(const Mat& cols, const ConvGeometry& g) {
  const Index hw = g.height * g.width;
  const Index oh = g.out_height(), ow = g.out_width();
  const Index batch = cols.cols() / (oh * ow);
  const Index pad = g.same_padding ? g.kernel / 2 : 0;
  const Index kk = g.kernel * g.kernel;
  Mat x = Mat::Zero(g.channels_in, batch * hw);
  for (Index n = 0; n < batch; ++n) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index col = n * oh * ow + oy * ow + ox;
        for (Index ky = 0; ky < g.kernel; ++ky) {
          const Index y = oy + ky - pad;
          if (y < 0 || y >= g.height) continue;
          for (Index kx = 0; kx < g.kernel; ++kx) {
            const Index xx = ox + kx - pad;
            if (xx < 0 || xx >= g.width) continue;
            const Index dst = n * hw + y * g.width + xx;
            const Index tap = ky * g.kernel + kx;
            for (Index c = 0; c < g.channels_in; ++c) {
              x(c, dst) += cols(c * kk + tap, col);
            }
          }
        }
      }
    }
  }
  return x;
}

Mat pool_forward(const Mat& x, const PoolGeometry& g) {
  const Index hw = g.height * g.width;
  const Index batch = x.cols() / hw;
  const Index oh = g.height / g.kernel, ow = g.width / g.kernel;
  const double inv = 1.0 / static_cast<double>(g.kernel * g.kernel);
  Mat out = Mat::Zero(x.rows(), batch * oh * ow);
  for (Index n = 0; n < batch; ++n) {
    for (Index y = 0; y < oh * g.kernel; ++y) {
      for (Index xx = 0; xx < ow * g.kernel; ++xx) {
        out.col(n * oh * ow + (y / g.kernel) * ow + xx / g.kernel) +=
            inv * x.col(n * hw + y * g.width + xx);
      }
    }
  }
  return out;
}

Mat pool_adjoint(const Mat& up, const PoolGeometry& g) {
  const Index hw = g.height * g.width;
  const Index oh = g.height / g.kernel, ow = g.width / g.kernel;
  const Index batch = up.cols() / (oh * ow);
  const double inv = 1.0 / static_cast<double>(g.kernel * g.kernel);
  Mat x = Mat::Zero(up.rows(), batch * hw);
  for (Index n = 0; n < batch; ++n) {
    for (Index y = 0; y < oh * g.kernel; ++y) {
      for (Index xx = 0; xx < ow * g.kernel; ++xx) {
        x.col(n * hw + y * g.width + xx) = inv * up.col(n * oh * ow + (y / g.kernel) * ow + xx / g.kernel);
      }
    }
  }
  return x;
}

Mat flatten_channels(const Mat& x, Index channels, Index positions) {
  const Index batch = x.cols() / positions;
  Mat y(channels * positions, batch);
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < channels; ++c)
      for (Index p = 0; p < positions; ++p) y(c * positions + p, n) = x(c, n * positions + p);
  return y;
}

Mat unflatten_channels(const Mat& y, Index channels, Index positions) {
  const Index batch = y.cols();
  Mat x(channels, batch * positions);
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < channels; ++c)
      for (Index p = 0; p < positions; ++p) x(c, n * positions + p) = y(c * positions + p, n);
  return x;
}

Mat apply_reshape(const Mat& x, const ReshapeSpec& s, bool adjoint) {
  const bool flatten = (s.kind == ReshapeSpec::Kind::kFlatten) != adjoint;
  return flatten ? flatten_channels(x, s.channels, s.positions)
                 : unflatten_channels(x, s.channels, s.positions);
}

// ---- attention ----------------------------------------------------------------

template <class M>
M attention_forward(const M& q, const M& k, const M& v, const AttentionGeometry& g) {
  const Index seq = g.seq_len, dh = g.head_dim;
  const Index batch = value_of(q).cols() / seq;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  M out = zeros<M>(g.heads * dh, batch * seq);
  for (Index n = 0; n < batch; ++n) {
    for (Index h = 0; h < g.heads; ++h) {
      const M qb = block(q, h * dh, n * seq, dh, seq);
      const M kb = block(k, h * dh, n * seq, dh, seq);
      const M vb = block(v, h * dh, n * seq, dh, seq);
      // scores(key, query); softmax over keys, i.e. down each column.
      const M attn = softmax_cols(scale(mm_tn(kb, qb), inv_sqrt));
      add_block(out, h * dh, n * seq, mm(vb, attn));
    }
  }
  return out;
}

template <class M>
void attention_backward(const M& q, const M& k, const M& v, const M& up,
                        const AttentionGeometry& g, M* gq, M* gk, M* gv) {
  const Index seq = g.seq_len, dh = g.head_dim;
  const Index batch = value_of(q).cols() / seq;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  M dq = zeros<M>(g.heads * dh, batch * seq);
  M dk = zeros<M>(g.heads * dh, batch * seq);
  M dv = zeros<M>(g.heads * dh, batch * seq);
  for (Index n = 0; n < batch; ++n) {
    for (Index h = 0; h < g.heads; ++h) {
      const M qb = block(q, h * dh, n * seq, dh, seq);
      const M kb = block(k, h * dh, n * seq, dh, seq);
      const M vb = block(v, h * dh, n * seq, dh, seq);
      const M ub = block(up, h * dh, n * seq, dh, seq);
      const M attn = softmax_cols(scale(mm_tn(kb, qb), inv_sqrt));
      add_block(dv, h * dh, n * seq, mm_nt(ub, attn));
      const M dattn = mm_tn(vb, ub);
      const M dscores = scale(
          hadamard(attn, sub_row_broadcast(dattn, col_sums(hadamard(attn, dattn)))), inv_sqrt);
      add_block(dq, h * dh, n * seq, mm(kb, dscores));
      add_block(dk, h * dh, n * seq, mm_nt(qb, dscores));
    }
  }
  if (gq) accumulate(*gq, dq);
  if (gk) accumulate(*gk, dk);
  if (gv) accumulate(*gv, dv);
}

// ---- per-node evaluation and backprop -----------------------------------------

// im2col of a conv input's value (recorded on the tape) and of its tangent.
struct Patches {
  const Mat* v = nullptr;
  const Mat* t = nullptr;
  bool has_t() const { return t != nullptr && t->size() != 0; }
};

Mat conv_apply(const Mat& w, const Patches& p) { return w * *p.v; }
Jet conv_apply(const Jet& w, const Patches& p) {
  return {w.v * *p.v, tsum(has_t(w), [&] { return Mat(w.t * *p.v); }, p.has_t(), [&] { return Mat(w.v * *p.t); })};
}

Mat conv_weight_grad(const Mat& up, const Patches& p) { return up * p.v->transpose(); }
Jet conv_weight_grad(const Jet& up, const Patches& p) {
  return {up.v * p.v->transpose(), tsum(has_t(up), [&] { return Mat(up.t * p.v->transpose()); }, p.has_t(),
                                        [&] { return Mat(up.v * p.t->transpose()); })};
}

double example_count(const Mat& logits) { return static_cast<double>(logits.cols()); }

template <class M>
M eval_node(const Node& node, const std::vector<M>& values, const Patches& patches) {
  auto in = [&](std::size_t i) -> const M& {
    return values[static_cast<std::size_t>(node.inputs[i])];
  };
  switch (node.op) {
    case OpKind::kMatMul:
      return mm(in(0), in(1));
    case OpKind::kConv2d: {
      return conv_apply(in(0), patches);
    }
    case OpKind::kBiasAdd:
      return add_col_broadcast(in(0), in(1));
    case OpKind::kRelu: {
      const Mat mask = (value_of(in(0)).array() > 0.0).template cast<double>().matrix();
      return mask_mul(in(0), mask);
    }
    case OpKind::kAvgPool: {
      const auto& g = std::get<PoolGeometry>(node.attributes);
      return linear(in(0), [&](const Mat& x) { return pool_forward(x, g); });
    }
    case OpKind::kSoftmax:
      return softmax_cols(in(0));
    case OpKind::kCrossEntropy: {
      const double n = example_count(value_of(in(0)));
      return scale(minus(sum_all(lse_cols(in(0))), sum_all(hadamard(in(1), in(0)))), 1.0 / n);
    }
    case OpKind::kMse: {
      const double n = example_count(value_of(in(0)));
      const M d = minus(in(0), in(1));
      return scale(sum_all(hadamard(d, d)), 0.5 / n);
    }
    case OpKind::kAdd:
      return plus(in(0), in(1));
    case OpKind::kMul:
      return hadamard(in(0), in(1));
    case OpKind::kReshape: {
      const auto& s = std::get<ReshapeSpec>(node.attributes);
      return linear(in(0), [&](const Mat& x) { return apply_reshape(x, s, false); });
    }
    case OpKind::kAttention:
      return attention_forward(in(0), in(1), in(2), std::get<AttentionGeometry>(node.attributes));
    case OpKind::kParameter:
    case OpKind::kConstant:
      break;
  }
  throw Error(std::string("eval_node: leaf op ") + op_name(node.op));
}

template <class M>
void backprop_node(const Node& node, const std::vector<Node>& nodes, const std::vector<M>& values,
                   const M& out, const M& up, const Patches& patches, const std::vector<char>* live,
                   std::vector<M>& grads) {
  auto in = [&](std::size_t i) -> const M& {
    return values[static_cast<std::size_t>(node.inputs[i])];
  };
  auto wants = [&](std::size_t i) {
    const auto id = static_cast<std::size_t>(node.inputs[i]);
    return nodes[id].requires_grad && (live == nullptr || (*live)[id]);
  };
  auto grad = [&](std::size_t i) -> M& { return grads[static_cast<std::size_t>(node.inputs[i])]; };

  switch (node.op) {
    case OpKind::kMatMul:
      if (wants(0)) accumulate(grad(0), mm_nt(up, in(1)));
      if (wants(1)) accumulate(grad(1), mm_tn(in(0), up));
      return;
    case OpKind::kConv2d: {
      const auto& g = std::get<ConvGeometry>(node.attributes);
      if (wants(0)) accumulate(grad(0), conv_weight_grad(up, patches));
      if (wants(1)) {
        const M dcols = mm_tn(in(0), up);
        accumulate(grad(1), linear(dcols, [&](const Mat& c) { return col2im(c, g); }));
      }
      return;
    }
    case OpKind::kBiasAdd:
      if (wants(0)) accumulate(grad(0), up);
      if (wants(1)) accumulate(grad(1), row_sums(up));
      return;
    case OpKind::kRelu:
      if (wants(0)) {
        const Mat mask = (value_of(in(0)).array() > 0.0).template cast<double>().matrix();
        accumulate(grad(0), mask_mul(up, mask));
      }
      return;
    case OpKind::kAvgPool: {
      const auto& g = std::get<PoolGeometry>(node.attributes);
      if (wants(0)) accumulate(grad(0), linear(up, [&](const Mat& u) { return pool_adjoint(u, g); }));
      return;
    }
    case OpKind::kSoftmax:
      if (wants(0)) {
        accumulate(grad(0), hadamard(out, sub_row_broadcast(up, col_sums(hadamard(out, up)))));
      }
      return;
    case OpKind::kCrossEntropy: {
      const double n = example_count(value_of(in(0)));
      if (wants(0)) {
        accumulate(grad(0), times_scalar(up, scale(minus(softmax_cols(in(0)), in(1)), 1.0 / n)));
      }
      if (wants(1)) throw Error("cross_entropy: gradient w.r.t. targets is not supported");
      return;
    }
    case OpKind::kMse: {
      const double n = example_count(value_of(in(0)));
      const M d = scale(minus(in(0), in(1)), 1.0 / n);
      if (wants(0)) accumulate(grad(0), times_scalar(up, d));
      if (wants(1)) accumulate(grad(1), times_scalar(up, scale(d, -1.0)));
      return;
    }
    case OpKind::kAdd:
      if (wants(0)) accumulate(grad(0), up);
      if (wants(1)) accumulate(grad(1), up);
      return;
    case OpKind::kMul:
      if (wants(0)) accumulate(grad(0), hadamard(up, in(1)));
      if (wants(1)) accumulate(grad(1), hadamard(up, in(0)));
      return;
    case OpKind::kReshape: {
      const auto& s = std::get<ReshapeSpec>(node.attributes);
      if (wants(0)) accumulate(grad(0), linear(up, [&](const Mat& u) { return apply_reshape(u, s, true); }));
      return;
    }
    case OpKind::kAttention:
      attention_backward(in(0), in(1), in(2), up, std::get<AttentionGeometry>(node.attributes),
                         wants(0) ? &grad(0) : nullptr, wants(1) ? &grad(1) : nullptr,
                         wants(2) ? &grad(2) : nullptr);
      return;
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;
  }
}

// Reverse sweep from the output; returns per-parameter gradients as matrices.
// Only inputs with live[input] set receive adjoints; null means all.
template <class M, class P>
std::vector<M> backward(const Tape& tape, const std::vector<M>& values, M seed, P&& patches,
                        const std::vector<char>* live = nullptr) {
  const auto& nodes = tape.nodes();
  std::vector<M> grads(nodes.size());
  grads[static_cast<std::size_t>(tape.output())] = std::move(seed);
  for (auto id = static_cast<std::size_t>(tape.output()) + 1; id-- > 0;) {
    const Node& node = nodes[id];
    if (!node.requires_grad || empty(grads[id])) continue;
    if (node.op == OpKind::kParameter || node.op == OpKind::kConstant) continue;
    backprop_node(node, nodes, values, values[id], grads[id], patches(id), live, grads);
  }
  std::vector<M> param_grads(tape.params().size());
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    if (nodes[id].op != OpKind::kParameter || empty(grads[id])) continue;
    accumulate(param_grads[std::get<std::size_t>(nodes[id].attributes)], grads[id]);
  }
  return param_grads;
}

Tensor to_tensor(const Mat& m, const Shape& shape) {
  // param_matrix() maps (d0, rest) row-major onto this matrix.
  Tensor t(shape);
  t.matrix() = m;
  return t;
}

void check_tape_scalar(const Tape& tape) {
  if (tape.output() < 0 || !tape.scalar_output()) {
    throw ShapeError("tape output is not a scalar");
  }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kRelu: return "relu";
    case OpKind::kAvgPool: return "avg_pool";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kMse: return "mse";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kReshape: return "reshape";
    case OpKind::kAttention: return "attention";
  }
  return "unknown";
}

Eigen::MatrixXd param_matrix(const Tensor& t) { return t.matrix(); }

GraphBuilder::GraphBuilder(TensorList params) {
  for (const auto& p : params) {
    if (!p.all_finite()) throw NumericError("non-finite parameter value");
  }
  tape_.params_ = std::move(params);
}

NodeId GraphBuilder::push(Node node) {
  for (NodeId id : node.inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= tape_.nodes_.size()) {
      throw Error("graph input refers to an unknown node");
    }
    node.requires_grad = node.requires_grad || tape_.nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  Mat value;
  Mat patches;
  if (node.op == OpKind::kConv2d) {
    patches = im2col(tape_.values_[static_cast<std::size_t>(node.inputs[1])], std::get<ConvGeometry>(node.attributes));
    value = conv_apply(tape_.values_[static_cast<std::size_t>(node.inputs[0])], Patches{&patches, nullptr});
  } else if (node.op == OpKind::kParameter) {
    value = param_matrix(tape_.params_.at(std::get<std::size_t>(node.attributes)));
  } else if (node.op == OpKind::kConstant) {
    value = *std::get<std::shared_ptr<const Mat>>(node.attributes);
  } else {
    value = eval_node<Mat>(node, tape_.values_, Patches{});
  }
  if (!value.allFinite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(node.op));
  }
  tape_.nodes_.push_back(std::move(node));
  tape_.values_.push_back(std::move(value));
  tape_.patches_.push_back(std::move(patches));
  return static_cast<NodeId>(tape_.nodes_.size() - 1);
}

const Eigen::MatrixXd& GraphBuilder::value(NodeId id) const { return tape_.value(id); }

NodeId GraphBuilder::parameter(std::size_t index) {
  if (index >= tape_.params_.size()) throw Error("parameter index out of range");
  Node n;
  n.op = OpKind::kParameter;
  n.attributes = index;
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId GraphBuilder::constant(Eigen::MatrixXd value) {
  Node n;
  n.op = OpKind::kConstant;
  n.attributes = std::make_shared<const Mat>(std::move(value));
  return push(std::move(n));
}

namespace {
void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}
std::string dims(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}
}  // namespace

NodeId GraphBuilder::matmul(NodeId a, NodeId b) {
  require(value(a).cols() == value(b).rows(), "matmul", dims(value(a)) + " * " + dims(value(b)));
  return push({OpKind::kMatMul, {a, b}, {}, false});
}

NodeId GraphBuilder::conv2d(NodeId weight, NodeId x, const ConvGeometry& g) {
  const auto& w = value(weight);
  const auto& in = value(x);
  require(g.kernel >= 1 && g.height >= 1 && g.width >= 1, "conv2d", "bad geometry");
  require(g.same_padding ? g.kernel % 2 == 1 : (g.kernel <= g.height && g.kernel <= g.width),
          "conv2d", "kernel does not fit padding mode");
  require(in.rows() == g.channels_in, "conv2d", "input channels " + std::to_string(in.rows()));
  require(in.cols() % (g.height * g.width) == 0, "conv2d", "input columns not a multiple of H*W");
  require(w.cols() == g.channels_in * g.kernel * g.kernel, "conv2d", "weight is " + dims(w));
  return push({OpKind::kConv2d, {weight, x}, g, false});
}

NodeId GraphBuilder::bias_add(NodeId x, NodeId bias) {
  require(value(bias).cols() == 1 && value(bias).rows() == value(x).rows(), "bias_add",
          dims(value(x)) + " + " + dims(value(bias)));
  return push({OpKind::kBiasAdd, {x, bias}, {}, false});
}

NodeId GraphBuilder::relu(NodeId x) { return push({OpKind::kRelu, {x}, {}, false}); }

NodeId GraphBuilder::avg_pool(NodeId x, const PoolGeometry& g) {
  require(g.kernel >= 1 && g.height % g.kernel == 0 && g.width % g.kernel == 0, "avg_pool",
          "kernel must divide the spatial size");
  require(value(x).cols() % (g.height * g.width) == 0, "avg_pool", "columns not a multiple of H*W");
  return push({OpKind::kAvgPool, {x}, g, false});
}

NodeId GraphBuilder::softmax(NodeId x) { return push({OpKind::kSoftmax, {x}, {}, false}); }

NodeId GraphBuilder::cross_entropy(NodeId logits, NodeId targets) {
  require(value(logits).rows() == value(targets).rows() && value(logits).cols() == value(targets).cols(),
          "cross_entropy", dims(value(logits)) + " vs targets " + dims(value(targets)));
  require(value(logits).cols() > 0, "cross_entropy", "empty batch");
  return push({OpKind::kCrossEntropy, {logits, targets}, {}, false});
}

NodeId GraphBuilder::mse(NodeId prediction, NodeId targets) {
  require(value(prediction).rows() == value(targets).rows() &&
              value(prediction).cols() == value(targets).cols(),
          "mse", dims(value(prediction)) + " vs targets " + dims(value(targets)));
  require(value(prediction).cols() > 0, "mse", "empty batch");
  return push({OpKind::kMse, {prediction, targets}, {}, false});
}

NodeId GraphBuilder::add(NodeId a, NodeId b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add",
          dims(value(a)) + " + " + dims(value(b)));
  return push({OpKind::kAdd, {a, b}, {}, false});
}

NodeId GraphBuilder::mul(NodeId a, NodeId b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "mul",
          dims(value(a)) + " * " + dims(value(b)));
  return push({OpKind::kMul, {a, b}, {}, false});
}

NodeId GraphBuilder::reshape(NodeId x, const ReshapeSpec& s) {
  const auto& in = value(x);
  if (s.kind == ReshapeSpec::Kind::kFlatten) {
    require(in.rows() == s.channels && in.cols() % s.positions == 0, "reshape", "flatten of " + dims(in));
  } else {
    require(in.rows() == s.channels * s.positions, "reshape", "unflatten of " + dims(in));
  }
  return push({OpKind::kReshape, {x}, s, false});
}

NodeId GraphBuilder::attention(NodeId q, NodeId k, NodeId v, const AttentionGeometry& g) {
  const Index rows = g.heads * g.head_dim;
  for (NodeId id : {q, k, v}) {
    require(value(id).rows() == rows && value(id).cols() % g.seq_len == 0, "attention",
            "projection is " + dims(value(id)));
  }
  require(value(q).cols() == value(k).cols() && value(k).cols() == value(v).cols(), "attention",
          "Q/K/V column counts differ");
  return push({OpKind::kAttention, {q, k, v}, g, false});
}

Tape GraphBuilder::finish(NodeId output) && {
  if (output < 0 || static_cast<std::size_t>(output) >= tape_.nodes_.size()) {
    throw Error("finish: unknown output node");
  }
  tape_.output_ = output;
  return std::move(tape_);
}

ForwardResult forward(const ModelFn& model_fn, const TensorList& params, const Batch& batch) {
  if (batch.size() == 0) throw ShapeError("forward: empty batch");
  if (batch.targets.rank() == 0 || batch.targets.dim(0) != batch.size()) {
    throw ShapeError("forward: inputs and targets disagree on batch size");
  }
  GraphBuilder builder(params);
  const NodeId out = model_fn(builder, batch);
  Tape tape = std::move(builder).finish(out);
  check_tape_scalar(tape);
  const double loss = tape.loss();
  return {loss, std::move(tape)};
}

TensorList gradient(const Tape& tape) {
  check_tape_scalar(tape);
  auto grads = backward<Mat>(tape, tape.values(), Mat::Ones(1, 1),
                             [&](std::size_t id) { return Patches{&tape.patches(static_cast<NodeId>(id)), nullptr}; });
  TensorList out;
  out.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& shape = tape.params()[i].shape();
    out.push_back(empty(grads[i]) ? Tensor::zeros(shape) : to_tensor(grads[i], shape));
  }
  return out;
}

namespace {

void check_direction(const Tape& tape, const TensorList& v) {
  const auto& params = tape.params();
  if (v.size() != params.size()) throw ShapeError("hvp: direction has wrong number of tensors");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i].shape() != params[i].shape()) {
      throw ShapeError("hvp: direction shape " + shape_string(v[i].shape()) + " does not match " +
                       shape_string(params[i].shape()));
    }
  }
}

// Gradient jets along v. A node carries a tangent only downstream of a
// nonzero direction tensor; with `restrict` set, adjoints are also confined
// to that region, which is enough for the entries of H v on v's support.
std::vector<Jet> hvp_jets(const Tape& tape, const TensorList& v, bool restrict) {
  check_tape_scalar(tape);
  check_direction(tape, v);
  const auto& nodes = tape.nodes();
  std::vector<char> live(nodes.size(), 0);
  std::vector<Jet> values(nodes.size());
  std::vector<Mat> tangent_patches(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& node = nodes[i];
    const auto id = static_cast<NodeId>(i);
    if (node.op == OpKind::kParameter) {
      const Tensor& d = v[std::get<std::size_t>(node.attributes)];
      const bool nonzero = !d.matrix().isZero(0.0);
      live[i] = nonzero;
      values[i] = {tape.value(id), nonzero ? param_matrix(d) : Mat()};
      continue;
    }
    for (NodeId in : node.inputs) live[i] = live[i] || live[static_cast<std::size_t>(in)];
    if (!live[i]) {
      values[i] = {tape.value(id), Mat()};
      continue;
    }
    if (node.op == OpKind::kConv2d) {
      const Jet& w = values[static_cast<std::size_t>(node.inputs[0])];
      const Jet& x = values[static_cast<std::size_t>(node.inputs[1])];
      if (has_t(x)) tangent_patches[i] = im2col(x.t, std::get<ConvGeometry>(node.attributes));
      const Mat& pv = tape.patches(id);
      const Mat& pt = tangent_patches[i];
      values[i] = {tape.value(id), tsum(has_t(w), [&] { return Mat(w.t * pv); }, has_t(x), [&] { return Mat(w.v * pt); })};
      continue;
    }
    values[i] = eval_node<Jet>(node, values, Patches{});
    values[i].v = tape.value(id);
  }
  return backward<Jet>(
      tape, values, Jet{Mat::Ones(1, 1), Mat()},
      [&](std::size_t id) { return Patches{&tape.patches(static_cast<NodeId>(id)), &tangent_patches[id]}; },
      restrict ? &live : nullptr);
}

}  // namespace

TensorList hvp(const Tape& tape, const TensorList& v) {
  const auto grads = hvp_jets(tape, v, false);
  const auto& params = tape.params();
  TensorList out;
  out.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& shape = params[i].shape();
    out.push_back(empty(grads[i]) || !has_t(grads[i]) ? Tensor::zeros(shape) : to_tensor(grads[i].t, shape));
    if (!out.back().all_finite()) throw NumericError("hvp: non-finite Hessian-vector product");
  }
  return out;
}

double quadratic_form(const Tape& tape, const TensorList& v) {
  const auto grads = hvp_jets(tape, v, true);
  double q = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (empty(grads[i]) || !has_t(grads[i])) continue;
    q += (param_matrix(v[i]).array() * grads[i].t.array()).sum();
  }
  if (!std::isfinite(q)) throw NumericError("hvp: non-finite Hessian-vector product");
  return q;
}

}  // namespace hap
