#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hap/autodiff.hpp"
#include "hap/errors.hpp"
#include "hap/model.hpp"

namespace hap {

// Exact small-scale ground truth for the second-order machinery: dense
// Hessians, block traces and the closed-form pruning perturbations.

inline constexpr Index kDefaultHessianCap = 2000;
inline constexpr double kPivotFloor = 1e-10;

// Column i is H e_i, then (H + H^T) / 2.
Eigen::MatrixXd exact_hessian(const Tape& tape, Index cap = kDefaultHessianCap);
Eigen::MatrixXd exact_hessian(const ModelInstance& model, const Batch& batch, Index cap = kDefaultHessianCap);

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Indices of [0, n) not in subset, ascending.
std::vector<Index> complement(Index n, std::span<const Index> subset);

template <typename Scalar>
struct ObsPerturbation {
  // 1/2 w_p^T (H_pp - H_pl H_ll^-1 H_lp) w_p
  Scalar delta_loss;
  // H_ll^-1 H_lp w_p, ordered as `retained`.
  VectorX<Scalar> delta_w_l;
  // Full perturbation: -w_p on the pruned set, delta_w_l elsewhere.
  VectorX<Scalar> delta_w;
  std::vector<Index> retained;
};

// Optimal loss perturbation when the weights in prune_set are forced to zero
// and every other weight moves to compensate. H_ll is factored as LDL^T; a
// pivot below pivot_floor raises SingularError.
template <typename DerivedH, typename DerivedW>
ObsPerturbation<typename DerivedH::Scalar> obs_perturbation(const Eigen::MatrixBase<DerivedH>& h,
                                                            const Eigen::MatrixBase<DerivedW>& w,
                                                            std::span<const Index> prune_set,
                                                            double pivot_floor = kPivotFloor) {
  using Scalar = typename DerivedH::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Index n = h.rows();
  if (h.cols() != n || w.size() != n) throw ShapeError("obs_perturbation: H and w sizes disagree");
  for (Index i : prune_set) {
    if (i < 0 || i >= n) throw ShapeError("obs_perturbation: prune index out of range");
  }
  const std::vector<Index> retained = complement(n, prune_set);
  const std::vector<Index> pruned(prune_set.begin(), prune_set.end());

  const Matrix h_pp = h(pruned, pruned);
  const VectorX<Scalar> w_p = w(pruned);

  ObsPerturbation<Scalar> out;
  out.retained = retained;
  out.delta_w = VectorX<Scalar>::Zero(n);
  for (std::size_t k = 0; k < pruned.size(); ++k) out.delta_w[pruned[k]] = -w_p[static_cast<Index>(k)];

  if (retained.empty()) {
    out.delta_w_l.resize(0);
    out.delta_loss = Scalar(0.5) * w_p.dot(h_pp * w_p);
    return out;
  }
  const Matrix h_ll = h(retained, retained);
  const Matrix h_lp = h(retained, pruned);
  Eigen::LDLT<Matrix> ldlt(h_ll);
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() < pivot_floor) {
    throw SingularError("obs_perturbation: retained Hessian block is singular (pivot below " +
                        std::to_string(pivot_floor) + ")");
  }
  out.delta_w_l = ldlt.solve(h_lp * w_p);
  for (std::size_t k = 0; k < retained.size(); ++k) out.delta_w[retained[k]] = out.delta_w_l[static_cast<Index>(k)];
  const Matrix schur = h_pp - h_lp.transpose() * ldlt.solve(h_lp);
  out.delta_loss = Scalar(0.5) * w_p.dot(schur * w_p);
  return out;
}

// 1/2 w_p^T Diag(H_pp) w_p
template <typename DerivedH, typename DerivedW>
typename DerivedH::Scalar obd_perturbation(const Eigen::MatrixBase<DerivedH>& h, const Eigen::MatrixBase<DerivedW>& w,
                                           std::span<const Index> prune_set) {
  using Scalar = typename DerivedH::Scalar;
  const std::vector<Index> pruned(prune_set.begin(), prune_set.end());
  const VectorX<Scalar> w_p = w(pruned);
  const VectorX<Scalar> d = h.diagonal()(pruned);
  return Scalar(0.5) * w_p.dot(d.cwiseProduct(w_p));
}

template <typename DerivedH>
typename DerivedH::Scalar block_trace(const Eigen::MatrixBase<DerivedH>& h, std::span<const Index> members) {
  typename DerivedH::Scalar acc(0);
  for (Index i : members) acc += h(i, i);
  return acc;
}

// Trace(H_pp) / (2p) * ||w_p||^2 per group, from the exact Hessian.
template <typename DerivedH, typename DerivedW>
std::vector<typename DerivedH::Scalar> hap_score_exact(const Eigen::MatrixBase<DerivedH>& h,
                                                       const Eigen::MatrixBase<DerivedW>& w,
                                                       const std::vector<std::vector<Index>>& groups) {
  using Scalar = typename DerivedH::Scalar;
  std::vector<Scalar> scores;
  scores.reserve(groups.size());
  for (const auto& g : groups) {
    Scalar sq(0);
    for (Index i : g) sq += w[i] * w[i];
    scores.push_back(block_trace(h, std::span<const Index>(g)) / (Scalar(2) * static_cast<Scalar>(g.size())) * sq);
  }
  return scores;
}

std::vector<std::vector<Index>> member_lists(const ModelInstance& model);

// ---- enumeration oracle ------------------------------------------------------------

struct BruteForceResult {
  std::vector<std::size_t> best;  // positions into the candidate list, ascending
  double best_increase = 0.0;     // L(w with best removed) - L(w)
};

using FlatLossFn = std::function<double(const Eigen::VectorXd&)>;

// Enumerates every k-subset of groups, zeroes its members and re-evaluates
// loss. Allowed when the candidate count is at most 12 or k at most 3, and
// C(n, k) <= max_subsets.
BruteForceResult brute_force_best_groups(const FlatLossFn& loss, const Eigen::VectorXd& w,
                                         const std::vector<std::vector<Index>>& groups, Index k,
                                         Index max_subsets = 200000);

// Model form: candidates are the model's prunable groups (or `candidates`).
// Returned positions index `candidates`.
BruteForceResult brute_force_best_groups(const ModelInstance& model, const Batch& batch,
                                         std::span<const GroupId> candidates, Index k);

// True loss increase from removing each candidate group alone.
std::vector<double> single_group_loss_increase(const ModelInstance& model, const Batch& batch,
                                               std::span<const GroupId> candidates);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace hap
