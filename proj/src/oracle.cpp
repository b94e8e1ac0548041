#include "hap/oracle.hpp"

#include <algorithm>
#include <numeric>

namespace hap {

Eigen::MatrixXd exact_hessian(const Tape& tape, Index cap) {
  const Index n = total_size(tape.params());
  if (n > cap) {
    throw CapacityError("exact_hessian: " + std::to_string(n) + " parameters exceed the cap of " + std::to_string(cap));
  }
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (Index i = 0; i < n; ++i) {
    e[i] = 1.0;
    h.col(i) = flatten(hvp(tape, unflatten(e, tape.params())));
    e[i] = 0.0;
  }
  return 0.5 * (h + h.transpose());
}

Eigen::MatrixXd exact_hessian(const ModelInstance& model, const Batch& batch, Index cap) {
  const Index n = total_size(model.params);
  if (n > cap) {
    throw CapacityError("exact_hessian: " + std::to_string(n) + " parameters exceed the cap of " + std::to_string(cap));
  }
  return exact_hessian(record(model, batch).tape, cap);
}

std::vector<Index> complement(Index n, std::span<const Index> subset) {
  std::vector<bool> in(static_cast<std::size_t>(n), false);
  for (Index i : subset) in[static_cast<std::size_t>(i)] = true;
  std::vector<Index> rest;
  for (Index i = 0; i < n; ++i)
    if (!in[static_cast<std::size_t>(i)]) rest.push_back(i);
  return rest;
}

std::vector<std::vector<Index>> member_lists(const ModelInstance& model) {
  std::vector<std::vector<Index>> lists;
  lists.reserve(model.groups.size());
  for (const auto& g : model.groups) lists.push_back(g.members);
  return lists;
}

namespace {

double binomial(Index n, Index k) {
  double c = 1.0;
  for (Index i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
  return c;
}

}  // namespace

BruteForceResult brute_force_best_groups(const FlatLossFn& loss, const Eigen::VectorXd& w,
                                         const std::vector<std::vector<Index>>& groups, Index k,
                                         Index max_subsets) {
  const Index n = static_cast<Index>(groups.size());
  if (k < 1 || k > n) throw Error("brute_force_best_groups: k must be in [1, group count]");
  if (!(n <= 12 || k <= 3) || binomial(n, k) > static_cast<double>(max_subsets)) {
    throw CapacityError("brute_force_best_groups: C(" + std::to_string(n) + ", " + std::to_string(k) +
                        ") subsets is beyond the enumeration cap");
  }
  const double base = loss(w);
  BruteForceResult best{{}, std::numeric_limits<double>::infinity()};
  std::vector<std::size_t> pick(static_cast<std::size_t>(k));
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  while (true) {
    Eigen::VectorXd trial = w;
    for (std::size_t g : pick)
      for (Index m : groups[g]) trial[m] = 0.0;
    const double inc = loss(trial) - base;
    if (inc < best.best_increase) best = {pick, inc};
    // Next combination in lexicographic order.
    std::size_t i = pick.size();
    while (i > 0 && pick[i - 1] == static_cast<std::size_t>(n) - pick.size() + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < pick.size(); ++j) pick[j] = pick[j - 1] + 1;
  }
  return best;
}

namespace {

std::vector<GroupId> default_candidates(const ModelInstance& model, std::span<const GroupId> candidates) {
  if (!candidates.empty()) return {candidates.begin(), candidates.end()};
  std::vector<GroupId> ids;
  for (const auto& g : model.groups)
    if (g.prunable) ids.push_back(g.id);
  return ids;
}

FlatLossFn model_loss(const ModelInstance& model, const Batch& batch) {
  return [&model, &batch](const Eigen::VectorXd& w) {
    ModelInstance trial = model;
    trial.params = unflatten(w, model.params);
    return evaluate_loss(trial, batch);
  };
}

}  // namespace

BruteForceResult brute_force_best_groups(const ModelInstance& model, const Batch& batch,
                                         std::span<const GroupId> candidates, Index k) {
  const auto ids = default_candidates(model, candidates);
  std::vector<std::vector<Index>> groups;
  for (GroupId id : ids) groups.push_back(model.groups.at(static_cast<std::size_t>(id)).members);
  return brute_force_best_groups(model_loss(model, batch), flatten(model.params), groups, k);
}

std::vector<double> single_group_loss_increase(const ModelInstance& model, const Batch& batch,
                                               std::span<const GroupId> candidates) {
  const auto ids = default_candidates(model, candidates);
  const auto loss = model_loss(model, batch);
  const Eigen::VectorXd w = flatten(model.params);
  const double base = loss(w);
  std::vector<double> out;
  out.reserve(ids.size());
  for (GroupId id : ids) {
    Eigen::VectorXd trial = w;
    for (Index m : model.groups.at(static_cast<std::size_t>(id)).members) trial[m] = 0.0;
    out.push_back(loss(trial) - base);
  }
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman: need two equal-length series of length >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const Eigen::Map<const Eigen::VectorXd> va(ra.data(), static_cast<Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> vb(rb.data(), static_cast<Index>(rb.size()));
  const Eigen::VectorXd ca = va.array() - va.mean();
  const Eigen::VectorXd cb = vb.array() - vb.mean();
  const double denom = ca.norm() * cb.norm();
  if (denom == 0.0) return 0.0;
  return ca.dot(cb) / denom;
}

}  // namespace hap
