#include "hap/implant.hpp"

#include <algorithm>
#include <cmath>

#include "hap/errors.hpp"

namespace hap {

ModelInstance apply_implant(const ModelInstance& model, std::span<const Decision> decisions, ImplantInit init) {
  return restructure(model, decisions, init);
}

ModelInstance apply_implant(const ModelInstance& model, const PrunePlan& plan, ImplantInit init) {
  return restructure(model, plan.decisions, init);
}

namespace {

std::vector<GroupId> implant_order(const ModelInstance& model, std::span<const SensitivityRecord> records,
                                   Ordering ordering, std::uint64_t seed) {
  std::vector<SensitivityRecord> spatial;
  for (const auto& r : records)
    if (model.groups.at(static_cast<std::size_t>(r.group)).spatial) spatial.push_back(r);
  if (spatial.empty()) throw Error("lowrank: model has no 3x3 channels");
  return rank(spatial, ordering, seed);
}

PrunePlan plan_from_order(const ModelInstance& model, std::span<const SensitivityRecord> records,
                          const std::vector<GroupId>& order, std::size_t n, Ordering ordering, double fraction) {
  PrunePlan plan;
  plan.decisions.assign(model.groups.size(), Decision::kKeep);
  for (std::size_t k = 0; k < n; ++k) plan.decisions[static_cast<std::size_t>(order[k])] = Decision::kImplant;
  plan.ordering = ordering;
  plan.budget = {BudgetKind::kParamFraction, 1.0};
  plan.per_layer_limit = 1.0;
  plan.implant_ratio = fraction;
  plan.records.assign(records.begin(), records.end());
  finalize_plan(model, plan);
  plan.budget.value = plan.achieved;
  return plan;
}

}  // namespace

PrunePlan lowrank_plan(const ModelInstance& model, std::span<const SensitivityRecord> records, double fraction,
                       Ordering ordering, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("lowrank: fraction must lie in (0, 1]");
  const auto order = implant_order(model, records, ordering, seed);
  const auto n = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(order.size()) - 1e-9)), 1, order.size());
  return plan_from_order(model, records, order, n, ordering, fraction);
}

ModelInstance lowrank_baseline(const ModelInstance& model, std::span<const SensitivityRecord> records, double fraction,
                               Ordering ordering, std::uint64_t seed, ImplantInit init) {
  return apply_implant(model, lowrank_plan(model, records, fraction, ordering, seed), init);
}

PrunePlan lowrank_plan_for_budget(const ModelInstance& model, std::span<const SensitivityRecord> records,
                                  double param_fraction, Ordering ordering, std::uint64_t seed) {
  const auto order = implant_order(model, records, ordering, seed);
  for (std::size_t n = 1; n <= order.size(); ++n) {
    PrunePlan plan = plan_from_order(model, records, order, n, ordering,
                                     static_cast<double>(n) / static_cast<double>(order.size()));
    if (plan.achieved <= param_fraction + 1e-12) return plan;
  }
  throw InfeasibleError("lowrank-capacity", "implanting every 3x3 channel does not reach param fraction " +
                                                std::to_string(param_fraction));
}

}  // namespace hap
