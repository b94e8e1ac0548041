#pragma once

#include <cstdint>
#include <span>

#include "hap/model.hpp"
#include "hap/prune.hpp"

namespace hap {

// Removes Pruned channels and replaces Implant channels' 3x3 filters by 1x1
// filters initialized per `init`.
ModelInstance apply_implant(const ModelInstance& model, const PrunePlan& plan, ImplantInit init = ImplantInit::kCenterTap);
ModelInstance apply_implant(const ModelInstance& model, std::span<const Decision> decisions,
                            ImplantInit init = ImplantInit::kCenterTap);

// Implant-only plan over every 3x3 output channel: ceil(fraction * n) of them
// (at least one) chosen by `ordering` (Reverse: most sensitive first, Random:
// seeded shuffle, HAP: least sensitive first). Nothing is pruned.
PrunePlan lowrank_plan(const ModelInstance& model, std::span<const SensitivityRecord> records, double fraction,
                       Ordering ordering = Ordering::kReverse, std::uint64_t seed = 0);

ModelInstance lowrank_baseline(const ModelInstance& model, std::span<const SensitivityRecord> records, double fraction,
                               Ordering ordering = Ordering::kReverse, std::uint64_t seed = 0,
                               ImplantInit init = ImplantInit::kCenterTap);

// Smallest lowrank_plan whose remaining parameter fraction is at most
// param_fraction; InfeasibleError if even a fully pointwise model exceeds it.
PrunePlan lowrank_plan_for_budget(const ModelInstance& model, std::span<const SensitivityRecord> records,
                                  double param_fraction, Ordering ordering = Ordering::kReverse, std::uint64_t seed = 0);

}  // namespace hap
