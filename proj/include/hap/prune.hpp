#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hap/hessian_probe.hpp"
#include "hap/model.hpp"

namespace hap {

struct SensitivityRecord {
  GroupId group = 0;
  std::size_t layer = 0;
  Index index = 0;
  GroupKind kind = GroupKind::kOutChannel;
  double raw_trace = 0.0;  // as estimated, possibly negative
  double trace = 0.0;      // clamped at 0
  Index p = 0;
  double weight_sq_norm = 0.0;
  double score = 0.0;  // trace * weight_sq_norm / (2p)
};

double sensitivity(double trace, Index p, double weight_sq_norm);

// traces[i] must describe group i.
std::vector<SensitivityRecord> score_groups(const ModelInstance& model, std::span<const TraceEstimate> traces);
std::vector<SensitivityRecord> score_groups(const ModelInstance& model, std::span<const double> traces);

enum class Ordering : std::uint8_t { kHap, kReverse, kRandom, kMagnitude };

const char* ordering_name(Ordering ordering);
Ordering parse_ordering(const std::string& name);

// Group ids, first to prune first.
std::vector<GroupId> rank(std::span<const SensitivityRecord> records, Ordering ordering, std::uint64_t seed = 0);

enum class BudgetKind : std::uint8_t { kParamFraction, kFlopFraction, kChannelFraction, kHeadFraction };

const char* budget_kind_name(BudgetKind kind);
BudgetKind parse_budget_kind(const std::string& name);

// Fraction REMAINING after the plan. Channel fraction is over prunable output
// channels and counts implanted channels as removed; head fraction is over
// attention heads.
struct Budget {
  BudgetKind kind = BudgetKind::kParamFraction;
  double value = 1.0;
};

inline constexpr double kDefaultPerLayerLimit = 0.75;
inline constexpr double kDefaultImplantRatio = 0.2;
inline constexpr int kImplantFixpointCap = 100;

struct SelectOptions {
  Budget budget;
  double per_layer_limit = kDefaultPerLayerLimit;
  double implant_ratio = 0.0;
};

struct LayerCounts {
  std::size_t layer = 0;
  Index groups = 0;
  Index pruned = 0;
  Index implanted = 0;
};

struct PrunePlan {
  std::vector<Decision> decisions;  // by group id
  Ordering ordering = Ordering::kHap;
  Budget budget;
  double per_layer_limit = kDefaultPerLayerLimit;
  double implant_ratio = 0.0;
  std::vector<SensitivityRecord> records;
  CostReport before;
  CostReport after;
  double achieved = 1.0;  // remaining fraction in the budget's unit
  std::vector<LayerCounts> per_layer;

  Index count(Decision d) const;
};

// Parameter/MAC totals of the model restructured by decisions, from the
// per-layer arithmetic alone.
CostReport predict_cost(const ModelInstance& model, std::span<const Decision> decisions);

// Remaining fraction of `kind` under decisions.
double remaining_fraction(const ModelInstance& model, std::span<const Decision> decisions, BudgetKind kind);

// Greedy walk over `ranked` under the budget, per-layer limit and the
// one-unit floor, then implant re-marking to a fixpoint.
PrunePlan select(const ModelInstance& model, std::span<const SensitivityRecord> records,
                 std::span<const GroupId> ranked, const SelectOptions& options, Ordering ordering = Ordering::kHap);

// Global removal of attention heads in `ordering`, keeping at least one head
// per layer.
PrunePlan head_prune_plan(const ModelInstance& model, std::span<const SensitivityRecord> records,
                          double keep_fraction, Ordering ordering = Ordering::kHap, std::uint64_t seed = 0);

// Completes the accounting fields from decisions.
void finalize_plan(const ModelInstance& model, PrunePlan& plan);

// One row per group plus totals.
std::string plan_report(const PrunePlan& plan);

// Decisions listed in a plan_report, by group id.
std::vector<Decision> parse_plan_decisions(const std::string& report);

}  // namespace hap
