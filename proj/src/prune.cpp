#include "hap/prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "hap/errors.hpp"
#include "hap/random.hpp"

namespace hap {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

bool lex_less(const SensitivityRecord& a, const SensitivityRecord& b) {
  return a.layer != b.layer ? a.layer < b.layer : a.index < b.index;
}

// Decisions of each layer's groups, by group index.
std::vector<std::vector<Decision>> per_layer_decisions(const ModelInstance& model, std::span<const Decision> decisions) {
  if (decisions.size() != model.groups.size()) {
    throw Error("plan has " + std::to_string(decisions.size()) + " decisions for " +
                std::to_string(model.groups.size()) + " groups");
  }
  std::vector<std::vector<Decision>> out(model.spec.layers.size());
  for (const auto& g : model.groups) {
    auto& v = out[g.layer];
    if (v.size() <= static_cast<std::size_t>(g.index)) v.resize(static_cast<std::size_t>(g.index) + 1, Decision::kKeep);
    v[static_cast<std::size_t>(g.index)] = decisions[static_cast<std::size_t>(g.id)];
  }
  return out;
}

}  // namespace

double sensitivity(double trace, Index p, double weight_sq_norm) {
  return trace * weight_sq_norm / (2.0 * static_cast<double>(p));
}

std::vector<SensitivityRecord> score_groups(const ModelInstance& model, std::span<const double> traces) {
  if (traces.size() != model.groups.size()) {
    throw Error("score_groups: " + std::to_string(traces.size()) + " traces for " +
                std::to_string(model.groups.size()) + " groups");
  }
  std::vector<SensitivityRecord> records;
  records.reserve(model.groups.size());
  for (const auto& g : model.groups) {
    SensitivityRecord r;
    r.group = g.id;
    r.layer = g.layer;
    r.index = g.index;
    r.kind = g.kind;
    r.raw_trace = traces[static_cast<std::size_t>(g.id)];
    r.trace = std::max(0.0, r.raw_trace);
    r.p = g.p();
    r.weight_sq_norm = group_sq_norm(model, g);
    r.score = sensitivity(r.trace, r.p, r.weight_sq_norm);
    records.push_back(r);
  }
  return records;
}

std::vector<SensitivityRecord> score_groups(const ModelInstance& model, std::span<const TraceEstimate> traces) {
  std::vector<double> values(model.groups.size(), 0.0);
  std::vector<bool> seen(model.groups.size(), false);
  for (const auto& t : traces) {
    if (t.group < 0 || static_cast<std::size_t>(t.group) >= values.size()) throw Error("score_groups: unknown group " + std::to_string(t.group));
    values[static_cast<std::size_t>(t.group)] = t.mean;
    seen[static_cast<std::size_t>(t.group)] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw Error("score_groups: missing trace for group " + std::to_string(i));
  return score_groups(model, std::span<const double>(values));
}

const char* ordering_name(Ordering ordering) {
  switch (ordering) {
    case Ordering::kHap: return "hap";
    case Ordering::kReverse: return "reverse";
    case Ordering::kRandom: return "random";
    case Ordering::kMagnitude: return "magnitude";
  }
  return "unknown";
}

Ordering parse_ordering(const std::string& name) {
  for (Ordering o : {Ordering::kHap, Ordering::kReverse, Ordering::kRandom, Ordering::kMagnitude})
    if (name == ordering_name(o)) return o;
  throw ConfigError("unknown ordering '" + name + "' (expected hap, reverse, random or magnitude)");
}

std::vector<GroupId> rank(std::span<const SensitivityRecord> records, Ordering ordering, std::uint64_t seed) {
  std::vector<SensitivityRecord> sorted(records.begin(), records.end());
  std::sort(sorted.begin(), sorted.end(), lex_less);
  switch (ordering) {
    case Ordering::kHap:
      std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
      break;
    case Ordering::kReverse:
      std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
      break;
    case Ordering::kMagnitude:
      std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.weight_sq_norm / static_cast<double>(a.p) < b.weight_sq_norm / static_cast<double>(b.p);
      });
      break;
    case Ordering::kRandom: {
      Rng rng(mix_seed(seed, 0x72616e6bULL));
      shuffle(sorted, rng);
      break;
    }
  }
  std::vector<GroupId> ids;
  ids.reserve(sorted.size());
  for (const auto& r : sorted) ids.push_back(r.group);
  return ids;
}

const char* budget_kind_name(BudgetKind kind) {
  switch (kind) {
    case BudgetKind::kParamFraction: return "param_fraction";
    case BudgetKind::kFlopFraction: return "flop_fraction";
    case BudgetKind::kChannelFraction: return "channel_fraction";
    case BudgetKind::kHeadFraction: return "head_fraction";
  }
  return "unknown";
}

BudgetKind parse_budget_kind(const std::string& name) {
  for (BudgetKind k : {BudgetKind::kParamFraction, BudgetKind::kFlopFraction, BudgetKind::kChannelFraction,
                       BudgetKind::kHeadFraction})
    if (name == budget_kind_name(k)) return k;
  throw ConfigError("unknown budget kind '" + name + "'");
}

Index PrunePlan::count(Decision d) const { return static_cast<Index>(std::count(decisions.begin(), decisions.end(), d)); }

CostReport predict_cost(const ModelInstance& model, std::span<const Decision> decisions) {
  const auto dec = per_layer_decisions(model, decisions);
  const auto& spec = model.spec;
  CostReport report;
  Index ch = spec.input.channels, h = spec.input.height, w = spec.input.width;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto at = [&](Index j) {
      return static_cast<std::size_t>(j) < dec[i].size() ? dec[i][static_cast<std::size_t>(j)] : Decision::kKeep;
    };
    const Index hw = h * w;
    LayerCost lc{i, layer_name(spec.layers[i]), 0, 0};
    auto conv_like = [&](Index spatial, Index pointwise) {
      lc.params = spatial * (9 * ch + 1) + pointwise * (ch + 1);
      lc.macs = (9 * spatial + pointwise) * ch * hw;
      ch = spatial + pointwise;
    };
    std::visit(Overloaded{
                   [&](const Dense& d) {
                     Index out = 0;
                     for (Index j = 0; j < d.out; ++j) out += at(j) != Decision::kPrune;
                     lc.params = out * (ch + 1);
                     lc.macs = out * ch * hw;
                     ch = out;
                   },
                   [&](const Conv3x3& c) {
                     Index sp = 0, pw = 0;
                     for (Index j = 0; j < c.c_out; ++j) {
                       sp += at(j) == Decision::kKeep;
                       pw += at(j) == Decision::kImplant;
                     }
                     conv_like(sp, pw);
                   },
                   [&](const Conv1x1& c) {
                     Index pw = 0;
                     for (Index j = 0; j < c.c_out; ++j) pw += at(j) != Decision::kPrune;
                     conv_like(0, pw);
                   },
                   [&](const HybridConv& c) {
                     Index sp = 0, pw = 0;
                     for (Index j = 0; j < c.c_out(); ++j) {
                       if (at(j) == Decision::kPrune) continue;
                       const bool spatial = c.channels[static_cast<std::size_t>(j)] == ChannelKind::kSpatial;
                       (spatial && at(j) == Decision::kKeep ? sp : pw) += 1;
                     }
                     conv_like(sp, pw);
                   },
                   [&](const AttentionBlock& a) {
                     Index heads = 0;
                     for (Index j = 0; j < a.n_heads; ++j) heads += at(j) != Decision::kPrune;
                     const Index inner = heads * a.resolved_head_dim();
                     lc.params = 4 * a.d_model * inner;
                     lc.macs = 4 * a.d_model * inner * hw + 2 * inner * hw * hw;
                   },
                   [&](const AvgPool& p) {
                     h /= p.kernel;
                     w /= p.kernel;
                   },
                   [&](const Flatten&) {
                     ch *= hw;
                     h = w = 1;
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

double remaining_fraction(const ModelInstance& model, std::span<const Decision> decisions, BudgetKind kind) {
  if (kind == BudgetKind::kParamFraction || kind == BudgetKind::kFlopFraction) {
    const CostReport base = cost(model);
    const CostReport now = predict_cost(model, decisions);
    return kind == BudgetKind::kParamFraction
               ? static_cast<double>(now.total_params) / static_cast<double>(base.total_params)
               : static_cast<double>(now.total_flops) / static_cast<double>(base.total_flops);
  }
  const GroupKind want = kind == BudgetKind::kHeadFraction ? GroupKind::kHead : GroupKind::kOutChannel;
  Index total = 0, kept = 0;
  for (const auto& g : model.groups) {
    if (g.kind != want || (want == GroupKind::kOutChannel && !g.prunable)) continue;
    ++total;
    kept += decisions[static_cast<std::size_t>(g.id)] == Decision::kKeep;
  }
  if (total == 0) throw Error(std::string("remaining_fraction: model has no units for ") + budget_kind_name(kind));
  return static_cast<double>(kept) / static_cast<double>(total);
}

void finalize_plan(const ModelInstance& model, PrunePlan& plan) {
  plan.before = cost(model);
  plan.after = predict_cost(model, plan.decisions);
  plan.achieved = remaining_fraction(model, plan.decisions, plan.budget.kind);
  std::map<std::size_t, LayerCounts> layers;
  for (const auto& g : model.groups) {
    auto& lc = layers[g.layer];
    lc.layer = g.layer;
    ++lc.groups;
    const Decision d = plan.decisions[static_cast<std::size_t>(g.id)];
    lc.pruned += d == Decision::kPrune;
    lc.implanted += d == Decision::kImplant;
  }
  plan.per_layer.clear();
  for (const auto& [layer, lc] : layers) plan.per_layer.push_back(lc);
}

PrunePlan select(const ModelInstance& model, std::span<const SensitivityRecord> records,
                 std::span<const GroupId> ranked, const SelectOptions& options, Ordering ordering) {
  const double target = options.budget.value;
  if (!(target > 0.0 && target <= 1.0)) throw ConfigError("select: budget must lie in (0, 1]");
  if (!(options.implant_ratio >= 0.0 && options.implant_ratio < 1.0)) throw ConfigError("select: implant_ratio must lie in [0, 1)");
  if (!(options.per_layer_limit > 0.0 && options.per_layer_limit <= 1.0)) {
    throw ConfigError("select: per_layer_limit must lie in (0, 1]");
  }

  const std::size_t n_groups = model.groups.size();
  std::vector<double> score(n_groups, 0.0);
  for (const auto& r : records) score.at(static_cast<std::size_t>(r.group)) = r.score;

  std::vector<Index> layer_groups(model.spec.layers.size(), 0);
  for (const auto& g : model.groups) ++layer_groups[g.layer];
  std::vector<Index> cap(layer_groups.size(), 0);
  std::vector<bool> limit_binds(layer_groups.size(), false);
  for (std::size_t l = 0; l < cap.size(); ++l) {
    const auto by_limit = static_cast<Index>(std::floor(options.per_layer_limit * static_cast<double>(layer_groups[l]) + 1e-9));
    cap[l] = std::min(by_limit, layer_groups[l] - 1);
    limit_binds[l] = by_limit <= layer_groups[l] - 1;
  }

  PrunePlan plan;
  plan.decisions.assign(n_groups, Decision::kKeep);
  plan.ordering = ordering;
  plan.budget = options.budget;
  plan.per_layer_limit = options.per_layer_limit;
  plan.implant_ratio = options.implant_ratio;
  plan.records.assign(records.begin(), records.end());

  std::vector<Index> removed(layer_groups.size(), 0);
  std::size_t pos = 0;
  bool hit_limit = false, hit_floor = false;
  auto met = [&] { return remaining_fraction(model, plan.decisions, options.budget.kind) <= target + 1e-12; };
  auto extend = [&] {
    while (!met()) {
      if (pos == ranked.size()) return false;
      const auto& g = model.groups.at(static_cast<std::size_t>(ranked[pos++]));
      if (!g.prunable || plan.decisions[static_cast<std::size_t>(g.id)] != Decision::kKeep) continue;
      if (removed[g.layer] >= cap[g.layer]) {
        (limit_binds[g.layer] ? hit_limit : hit_floor) = true;
        continue;
      }
      plan.decisions[static_cast<std::size_t>(g.id)] = Decision::kPrune;
      ++removed[g.layer];
    }
    return true;
  };
  auto infeasible = [&](const std::string& why) {
    const std::string constraint = hit_limit ? "per-layer-limit" : hit_floor ? "min-one-per-layer" : "prunable-groups";
    return InfeasibleError(constraint, "budget " + std::string(budget_kind_name(options.budget.kind)) + " " + fmt(target) +
                                           " cannot be met (" + why + "; reached " +
                                           fmt(remaining_fraction(model, plan.decisions, options.budget.kind)) +
                                           ", binding constraint: " + constraint + ")");
  };

  if (!extend()) throw infeasible("ranked groups exhausted");

  if (options.implant_ratio > 0.0) {
    bool settled = false;
    for (int round = 0; round < kImplantFixpointCap && !settled; ++round) {
      std::vector<GroupId> selected, eligible;
      for (const auto& g : model.groups) {
        auto& d = plan.decisions[static_cast<std::size_t>(g.id)];
        if (d == Decision::kKeep) continue;
        d = Decision::kPrune;
        selected.push_back(g.id);
        if (g.spatial) eligible.push_back(g.id);
      }
      const auto n_implant = std::min<std::size_t>(
          static_cast<std::size_t>(std::ceil(options.implant_ratio * static_cast<double>(selected.size()) - 1e-9)),
          eligible.size());
      std::stable_sort(eligible.begin(), eligible.end(), [&](GroupId a, GroupId b) {
        const double sa = score[static_cast<std::size_t>(a)], sb = score[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        const auto &ga = model.groups[static_cast<std::size_t>(a)], &gb = model.groups[static_cast<std::size_t>(b)];
        return ga.layer != gb.layer ? ga.layer < gb.layer : ga.index < gb.index;
      });
      for (std::size_t k = 0; k < n_implant; ++k) plan.decisions[static_cast<std::size_t>(eligible[k])] = Decision::kImplant;
      if (met()) {
        settled = true;
      } else if (!extend()) {
        throw infeasible("implants pushed the cost above budget and no groups remain");
      }
    }
    if (!settled) throw InfeasibleError("implant-fixpoint", "implant re-extension did not settle within " + std::to_string(kImplantFixpointCap) + " rounds");
  }

  finalize_plan(model, plan);
  return plan;
}

PrunePlan head_prune_plan(const ModelInstance& model, std::span<const SensitivityRecord> records, double keep_fraction,
                          Ordering ordering, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("head_prune_plan: keep_fraction must lie in (0, 1]");
  std::vector<SensitivityRecord> heads;
  for (const auto& r : records)
    if (r.kind == GroupKind::kHead) heads.push_back(r);
  std::map<std::size_t, Index> alive;
  for (const auto& g : model.groups)
    if (g.kind == GroupKind::kHead) ++alive[g.layer];
  if (alive.empty()) throw Error("head_prune_plan: model has no attention blocks");

  Index total = 0;
  for (const auto& [layer, n] : alive) total += n;
  const auto keep = static_cast<Index>(std::ceil(keep_fraction * static_cast<double>(total) - 1e-9));
  if (keep < static_cast<Index>(alive.size())) {
    throw InfeasibleError("min-one-head-per-layer", "keeping " + std::to_string(keep) + " of " + std::to_string(total) +
                                                        " heads leaves some of the " + std::to_string(alive.size()) +
                                                        " attention layers empty");
  }

  PrunePlan plan;
  plan.decisions.assign(model.groups.size(), Decision::kKeep);
  plan.ordering = ordering;
  plan.budget = {BudgetKind::kHeadFraction, keep_fraction};
  plan.per_layer_limit = 1.0;
  plan.records.assign(records.begin(), records.end());
  Index to_prune = total - keep;
  for (GroupId id : rank(heads, ordering, seed)) {
    if (to_prune == 0) break;
    const auto& g = model.groups.at(static_cast<std::size_t>(id));
    if (alive[g.layer] <= 1) continue;
    plan.decisions[static_cast<std::size_t>(id)] = Decision::kPrune;
    --alive[g.layer];
    --to_prune;
  }
  if (to_prune > 0) throw InfeasibleError("min-one-head-per-layer", "not enough heads outside single-head layers");
  finalize_plan(model, plan);
  return plan;
}

std::string plan_report(const PrunePlan& plan) {
  std::map<GroupId, const SensitivityRecord*> by_id;
  for (const auto& r : plan.records) by_id[r.group] = &r;
  std::ostringstream out;
  out << "# prune plan\n";
  out << "ordering " << ordering_name(plan.ordering) << "\n";
  out << "budget " << budget_kind_name(plan.budget.kind) << " " << fmt(plan.budget.value) << "\n";
  out << "per_layer_limit " << fmt(plan.per_layer_limit) << "\n";
  out << "implant_ratio " << fmt(plan.implant_ratio) << "\n";
  out << "\ngroup layer index kind p trace score decision\n";
  for (std::size_t id = 0; id < plan.decisions.size(); ++id) {
    const auto it = by_id.find(static_cast<GroupId>(id));
    out << id << " ";
    if (it != by_id.end()) {
      const auto& r = *it->second;
      out << r.layer << " " << r.index << " " << group_kind_name(r.kind) << " " << r.p << " " << fmt(r.raw_trace) << " "
          << fmt(r.score);
    } else {
      out << "- - - - - -";
    }
    out << " " << decision_name(plan.decisions[id]) << "\n";
  }
  out << "\nlayer groups pruned implanted\n";
  for (const auto& lc : plan.per_layer) out << lc.layer << " " << lc.groups << " " << lc.pruned << " " << lc.implanted << "\n";
  out << "\npruned " << plan.count(Decision::kPrune) << "\n";
  out << "implanted " << plan.count(Decision::kImplant) << "\n";
  out << "params_before " << plan.before.total_params << "\n";
  out << "params_after " << plan.after.total_params << "\n";
  out << "flops_before " << plan.before.total_flops << "\n";
  out << "flops_after " << plan.after.total_flops << "\n";
  out << "achieved " << fmt(plan.achieved) << "\n";
  return out.str();
}

std::vector<Decision> parse_plan_decisions(const std::string& report) {
  std::istringstream in(report);
  std::string line;
  bool table = false;
  std::vector<Decision> out;
  while (std::getline(in, line)) {
    if (!table) {
      table = line.rfind("group layer index", 0) == 0;
      continue;
    }
    if (line.empty()) break;
    std::istringstream row(line);
    std::size_t id = 0;
    row >> id;
    const std::string word = line.substr(line.find_last_of(' ') + 1);
    if (id != out.size()) throw FormatError("plan report: group rows out of order at group " + std::to_string(id));
    if (word == "keep") out.push_back(Decision::kKeep);
    else if (word == "prune") out.push_back(Decision::kPrune);
    else if (word == "implant") out.push_back(Decision::kImplant);
    else throw FormatError("plan report: unknown decision '" + word + "'");
  }
  if (!table) throw FormatError("plan report: no group table");
  return out;
}

}  // namespace hap
