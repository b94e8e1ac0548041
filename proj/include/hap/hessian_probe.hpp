#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hap/autodiff.hpp"
#include "hap/model.hpp"

namespace hap {

inline constexpr std::size_t kDefaultHutchinsonIters = 300;
inline constexpr Index kDefaultEvalExamples = 512;

struct TraceOptions {
  std::size_t n_iters = kDefaultHutchinsonIters;
  std::uint64_t seed = 0;
  bool record_series = true;
  // Worker threads for all_group_traces; results do not depend on it.
  std::size_t threads = 1;
};

struct TraceEstimate {
  GroupId group = 0;
  double mean = 0.0;
  std::size_t n_samples = 0;
  // Unbiased sample variance of the individual quadratic forms.
  double variance = 0.0;
  // Partial mean after each iteration, when recorded.
  std::vector<double> series;

  double std_error() const;
};

// Zero except for +-1 on members. The sign stream depends only on
// (seed, group_id, iter).
TensorList rademacher_probe(const TensorList& like, std::span<const Index> members, GroupId group_id,
                            std::uint64_t seed, std::uint64_t iter);
TensorList rademacher_probe(const ModelInstance& model, const ParamGroup& group, std::uint64_t seed,
                            std::uint64_t iter);

// The first min(max_examples, N) examples; every probe uses this one set.
Batch evaluation_set(const Batch& data, Index max_examples = kDefaultEvalExamples);

TraceEstimate group_trace(const Tape& tape, std::span<const Index> members, GroupId group_id,
                          const TraceOptions& options);
TraceEstimate group_trace(const ModelInstance& model, const Batch& eval_set, const ParamGroup& group,
                          const TraceOptions& options);

// One estimate per group of `which` (all groups when empty), in that order.
std::vector<TraceEstimate> all_group_traces(const Tape& tape, const std::vector<std::vector<Index>>& groups,
                                            const TraceOptions& options);
std::vector<TraceEstimate> all_group_traces(const ModelInstance& model, const Batch& eval_set,
                                            const TraceOptions& options, std::span<const GroupId> which = {});

struct ConvergenceRow {
  std::size_t iter = 0;  // 1-based
  double partial_mean = 0.0;
};

std::vector<ConvergenceRow> convergence_series(const TraceEstimate& estimate);
std::string convergence_csv(const TraceEstimate& estimate);
void write_convergence_csv(const TraceEstimate& estimate, const std::string& path);

}  // namespace hap
