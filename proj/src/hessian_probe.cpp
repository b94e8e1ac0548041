#include "hap/hessian_probe.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "hap/errors.hpp"
#include "hap/random.hpp"

namespace hap {

double TraceEstimate::std_error() const {
  if (n_samples == 0) return 0.0;
  return std::sqrt(variance / static_cast<double>(n_samples));
}

TensorList rademacher_probe(const TensorList& like, std::span<const Index> members, GroupId group_id,
                            std::uint64_t seed, std::uint64_t iter) {
  Eigen::VectorXd flat = Eigen::VectorXd::Zero(total_size(like));
  Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(group_id)), iter));
  std::uint64_t bits = 0;
  int left = 0;
  for (Index m : members) {
    if (left == 0) {
      bits = rng();
      left = 64;
    }
    flat[m] = (bits & 1U) ? 1.0 : -1.0;
    bits >>= 1;
    --left;
  }
  return unflatten(flat, like);
}

TensorList rademacher_probe(const ModelInstance& model, const ParamGroup& group, std::uint64_t seed,
                            std::uint64_t iter) {
  return rademacher_probe(model.params, group.members, group.id, seed, iter);
}

Batch evaluation_set(const Batch& data, Index max_examples) {
  const Index n = data.inputs.shape().at(0);
  if (n <= max_examples) return data;
  const Index f = data.inputs.size() / n;
  const Index k = data.targets.size() / n;
  Tensor x(Shape{max_examples, f});
  Tensor y(Shape{max_examples, k});
  x.matrix() = data.inputs.matrix().topRows(max_examples);
  y.matrix() = data.targets.matrix().topRows(max_examples);
  return {std::move(x), std::move(y)};
}

TraceEstimate group_trace(const Tape& tape, std::span<const Index> members, GroupId group_id,
                          const TraceOptions& options) {
  if (options.n_iters < 1) throw Error("group_trace: n_iters must be at least 1");
  TraceEstimate est;
  est.group = group_id;
  if (options.record_series) est.series.reserve(options.n_iters);
  // Welford.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < options.n_iters; ++i) {
    const TensorList v = rademacher_probe(tape.params(), members, group_id, options.seed, i);
    const double q = quadratic_form(tape, v);
    if (!std::isfinite(q)) throw NumericError("group_trace: non-finite quadratic form for group " + std::to_string(group_id));
    const double delta = q - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (q - mean);
    if (options.record_series) est.series.push_back(mean);
  }
  est.mean = mean;
  est.n_samples = options.n_iters;
  est.variance = options.n_iters > 1 ? m2 / static_cast<double>(options.n_iters - 1) : 0.0;
  return est;
}

TraceEstimate group_trace(const ModelInstance& model, const Batch& eval_set, const ParamGroup& group,
                          const TraceOptions& options) {
  const Tape tape = record(model, eval_set).tape;
  return group_trace(tape, group.members, group.id, options);
}

namespace {

std::vector<TraceEstimate> run_groups(const Tape& tape, const std::vector<std::vector<Index>>& members,
                                      const std::vector<GroupId>& ids, const TraceOptions& options) {
  std::vector<TraceEstimate> out(ids.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, ids.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < ids.size(); ++i) out[i] = group_trace(tape, members[i], ids[i], options);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < ids.size(); i = next++) out[i] = group_trace(tape, members[i], ids[i], options);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace

std::vector<TraceEstimate> all_group_traces(const Tape& tape, const std::vector<std::vector<Index>>& groups,
                                            const TraceOptions& options) {
  std::vector<GroupId> ids(groups.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<GroupId>(i);
  return run_groups(tape, groups, ids, options);
}

std::vector<TraceEstimate> all_group_traces(const ModelInstance& model, const Batch& eval_set,
                                            const TraceOptions& options, std::span<const GroupId> which) {
  std::vector<GroupId> ids(which.begin(), which.end());
  if (ids.empty())
    for (const auto& g : model.groups) ids.push_back(g.id);
  std::vector<std::vector<Index>> members;
  members.reserve(ids.size());
  for (GroupId id : ids) members.push_back(model.groups.at(static_cast<std::size_t>(id)).members);
  const Tape tape = record(model, eval_set).tape;
  return run_groups(tape, members, ids, options);
}

std::vector<ConvergenceRow> convergence_series(const TraceEstimate& estimate) {
  if (estimate.series.empty()) throw Error("convergence_series: no series recorded for group " + std::to_string(estimate.group));
  std::vector<ConvergenceRow> rows;
  rows.reserve(estimate.series.size());
  for (std::size_t i = 0; i < estimate.series.size(); ++i) rows.push_back({i + 1, estimate.series[i]});
  return rows;
}

std::string convergence_csv(const TraceEstimate& estimate) {
  std::string out = "iter,partial_mean\n";
  char line[64];
  for (const auto& row : convergence_series(estimate)) {
    std::snprintf(line, sizeof line, "%zu,%.17g\n", row.iter, row.partial_mean);
    out += line;
  }
  return out;
}

void write_convergence_csv(const TraceEstimate& estimate, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << convergence_csv(estimate);
}

}  // namespace hap
