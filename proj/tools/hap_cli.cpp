// Command-line front end: train, trace, prune, implant, finetune, pipeline,
// oracle-check. Exit codes: 0 ok, 1 other failure, 2 config, 3 infeasible
// plan, 4 numeric failure.

#include <CLI11.hpp>
#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hap/errors.hpp"
#include "hap/oracle.hpp"
#include "hap/pipeline.hpp"

namespace {

using namespace hap;

struct Options {
  std::string config;
  std::string model;
  std::string out;
  std::string plan;
  std::string output_dir;
  std::string ordering;
  std::string budget_kind;
  double budget = -1.0;
  double implant_ratio = -1.0;
  double per_layer_limit = -1.0;
  std::int64_t seed = -1;
};

Config load_config(const Options& o) {
  Config c = o.config.empty() ? Config{} : Config::load(o.config);
  if (o.seed >= 0) {
    for (const char* section : {"data", "model", "train", "trace", "prune"}) c.set(section, "seed", std::to_string(o.seed));
  }
  if (!o.ordering.empty()) c.set("prune", "ordering", o.ordering);
  if (!o.budget_kind.empty()) c.set("prune", "budget_kind", o.budget_kind);
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  if (o.budget >= 0) c.set("prune", "budget", num(o.budget));
  if (o.implant_ratio >= 0) c.set("prune", "implant_ratio", num(o.implant_ratio));
  if (o.per_layer_limit >= 0) c.set("prune", "per_layer_limit", num(o.per_layer_limit));
  if (!o.output_dir.empty()) c.set("output", "dir", o.output_dir);
  return c;
}

Split load_split(const PipelineSettings& s) { return split(load_dataset(s.data), s.validation_fraction, s.data.seed); }

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << text;
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
  return value;
}

int cmd_train(const Options& o) {
  const auto s = pipeline_settings(load_config(o));
  const Split data = load_split(s);
  const ModelSpec spec = parse_architecture(s.architecture, data.train.shape, data.train.classes);
  const TrainResult r = train(build(spec, s.model_seed), data.train, data.validation, s.train);
  save_file(r.model, require(o.out, "--out"));
  std::printf("validation_accuracy %.6f (epoch %lld)\n", r.accuracy, static_cast<long long>(r.best_epoch));
  return 0;
}

int cmd_trace(const Options& o) {
  const auto s = pipeline_settings(load_config(o));
  const Split data = load_split(s);
  const ModelInstance m = load_file(require(o.model, "--model"));
  std::vector<TraceEstimate> est;
  const auto records = sensitivity_records(m, data.train, s.trace, s.eval_examples, &est);
  const std::filesystem::path dir(s.output_dir);
  std::ostringstream table;
  table << "group layer index kind trace std_error score\n";
  char line[256];
  for (std::size_t i = 0; i < est.size(); ++i) {
    const auto& r = records[i];
    std::snprintf(line, sizeof line, "%d %zu %lld %s %.17g %.17g %.17g\n", r.group, r.layer, static_cast<long long>(r.index),
                  group_kind_name(r.kind), est[i].mean, est[i].std_error(), r.score);
    table << line;
    std::string name = s.csv_pattern;
    if (const auto at = name.find("{id}"); at != std::string::npos) name.replace(at, 4, std::to_string(est[i].group));
    const auto path = dir / name;
    std::filesystem::create_directories(path.parent_path());
    write_file(path.string(), convergence_csv(est[i]));
  }
  std::filesystem::create_directories(dir);
  write_file((dir / "traces.txt").string(), table.str());
  std::cout << table.str();
  return 0;
}

// prune: Keep/Prune only. implant: the configured implant ratio.
int cmd_prune(const Options& o, bool implants) {
  const auto s = pipeline_settings(load_config(o));
  const ModelInstance m = load_file(require(o.model, "--model"));
  const Split data = load_split(s);
  PruneSettings ps = s.prune;
  if (!implants) ps.implant_ratio = 0.0;
  else if (ps.implant_ratio == 0.0) ps.implant_ratio = kDefaultImplantRatio;
  const PrunePlan plan = make_plan(m, sensitivity_records(m, data.train, s.trace, s.eval_examples), ps);
  const std::string report = plan_report(plan);
  if (!o.plan.empty()) write_file(o.plan, report);
  std::cout << report;
  const ModelInstance out = implants ? apply_implant(m, plan, ps.init) : rebuild(m, plan.decisions);
  save_file(out, require(o.out, "--out"));
  return 0;
}

// Applies a saved plan report to a checkpoint.
int cmd_apply(const Options& o) {
  std::ifstream f(o.plan);
  if (!f) throw ConfigError("cannot read plan " + o.plan);
  std::stringstream ss;
  ss << f.rdbuf();
  const ModelInstance m = load_file(require(o.model, "--model"));
  save_file(apply_implant(m, parse_plan_decisions(ss.str())), require(o.out, "--out"));
  return 0;
}

int cmd_finetune(const Options& o) {
  const auto s = pipeline_settings(load_config(o));
  const Split data = load_split(s);
  const ModelInstance m = load_file(require(o.model, "--model"));
  const TrainResult r = finetune(m, data.train, data.validation, s.finetune);
  save_file(r.model, require(o.out, "--out"));
  std::printf("validation_accuracy %.6f (epoch %lld)\n", r.accuracy, static_cast<long long>(r.best_epoch));
  return 0;
}

int cmd_pipeline(const Options& o) {
  const PipelineReport r = run_pipeline(pipeline_settings(load_config(o)));
  std::cout << result_record(r);
  return 0;
}

// Exact block traces and true single-group loss increases against the
// estimator and scores, on the model's evaluation set.
int cmd_oracle_check(const Options& o) {
  const auto s = pipeline_settings(load_config(o));
  const Split data = load_split(s);
  const ModelInstance m = load_file(require(o.model, "--model"));
  const Batch eval = evaluation_set(data.train.batch(), s.eval_examples);
  const Eigen::MatrixXd h = exact_hessian(m, eval);
  std::vector<TraceEstimate> est;
  const auto records = sensitivity_records(m, data.train, s.trace, s.eval_examples, &est);
  const auto exact_scores = hap_score_exact(h, flatten(m.params), member_lists(m));
  std::vector<GroupId> candidates;
  std::vector<double> scores;
  for (const auto& r : records) {
    if (!m.groups[static_cast<std::size_t>(r.group)].prunable) continue;
    candidates.push_back(r.group);
    scores.push_back(r.score);
  }
  const auto increases = single_group_loss_increase(m, eval, candidates);
  std::printf("group exact_trace estimate std_error within_3se score exact_score\n");
  int within = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const auto& members = m.groups[i].members;
    const double exact = block_trace(h, std::span<const Index>(members));
    const bool ok = std::abs(est[i].mean - exact) <= 3.0 * est[i].std_error();
    within += ok;
    std::printf("%zu %.10g %.10g %.3g %s %.6g %.6g\n", i, exact, est[i].mean, est[i].std_error(), ok ? "yes" : "no",
                records[i].score, exact_scores[i]);
  }
  std::printf("within_3se %d/%zu\n", within, est.size());
  std::printf("symmetry_residual %.3g\n", (h - h.transpose()).cwiseAbs().maxCoeff());
  if (candidates.size() >= 2) std::printf("spearman_score_vs_true_increase %.6f\n", spearman(scores, increases));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Large Eigen temporaries are reused instead of mapped and unmapped per call.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Structured pruning ranked by Hessian trace sensitivity"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "pipeline config (YAML)");
    sub->add_option("--seed", o.seed, "seed for data, model, training, probes and random ordering");
    sub->add_option("--output-dir", o.output_dir, "artifact directory");
  };
  auto prune_flags = [&](CLI::App* sub) {
    sub->add_option("--ordering", o.ordering, "hap, reverse, random or magnitude");
    sub->add_option("--budget-kind", o.budget_kind, "param_fraction, flop_fraction, channel_fraction or head_fraction");
    sub->add_option("--budget", o.budget, "fraction remaining");
    sub->add_option("--implant-ratio", o.implant_ratio, "fraction of pruned 3x3 channels implanted");
    sub->add_option("--per-layer-limit", o.per_layer_limit, "max fraction of a layer's groups removed");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model from the config");
  common(train_cmd);
  train_cmd->add_option("-o,--out", o.out, "checkpoint to write")->required();

  auto* trace_cmd = app.add_subcommand("trace", "estimate group Hessian traces");
  common(trace_cmd);
  trace_cmd->add_option("-m,--model", o.model, "checkpoint")->required();

  auto* prune_cmd = app.add_subcommand("prune", "score, select and remove channels or heads");
  common(prune_cmd);
  prune_flags(prune_cmd);
  prune_cmd->add_option("-m,--model", o.model, "checkpoint")->required();
  prune_cmd->add_option("-o,--out", o.out, "pruned checkpoint")->required();
  prune_cmd->add_option("--plan", o.plan, "plan report to write");

  auto* implant_cmd = app.add_subcommand("implant", "prune with 1x1 implants, or apply a saved plan");
  common(implant_cmd);
  prune_flags(implant_cmd);
  implant_cmd->add_option("-m,--model", o.model, "checkpoint")->required();
  implant_cmd->add_option("-o,--out", o.out, "resulting checkpoint")->required();
  bool apply_saved = false;
  implant_cmd->add_option("--plan", o.plan, "plan report to write (or to read with --apply)");
  implant_cmd->add_flag("--apply", apply_saved, "apply the plan given by --plan instead of computing one");

  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune a checkpoint");
  common(finetune_cmd);
  finetune_cmd->add_option("-m,--model", o.model, "checkpoint")->required();
  finetune_cmd->add_option("-o,--out", o.out, "checkpoint to write")->required();

  auto* pipeline_cmd = app.add_subcommand("pipeline", "train, score, prune/implant, fine-tune, report");
  common(pipeline_cmd);
  prune_flags(pipeline_cmd);

  auto* oracle_cmd = app.add_subcommand("oracle-check", "compare estimates against the exact Hessian");
  common(oracle_cmd);
  oracle_cmd->add_option("-m,--model", o.model, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*trace_cmd) return cmd_trace(o);
    if (*prune_cmd) return cmd_prune(o, false);
    if (*implant_cmd) return apply_saved ? cmd_apply(o) : cmd_prune(o, true);
    if (*finetune_cmd) return cmd_finetune(o);
    if (*pipeline_cmd) return cmd_pipeline(o);
    if (*oracle_cmd) return cmd_oracle_check(o);
  } catch (const hap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const hap::InfeasibleError& e) {
    std::cerr << "infeasible plan (" << e.constraint() << "): " << e.what() << "\n";
    return 3;
  } catch (const hap::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
