#include "hap/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "hap/errors.hpp"

namespace hap {

// ---- config --------------------------------------------------------------------------

Config Config::parse(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  Config c;
  if (root.IsNull()) return c;
  if (!root.IsMap()) throw ConfigError("config: top level must be a mapping of sections");
  for (const auto& section : root) {
    const std::string name = section.first.as<std::string>();
    const YAML::Node& body = section.second;
    if (body.IsNull()) continue;
    if (!body.IsMap()) throw ConfigError("config line " + std::to_string(body.Mark().line + 1) + ": section '" + name + "' must be a mapping");
    for (const auto& kv : body) {
      const std::string key = kv.first.as<std::string>();
      if (!kv.second.IsScalar()) {
        throw ConfigError("config line " + std::to_string(kv.second.Mark().line + 1) + ": " + name + "." + key + " must be a scalar");
      }
      c.values_[name][key] = kv.second.Scalar();
    }
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

bool Config::has(const std::string& section, const std::string& key) const {
  const auto s = values_.find(section);
  return s != values_.end() && s->second.count(key) > 0;
}

std::string Config::get(const std::string& section, const std::string& key, const std::string& fallback) const {
  return has(section, key) ? values_.at(section).at(key) : fallback;
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get(section, key, "");
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(section + "." + key + ": '" + v + "' is not a number");
  return d;
}

std::int64_t Config::get_int(const std::string& section, const std::string& key, std::int64_t fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get(section, key, "");
  std::size_t used = 0;
  std::int64_t i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(section + "." + key + ": '" + v + "' is not an integer");
  return i;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  values_[section][key] = value;
}

// ---- architecture ----------------------------------------------------------------------

ModelSpec parse_architecture(const std::string& text, InputShape input, Index classes, LossKind loss) {
  ModelSpec spec{input, {}, loss};
  Index ch = input.channels, h = input.height, w = input.width;
  std::istringstream in(text);
  std::string tok;
  auto arg = [&](const std::string& t) -> Index {
    const auto colon = t.find(':');
    if (colon == std::string::npos) throw ConfigError("layer '" + t + "' needs a size, e.g. '" + t + ":8'");
    try {
      const long long v = std::stoll(t.substr(colon + 1));
      if (v < 1) throw ConfigError("layer '" + t + "': size must be positive");
      return static_cast<Index>(v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("layer '" + t + "': bad size");
    }
  };
  while (in >> tok) {
    const std::string kind = tok.substr(0, tok.find(':'));
    if (kind == "conv3x3") {
      const Index c = arg(tok);
      spec.layers.push_back(Conv3x3{ch, c, h, w});
      ch = c;
    } else if (kind == "conv1x1") {
      const Index c = arg(tok);
      spec.layers.push_back(Conv1x1{ch, c, h, w});
      ch = c;
    } else if (kind == "dense") {
      const Index n = arg(tok);
      spec.layers.push_back(Dense{ch, n});
      ch = n;
    } else if (kind == "attention") {
      spec.layers.push_back(AttentionBlock{ch, arg(tok)});
    } else if (kind == "relu") {
      spec.layers.push_back(Relu{});
    } else if (kind == "avgpool") {
      const Index k = arg(tok);
      spec.layers.push_back(AvgPool{k});
      h /= k;
      w /= k;
    } else if (kind == "flatten") {
      spec.layers.push_back(Flatten{});
      ch *= h * w;
      h = w = 1;
    } else if (kind == "softmax") {
      spec.layers.push_back(Softmax{});
    } else {
      throw ConfigError("unknown layer '" + tok + "'");
    }
  }
  if (spec.layers.empty() || !std::holds_alternative<Dense>(spec.layers.back())) {
    if (h * w > 1) {
      spec.layers.push_back(Flatten{});
      ch *= h * w;
    }
    spec.layers.push_back(Dense{ch, classes});
  }
  try {
    validate(spec);
  } catch (const Error& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
  return spec;
}

// ---- settings ------------------------------------------------------------------------------

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"data", {"source", "n", "classes", "features", "noise", "seed", "validation_fraction"}},
      {"model", {"architecture", "seed"}},
      {"train", {"lr", "momentum", "weight_decay", "epochs", "batch_size", "seed"}},
      {"finetune", {"lr", "momentum", "weight_decay", "epochs", "batch_size", "seed"}},
      {"trace", {"iterations", "seed", "eval_examples", "threads", "csv_pattern"}},
      {"prune", {"target", "ordering", "budget_kind", "budget", "per_layer_limit", "implant_ratio", "seed", "implant_init"}},
      {"output", {"dir"}},
  };
  return keys;
}

TrainConfig read_train(const Config& c, const std::string& section, const TrainConfig& base) {
  TrainConfig t = base;
  t.lr = c.get_double(section, "lr", base.lr);
  t.momentum = c.get_double(section, "momentum", base.momentum);
  t.weight_decay = c.get_double(section, "weight_decay", base.weight_decay);
  t.epochs = c.get_int(section, "epochs", base.epochs);
  t.batch_size = c.get_int(section, "batch_size", base.batch_size);
  t.seed = static_cast<std::uint64_t>(c.get_int(section, "seed", static_cast<std::int64_t>(base.seed)));
  t.validate();
  return t;
}

}  // namespace

PipelineSettings pipeline_settings(const Config& c) {
  for (const auto& [section, entries] : c.sections()) {
    const auto known = known_keys().find(section);
    if (known == known_keys().end()) throw ConfigError("unknown config section '" + section + "'");
    for (const auto& [key, value] : entries)
      if (!known->second.count(key)) throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
  }
  PipelineSettings s;
  s.data.kind = c.get("data", "source", s.data.kind);
  s.data.n = c.get_int("data", "n", s.data.n);
  s.data.classes = c.get_int("data", "classes", s.data.classes);
  s.data.features = c.get_int("data", "features", s.data.features);
  s.data.noise = c.get_double("data", "noise", s.data.noise);
  s.data.seed = static_cast<std::uint64_t>(c.get_int("data", "seed", static_cast<std::int64_t>(s.data.seed)));
  s.validation_fraction = c.get_double("data", "validation_fraction", s.validation_fraction);
  s.architecture = c.get("model", "architecture", s.architecture);
  s.model_seed = static_cast<std::uint64_t>(c.get_int("model", "seed", static_cast<std::int64_t>(s.model_seed)));
  s.train = read_train(c, "train", s.train);
  s.finetune = read_train(c, "finetune", s.train);
  s.trace.n_iters = static_cast<std::size_t>(c.get_int("trace", "iterations", static_cast<std::int64_t>(s.trace.n_iters)));
  if (s.trace.n_iters < 1) throw ConfigError("[trace] iterations must be positive");
  s.trace.seed = static_cast<std::uint64_t>(c.get_int("trace", "seed", 0));
  s.trace.threads = static_cast<std::size_t>(c.get_int("trace", "threads", 1));
  s.eval_examples = c.get_int("trace", "eval_examples", s.eval_examples);
  s.csv_pattern = c.get("trace", "csv_pattern", s.csv_pattern);
  const std::string target = c.get("prune", "target", "channels");
  if (target != "channels" && target != "heads") throw ConfigError("[prune] target must be channels or heads");
  s.prune.target = target == "heads" ? PruneTarget::kHeads : PruneTarget::kChannels;
  s.prune.ordering = parse_ordering(c.get("prune", "ordering", "hap"));
  s.prune.budget.kind = parse_budget_kind(c.get("prune", "budget_kind", "param_fraction"));
  s.prune.budget.value = c.get_double("prune", "budget", s.prune.budget.value);
  s.prune.per_layer_limit = c.get_double("prune", "per_layer_limit", s.prune.per_layer_limit);
  s.prune.implant_ratio = c.get_double("prune", "implant_ratio", s.prune.implant_ratio);
  s.prune.seed = static_cast<std::uint64_t>(c.get_int("prune", "seed", static_cast<std::int64_t>(s.prune.seed)));
  const std::string init = c.get("prune", "implant_init", "center-tap");
  if (init != "center-tap" && init != "kernel-sum") throw ConfigError("[prune] implant_init must be center-tap or kernel-sum");
  s.prune.init = init == "kernel-sum" ? ImplantInit::kKernelSum : ImplantInit::kCenterTap;
  s.output_dir = c.get("output", "dir", s.output_dir);
  return s;
}

// ---- reporting ----------------------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::string result_record(const PipelineReport& r) {
  std::ostringstream out;
  out << "[run]\n";
  out << "ordering = " << ordering_name(r.ordering) << "\n";
  out << "seed = " << r.seed << "\n";
  out << "baseline_accuracy = " << fmt(r.baseline_accuracy) << "\n";
  out << "final_accuracy = " << fmt(r.final_accuracy) << "\n";
  out << "accuracy_drop = " << fmt(r.accuracy_drop) << "\n";
  out << "params_remaining_pct = " << fmt(r.params_remaining_pct) << "\n";
  out << "flops_remaining_pct = " << fmt(r.flops_remaining_pct) << "\n";
  out << "params_before = " << r.params_before << "\n";
  out << "params_after = " << r.params_after << "\n";
  out << "flops_before = " << r.flops_before << "\n";
  out << "flops_after = " << r.flops_after << "\n";
  out << "pruned_groups = " << r.pruned_groups << "\n";
  out << "implanted_channels = " << r.implanted_channels << "\n";
  return out.str();
}

std::vector<SensitivityRecord> sensitivity_records(const ModelInstance& model, const Dataset& data,
                                                   const TraceOptions& options, Index eval_examples,
                                                   std::vector<TraceEstimate>* estimates) {
  auto est = all_group_traces(model, evaluation_set(data.batch(), eval_examples), options);
  auto records = score_groups(model, std::span<const TraceEstimate>(est));
  if (estimates) *estimates = std::move(est);
  return records;
}

PrunePlan make_plan(const ModelInstance& model, const std::vector<SensitivityRecord>& records, const PruneSettings& s) {
  if (s.target == PruneTarget::kHeads) return head_prune_plan(model, records, s.budget.value, s.ordering, s.seed);
  std::vector<SensitivityRecord> channels;
  for (const auto& r : records)
    if (r.kind == GroupKind::kOutChannel) channels.push_back(r);
  SelectOptions opt{s.budget, s.per_layer_limit, s.implant_ratio};
  return select(model, records, rank(channels, s.ordering, s.seed), opt, s.ordering);
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
auto stage(const std::string& name, PipelineReport& report, F&& body) {
  const auto t0 = Clock::now();
  auto done = [&] { report.timings.emplace_back(name, std::chrono::duration<double>(Clock::now() - t0).count()); };
  const std::string prefix = "stage " + name + ": ";
  try {
    auto out = body();
    done();
    return out;
  } catch (const InfeasibleError& e) {
    throw InfeasibleError(e.constraint(), prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const SingularError& e) {
    throw SingularError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const VersionError& e) {
    throw VersionError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const CapacityError& e) {
    throw CapacityError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string csv_path(const std::string& pattern, GroupId id) {
  std::string out = pattern;
  const auto at = out.find("{id}");
  if (at != std::string::npos) out.replace(at, 4, std::to_string(id));
  return out;
}

double pct(Index a, Index b) { return 100.0 * static_cast<double>(a) / static_cast<double>(b); }

}  // namespace

PipelineReport run_pipeline(const PipelineSettings& s) {
  namespace fs = std::filesystem;
  const fs::path dir(s.output_dir);
  fs::create_directories(dir);
  PipelineReport report;
  report.ordering = s.prune.ordering;
  report.seed = s.train.seed;

  const Split data = stage("data", report, [&] { return split(load_dataset(s.data), s.validation_fraction, s.data.seed); });
  const ModelSpec spec = stage("model", report, [&] {
    return parse_architecture(s.architecture, data.train.shape, data.train.classes);
  });
  const TrainResult base = stage("train", report, [&] { return train(build(spec, s.model_seed), data.train, data.validation, s.train); });
  save_file(base.model, (dir / "baseline.ckpt").string());
  report.baseline_accuracy = base.accuracy;

  std::vector<TraceEstimate> estimates;
  const auto records = stage("trace", report, [&] {
    return sensitivity_records(base.model, data.train, s.trace, s.eval_examples, &estimates);
  });
  stage("convergence", report, [&] {
    for (const auto& e : estimates) write_text(dir / csv_path(s.csv_pattern, e.group), convergence_csv(e));
    return 0;
  });

  const PrunePlan plan = stage("select", report, [&] { return make_plan(base.model, records, s.prune); });
  write_text(dir / "plan.txt", plan_report(plan));

  const ModelInstance pruned = stage("restructure", report, [&] { return apply_implant(base.model, plan, s.prune.init); });
  save_file(pruned, (dir / "pruned.ckpt").string());

  const bool changed = plan.count(Decision::kKeep) != static_cast<Index>(plan.decisions.size());
  TrainResult final_result{pruned, base.accuracy, 0, {}};
  if (changed) final_result = stage("finetune", report, [&] { return finetune(pruned, data.train, data.validation, s.finetune); });
  save_file(final_result.model, (dir / "final.ckpt").string());

  const CostReport before = cost(base.model);
  const CostReport after = cost(final_result.model);
  if (after.total_params != plan.after.total_params || after.total_flops != plan.after.total_flops) {
    throw Error("stage report: final checkpoint cost disagrees with the plan's prediction");
  }
  report.final_accuracy = final_result.accuracy;
  report.accuracy_drop = report.baseline_accuracy - report.final_accuracy;
  report.params_before = before.total_params;
  report.params_after = after.total_params;
  report.flops_before = before.total_flops;
  report.flops_after = after.total_flops;
  report.params_remaining_pct = pct(after.total_params, before.total_params);
  report.flops_remaining_pct = pct(after.total_flops, before.total_flops);
  report.pruned_groups = plan.count(Decision::kPrune);
  report.implanted_channels = plan.count(Decision::kImplant);

  write_text(dir / "result.txt", result_record(report));
  std::ostringstream t;
  for (const auto& [name, seconds] : report.timings) t << name << " " << fmt(seconds) << "\n";
  write_text(dir / "timings.txt", t.str());
  return report;
}

PipelineReport run_pipeline(const std::string& config_path) { return run_pipeline(pipeline_settings(Config::load(config_path))); }

}  // namespace hap
