#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hap/data.hpp"
#include "hap/hessian_probe.hpp"
#include "hap/implant.hpp"
#include "hap/prune.hpp"
#include "hap/train.hpp"

namespace hap {

// YAML text: a mapping of sections, each a mapping of scalar values.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback) const;
  void set(const std::string& section, const std::string& key, const std::string& value);
  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return values_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
};

// Space separated layer list, shapes inferred from the input:
//   conv3x3:C conv1x1:C dense:N attention:H relu avgpool:K flatten softmax
// A final dense layer sized to the class count is appended when the list does
// not end in one.
ModelSpec parse_architecture(const std::string& text, InputShape input, Index classes, LossKind loss = LossKind::kCrossEntropy);

enum class PruneTarget : std::uint8_t { kChannels, kHeads };

struct PruneSettings {
  PruneTarget target = PruneTarget::kChannels;
  Ordering ordering = Ordering::kHap;
  Budget budget{BudgetKind::kParamFraction, 0.5};
  double per_layer_limit = kDefaultPerLayerLimit;
  double implant_ratio = 0.0;
  std::uint64_t seed = 1;  // Random ordering
  ImplantInit init = ImplantInit::kCenterTap;
};

struct PipelineSettings {
  DataSource data;
  double validation_fraction = 0.25;
  std::string architecture = "conv3x3:8 relu conv3x3:8 relu avgpool:2 flatten";
  std::uint64_t model_seed = 1;
  TrainConfig train;
  TraceOptions trace;
  Index eval_examples = kDefaultEvalExamples;
  PruneSettings prune;
  TrainConfig finetune;
  std::string output_dir = "hap_out";
  std::string csv_pattern = "traces/group_{id}.csv";
};

PipelineSettings pipeline_settings(const Config& config);

struct PipelineReport {
  double baseline_accuracy = 0.0;
  double final_accuracy = 0.0;
  double accuracy_drop = 0.0;
  double params_remaining_pct = 100.0;
  double flops_remaining_pct = 100.0;
  Ordering ordering = Ordering::kHap;
  std::uint64_t seed = 0;
  Index pruned_groups = 0;
  Index implanted_channels = 0;
  Index params_before = 0;
  Index params_after = 0;
  Index flops_before = 0;
  Index flops_after = 0;
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage
};

// Structured text, one record; timings are kept out of it.
std::string result_record(const PipelineReport& report);

// Trace estimates for every group, scored.
std::vector<SensitivityRecord> sensitivity_records(const ModelInstance& model, const Dataset& data,
                                                   const TraceOptions& options, Index eval_examples,
                                                   std::vector<TraceEstimate>* estimates = nullptr);

PrunePlan make_plan(const ModelInstance& model, const std::vector<SensitivityRecord>& records, const PruneSettings& settings);

// train -> traces -> scores -> plan -> implant/rebuild -> finetune -> report.
// Artifacts in settings.output_dir: baseline.ckpt, pruned.ckpt, final.ckpt,
// plan.txt, convergence CSVs, result.txt, timings.txt. A failing stage raises
// the original error type with the stage name prefixed.
PipelineReport run_pipeline(const PipelineSettings& settings);
PipelineReport run_pipeline(const std::string& config_path);

}  // namespace hap
