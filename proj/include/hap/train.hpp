#pragma once

#include <cstdint>
#include <vector>

#include "hap/data.hpp"
#include "hap/model.hpp"

namespace hap {

// SGD with momentum; the learning rate drops by 10x at 1/2 and again at 3/4
// of the epochs.
struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 4e-4;
  Index epochs = 60;
  Index batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
  double lr_at(Index epoch) const;
};

struct EpochStats {
  Index epoch = 0;  // 0 is the starting point
  double train_loss = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainResult {
  ModelInstance model;  // best validation accuracy seen, earliest on ties
  double accuracy = 0.0;
  Index best_epoch = 0;
  std::vector<EpochStats> history;
};

// Throws NumericError naming the epoch and step when the loss diverges.
TrainResult train(const ModelInstance& model, const Dataset& train_set, const Dataset& validation_set,
                  const TrainConfig& config);

// train() from already pruned or implanted weights.
TrainResult finetune(const ModelInstance& model, const Dataset& train_set, const Dataset& validation_set,
                     const TrainConfig& config);

}  // namespace hap
