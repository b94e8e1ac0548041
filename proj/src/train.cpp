#include "hap/train.hpp"

#include <cmath>
#include <numeric>

#include "hap/errors.hpp"
#include "hap/random.hpp"

namespace hap {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
    throw ConfigError("train: lr and weight_decay must be >= 0 and momentum in [0, 1)");
  }
  if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch_size must be positive");
}

double TrainConfig::lr_at(Index epoch) const {
  if (4 * epoch >= 3 * epochs) return lr * 0.01;
  if (2 * epoch >= epochs) return lr * 0.1;
  return lr;
}

TrainResult train(const ModelInstance& model, const Dataset& train_set, const Dataset& validation_set,
                  const TrainConfig& config) {
  config.validate();
  if (train_set.size() == 0 || validation_set.size() == 0) throw ShapeError("train: empty train or validation set");

  ModelInstance current = model;
  TrainResult result{model, accuracy(model, validation_set), 0, {}};
  result.history.push_back({0, evaluate_loss(model, train_set.batch()), result.accuracy});

  TensorList velocity = zeros_like(current.params);
  std::vector<Index> order(static_cast<std::size_t>(train_set.size()));
  const ModelFn fn = loss_fn(current.spec);

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    const double lr = config.lr_at(epoch);
    double loss_sum = 0.0;
    Index steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const Batch batch = make_batch(train_set, std::span<const Index>(order).subspan(start, end - start));
      ForwardResult fr;
      try {
        fr = forward(fn, current.params, batch);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(steps + 1) +
                           " (lr " + std::to_string(lr) + "): " + e.what());
      }
      const TensorList grad = gradient(fr.tape);
      for (std::size_t k = 0; k < current.params.size(); ++k) {
        auto& w = current.params[k].data();
        auto& v = velocity[k].data();
        v = config.momentum * v + grad[k].data() + config.weight_decay * w;
        w -= lr * v;
        if (!current.params[k].all_finite()) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(steps + 1) + ": non-finite parameters after the update");
        }
      }
      loss_sum += fr.loss;
      ++steps;
    }
    const double acc = accuracy(current, validation_set);
    result.history.push_back({epoch + 1, loss_sum / static_cast<double>(steps), acc});
    if (acc > result.accuracy) {
      result.accuracy = acc;
      result.model = current;
      result.best_epoch = epoch + 1;
    }
  }
  return result;
}

TrainResult finetune(const ModelInstance& model, const Dataset& train_set, const Dataset& validation_set,
                     const TrainConfig& config) {
  return train(model, train_set, validation_set, config);
}

}  // namespace hap
