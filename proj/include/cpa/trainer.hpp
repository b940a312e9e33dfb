// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>

#include "cpa/model.hpp"
#include "cpa/world.hpp"

namespace cpa {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double accuracy_gate = 0.95;
  /// Chance that a training sequence gets a random filler prefix, so the
  /// model is at home with the prefixed prompts used during editing.
  double prefix_probability = 0.5;
  /// Multi-fact sequences per subject per epoch: the subject followed by
  /// several relation phrases, each answered by its object, in random order.
  std::size_t biographies_per_subject = 0;
  std::size_t biography_facts = 3;

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_losses;
  double fact_accuracy = 0.0;
  bool gate_passed = false;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Transformer model;
  TrainReport report;
};

/// ModelConfig for a world: vocabulary from the tokenizer, everything else
/// from `base`. Rejects configs whose max_seq_len cannot hold a training
/// sequence.
ModelConfig model_config_for(const FactWorld& world, ModelConfig base, const TrainConfig& train_config = {});

/// Argmax correctness over every (subject, relation) pair and every template.
double fact_accuracy(const Transformer& model, const FactWorld& world);

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

TrainResult train(const FactWorld& world, const ModelConfig& model_config, const TrainConfig& train_config,
                  const EpochCallback& on_epoch = {});

}  // namespace cpa
