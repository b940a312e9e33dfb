// SPDX-License-Identifier: Apache-2.0
//
// Small shared worlds and models for the unit tests. Trained models are
// built once per test binary.

#pragma once

#include <cmath>
#include <vector>

#include "cpa/editor.hpp"
#include "cpa/model.hpp"
#include "cpa/random.hpp"
#include "cpa/trainer.hpp"
#include "cpa/world.hpp"

namespace cpa::testing {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t({rows, cols});
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}


inline ModelConfig tiny_config(std::size_t vocab, std::size_t layers = 2, std::size_t d = 16) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.d_mlp = 2 * d;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.seed = 11;
  return c;
}

/// The two example prompts used throughout: a two-token subject with a
/// three-token relation phrase, and a relation-first form.
inline FactWorld example_world() {
  std::vector<Relation> relations = {
      {"citizenship", {"is a citizen of", "holds citizenship of"}, "The citizenship of", {0, 1}},
      {"language", {"speaks", "natively speaks"}, "The mother tongue of", {2, 3}},
  };
  std::vector<std::string> subjects = {"Lionel Messi", "Danielle Darrieux", "Ada", "Bram", "Cleo"};
  std::vector<std::string> objects = {"Argentina", "France", "Spanish", "French"};
  std::vector<std::vector<std::size_t>> facts = {{0, 2}, {1, 3}, {0, 3}, {1, 2}, {0, 2}};
  return FactWorld::from_inventories(subjects, relations, objects, facts, {"well", "so", "then", "yes"}, 3);
}

inline WorldSpec small_spec() {
  WorldSpec s;
  s.n_subjects = 8;
  s.n_relations = 4;
  s.objects_per_relation = 3;
  s.multi_token_fraction = 0.25;
  s.seed = 5;
  return s;
}

struct Trained {
  FactWorld world;
  Transformer model;
  double accuracy;
};

/// 3-layer model trained to memorize small_spec(); edit layer 0, anchor 1.
inline const Trained& small_trained() {
  static const Trained t = [] {
    FactWorld world = FactWorld::build(small_spec());
    ModelConfig mc = tiny_config(0, 3, 32);
    mc.n_heads = 4;
    mc = model_config_for(world, mc);
    TrainConfig tc;
    tc.epochs = 120;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    tc.seed = 2;
    TrainResult r = train(world, mc, tc);
    return Trained{std::move(world), std::move(r.model), r.report.fact_accuracy};
  }();
  return t;
}

inline EditHyperparams small_hp() {
  EditHyperparams hp;
  hp.edit_layer = 0;
  hp.anchor_layer = 1;
  hp.covariance_samples = 300;
  hp.max_epochs = 10;
  return hp;
}

}  // namespace cpa::testing
