// SPDX-License-Identifier: Apache-2.0
//
// Locate-then-edit knowledge editing. An edit computes a key at the last
// subject token of the edit layer, finds a value that makes the model emit
// the new object, and writes the pair into that layer's down-projection
// with a covariance-weighted rank-one update.
//
// Two ways of finding the value are provided: direct optimization of the
// next-token objective ("baseline"), and a two-phase procedure ("cpa") that
// first optimizes a residual state at the last relation token of a deeper
// anchor layer and then fits the value so the forward pass reaches it.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpa/model.hpp"
#include "cpa/world.hpp"

namespace cpa {

struct EditHyperparams {
  std::size_t edit_layer = 2;
  std::size_t anchor_layer = 4;
  double kl_weight = 0.0625;
  double trajectory_weight = 0.1;
  double target_threshold = 2e-2;      // stop the next-token objectives below this loss
  double trajectory_threshold = 5e-2;  // stop trajectory alignment below this loss
  std::size_t max_epochs = 25;
  double learning_rate = 0.5;
  double weight_decay = 0.5;
  std::size_t covariance_samples = 2000;
  double covariance_ridge = 1e-4;
  std::uint64_t covariance_seed = 0;

  void validate(const ModelConfig& config) const;
  nlohmann::json to_json() const;
};

enum class EditMethod { Baseline, Cpa, Phase1Only, Phase2Only };

const char* method_name(EditMethod method);
EditMethod method_from_name(const std::string& name);

/// Per-step losses of one optimization phase. losses[i] is measured before
/// step i + 1; the last entry is the loss the phase ended with.
struct PhaseTrace {
  std::vector<double> losses;
  bool converged = false;
  std::size_t steps = 0;
};

/// Relation anchor: the residual state at the last relation token of the
/// anchor layer before and after optimization.
struct AnchorSpec {
  std::size_t layer = 0;
  std::size_t position = 0;  // last relation token of the unprefixed rewrite prompt
  Tensor original;           // 1 x d_model, unprefixed prompt
  Tensor optimized;
  Tensor offset;             // optimized - original
};

struct EditOutcome {
  EditMethod method = EditMethod::Baseline;
  std::size_t layer = 0;  // layer whose down-projection was rewritten
  Tensor key;             // 1 x d_mlp
  Tensor old_value;       // W key
  Tensor value;           // value written for `key`
  std::optional<AnchorSpec> anchor;
  Tensor delta;  // d_model x d_mlp
  std::map<std::string, PhaseTrace> phases;  // "target", "anchor", "trajectory"

  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Mean MLP key at (layer, last subject token) over the prefixed rewrites.
Tensor compute_key(const Transformer& model, const EditRequest& request, std::size_t layer);

/// Second moment of MLP keys at `layer` over world prompts and positions,
/// plus ridge * I. Throws NumericError on non-finite activations.
Tensor estimate_covariance(const Transformer& model, const FactWorld& world, std::size_t layer,
                           std::size_t n_samples, double ridge, std::uint64_t seed);

/// Covariances computed on first use, per layer.
class CovarianceCache {
 public:
  CovarianceCache(const Transformer& model, const FactWorld& world, const EditHyperparams& hp);
  const Tensor& at(std::size_t layer);

 private:
  const Transformer& model_;
  const FactWorld& world_;
  std::size_t samples_;
  double ridge_;
  std::uint64_t seed_;
  std::map<std::size_t, Tensor> cache_;
};

struct RankOneResult {
  Tensor updated;  // W + delta
  Tensor delta;
};

/// Minimum-change update in the C-weighted norm that maps `key` to `value`:
/// delta = (value - W key)(C^-1 key)^T / (key^T C^-1 key).
RankOneResult rank_one_update(const Tensor& w, const Tensor& key, const Tensor& value, const Tensor& covariance);

struct TargetResult {
  Tensor old_value;  // mean clean MLP output at (edit layer, last subject token)
  Tensor value;      // old_value + optimized offset
  PhaseTrace trace;
};

/// Next-token objective over the prefixed rewrites with a KL penalty that
/// keeps the subject-only prompt's distribution near its starting point.
/// The optimized value replaces the MLP output at the last subject token of
/// every prompt.
TargetResult optimize_target_baseline(const Transformer& model, const EditRequest& request,
                                      const EditHyperparams& hp);

struct TargetObjective {
  GraphResult graph;  // sequence 0 is the unprefixed rewrite; parameters require grad
  ad::Var loss;
};

/// The next-token editing objective with `value` (default: the clean mean)
/// in place of the MLP output at (edit layer, last subject token). Every
/// hidden state of the graph receives a gradient.
TargetObjective target_objective(ad::Tape& tape, const Transformer& model, const EditRequest& request,
                                 const EditHyperparams& hp, const std::optional<Tensor>& value = std::nullopt);

struct AnchorResult {
  AnchorSpec anchor;
  PhaseTrace trace;
};

AnchorResult phase1_relation_anchoring(const Transformer& model, const EditRequest& request,
                                       const EditHyperparams& hp);

/// Fits the edit-layer value so that the residual at the anchor reproduces
/// the optimized anchor on every prefixed rewrite.
TargetResult phase2_trajectory_alignment(const Transformer& model, const EditRequest& request,
                                         const AnchorSpec& anchor, const EditHyperparams& hp);

struct EditResult {
  Transformer model;
  EditOutcome outcome;
};

/// Applies one edit to a copy of `model`.
EditResult edit(const Transformer& model, const EditRequest& request, EditMethod method, const EditHyperparams& hp,
                CovarianceCache& covariances);

}  // namespace cpa
