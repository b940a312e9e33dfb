// SPDX-License-Identifier: Apache-2.0
//
// Per-edit metrics and the experiment drivers built on them.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpa/editor.hpp"
#include "cpa/model.hpp"
#include "cpa/world.hpp"

namespace cpa {

/// Metric columns in CSV order. "efficacy_argmax" is the stricter
/// argmax == new object variant of efficacy.
inline constexpr std::array<const char*, 8> kMetricNames = {
    "efficacy", "generalization", "s_spec", "r_spec", "dp", "cap", "fluency", "efficacy_argmax"};

struct MetricRecord {
  std::size_t edit_id = 0;
  std::string method;
  std::uint64_t seed = 0;
  /// Keyed by kMetricNames; a metric whose probe set is empty is absent.
  std::map<std::string, double> values;
  double wall_ms = 0.0;

  std::optional<double> get(const std::string& metric) const;
};

struct FluencyConfig {
  std::size_t samples = 5;
  std::size_t tokens = 30;
  double temperature = 1.0;
};

/// Mean bigram entropy in bits of a token sequence's consecutive pairs.
double bigram_entropy(std::span<const TokenId> tokens);

MetricRecord evaluate_edit(const Transformer& pre, const Transformer& post, const FactWorld& world,
                           const EditRequest& request, std::uint64_t fluency_seed, const FluencyConfig& fluency = {});

struct MetricSummary {
  double mean = 0.0;
  std::optional<double> std;  // over per-seed means; absent with fewer than two seeds
  std::size_t count = 0;      // records contributing
};

struct Report {
  std::string method;
  std::string world_hash;
  std::string model_hash;
  std::string config_hash;
  std::map<std::string, MetricSummary> metrics;
  std::size_t n_edits = 0;  // successful edits over all seeds
  std::size_t n_seeds = 0;
  std::size_t failures = 0;

  nlohmann::json to_json() const;
};

/// Mean of per-seed means and their sample standard deviation, per metric.
/// Seeds are taken in the order given; duplicates count separately.
Report aggregate(const std::string& method, const std::vector<MetricRecord>& records,
                 const std::vector<std::uint64_t>& seeds);

struct EditFailure {
  std::uint64_t seed = 0;
  std::size_t edit_id = 0;
  std::string method;
  std::string message;
};

using EditObserver = std::function<void(std::uint64_t seed, const EditRequest& request, EditMethod method,
                                        const Transformer& edited, const EditOutcome& outcome)>;

struct ExperimentOptions {
  FluencyConfig fluency;
  EditObserver observer;
  std::string config_hash;
};

struct ExperimentResult {
  std::vector<MetricRecord> records;  // seed-major, then edit, then method
  std::vector<Report> reports;        // one per method, in request order
  std::vector<EditFailure> failures;
};

/// Edits the model answers correctly before editing, drawn for one seed.
std::vector<EditRequest> draw_edits(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                                    std::uint64_t seed);

ExperimentResult run_experiment(const Transformer& model, const FactWorld& world,
                                const std::vector<EditMethod>& methods, std::size_t n_edits,
                                const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                                const ExperimentOptions& options = {});

ExperimentResult ablation_suite(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                                const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                                const ExperimentOptions& options = {});

struct SweepResult {
  std::vector<std::size_t> layers;            // anchor layers actually run
  std::vector<ExperimentResult> per_layer;    // parallel to layers; cpa only
  std::vector<std::string> notices;           // skipped layers
};

SweepResult anchor_layer_sweep(const Transformer& model, const FactWorld& world,
                               const std::vector<std::size_t>& anchor_layers, std::size_t n_edits,
                               const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                               const ExperimentOptions& options = {});

inline constexpr std::size_t kDynamicsEpochs = 7;

struct LossCurves {
  std::size_t anchor_layer = 0;
  std::array<double, kDynamicsEpochs> anchor{};      // mean relation-anchoring loss per epoch
  std::array<double, kDynamicsEpochs> trajectory{};  // mean trajectory-alignment loss per epoch
  std::size_t n_edits = 0;
};

/// Mean per-epoch losses of both phases over n_edits (>= 10) edits. A phase
/// that stops early contributes its final loss to the remaining epochs.
std::vector<LossCurves> phase_loss_dynamics(const Transformer& model, const FactWorld& world,
                                            const std::vector<std::size_t>& anchor_layers, std::size_t n_edits,
                                            std::uint64_t seed, const EditHyperparams& hp);

}  // namespace cpa
