// SPDX-License-Identifier: Apache-2.0
//
// Diagnostics over layers x positions: gradient saliency of the editing
// objective, causal tracing of MLP outputs, and the log ratio of indirect
// effects between two traces.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "cpa/editor.hpp"
#include "cpa/model.hpp"
#include "cpa/world.hpp"

namespace cpa {

/// Rows are layers first_layer .. first_layer + grid.rows() - 1.
struct SaliencyMap {
  Tensor grid;
  std::size_t first_layer = 0;
  std::vector<PositionTag> tags;
  TokenSeq tokens;
  std::size_t epoch = 1;
};

/// L2 norm of the objective's gradient with respect to every residual state
/// after blocks edit_layer .. n_layers - 1 of the unprefixed rewrite prompt.
/// `value` replaces the edit-site MLP output (default: the clean value).
SaliencyMap gradient_saliency(const Transformer& model, const EditRequest& request, const EditHyperparams& hp,
                              const std::optional<Tensor>& value = std::nullopt, std::size_t epoch = 1);

enum class CorruptSpan { Subject, Relation };

struct Corruption {
  CorruptSpan span = CorruptSpan::Subject;
  double noise_std = 0.0;
  std::size_t n_seeds = 10;
  std::uint64_t seed = 0;
};

/// Three times the standard deviation of the token embedding entries.
double default_noise_std(const Transformer& model);

/// Positions the corruption noises; throws ValidationError when empty.
std::vector<std::size_t> corrupted_positions(const Prompt& prompt, CorruptSpan span);

/// Probability gain of restoring one activation into a corrupted run.
inline double indirect_effect(double p_restored, double p_corrupted) { return p_restored - p_corrupted; }

struct TraceGrid {
  Tensor ie;  // n_layers x positions, averaged over noise seeds
  std::vector<PositionTag> tags;
  TokenSeq tokens;
  TokenId target = 0;
  Corruption corruption;
  double p_clean = 0.0;
  double p_corrupted = 0.0;  // mean over noise seeds
};

/// Restores the clean MLP output at each (layer, position) into runs whose
/// embeddings at the corrupted span carry Gaussian noise.
TraceGrid causal_trace(const Transformer& model, const Prompt& prompt, TokenId target, const Corruption& corruption);

inline constexpr double kIeFloor = 1e-6;

struct RieGrid {
  Tensor per_layer;             // ln(max(ie_post, floor) / max(ie_pre, floor))
  std::vector<double> max_rie;  // per position, max over layers
  std::vector<PositionTag> tags;
};

RieGrid rie(const TraceGrid& pre, const TraceGrid& post);

/// Per tag, the maximum of `values` over positions carrying that tag.
std::map<PositionTag, double> max_by_tag(std::span<const double> values, std::span<const PositionTag> tags);

/// Per position, the maximum over grid rows.
std::vector<double> column_max(const Tensor& grid);

}  // namespace cpa
