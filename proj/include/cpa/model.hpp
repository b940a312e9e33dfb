// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm decoder-only transformer with named intervention points.
//
// Every linear map is stored PyTorch-style as (out x in) and applied as
// x . W^T, so the MLP down-projection of a layer is a (d_model x d_mlp)
// matrix mapping an MLP key (the post-GELU hidden activation) to its value.
// Linear maps carry no bias; layer norms do.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cpa/autodiff.hpp"
#include "cpa/tensor.hpp"

namespace cpa {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 16;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv;  // (3 d) x d
  Tensor w_out;  // d x d
  Tensor ln2_gain, ln2_bias;
  Tensor w_up;    // d_mlp x d
  Tensor w_down;  // d x d_mlp
};

struct Weights {
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq_len x d
  std::vector<LayerWeights> layers;
  Tensor final_gain, final_bias;
  Tensor unembedding;  // vocab x d
};

class Transformer {
 public:
  Transformer(ModelConfig config, Weights weights);

  /// GPT-2 style initialization drawn from config.seed.
  static Transformer random(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& weights() { return weights_; }

  /// Canonical declaration order; shared by the optimizer and checkpoints.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;

 private:
  ModelConfig config_;
  Weights weights_;
};

// ---------------------------------------------------------------------------
// Interventions

enum class Site {
  Embedding,    // token + position embedding (noise target)
  ResidualOut,  // residual stream after block `layer`
  MlpIn,        // post-GELU MLP hidden state: the key of the down-projection
  MlpOut,       // down-projection output: the value
};

const char* site_name(Site site);
std::size_t site_width(const ModelConfig& config, Site site);

struct ReadAction {};
struct ReplaceAction {
  Tensor value;
};
struct NoiseAction {
  double stddev = 0.0;
  std::uint64_t seed = 0;
};

struct InterventionSpec {
  Site site = Site::ResidualOut;
  std::size_t layer = 0;
  std::size_t position = 0;
  std::variant<ReadAction, ReplaceAction, NoiseAction> action;
};

struct ForwardRecord {
  Tensor logits;                  // positions x vocab
  std::vector<Tensor> captured;   // one 1 x width row per read, in request order
};

/// Gaussian noise row used by NoiseAction; a pure function of (seed, position).
Tensor noise_row(std::size_t width, double stddev, std::uint64_t seed, std::size_t position);

ForwardRecord forward(const Transformer& model, std::span<const TokenId> tokens,
                      std::span<const InterventionSpec> interventions = {});

/// Softmax over the final-position logits.
Tensor next_token_distribution(const Transformer& model, std::span<const TokenId> tokens,
                               std::span<const InterventionSpec> interventions = {});

struct Generation {
  TokenSeq tokens;        // generated continuation only
  bool truncated = false; // context exceeded max_seq_len and was windowed
};

/// Autoregressive sampling. temperature <= 0 decodes greedily.
Generation generate(const Transformer& model, std::span<const TokenId> prompt, std::size_t n_steps,
                    double temperature, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Graph-level forward over packed sequences. Used wherever gradients or
// batched interventions are needed.

struct GraphPatch {
  Site site = Site::MlpOut;
  std::size_t layer = 0;
  std::size_t sequence = 0;
  std::size_t position = 0;
  ad::Var value;  // 1 x site width; may require grad
};

struct GraphNoise {
  std::size_t sequence = 0;
  std::size_t position = 0;
  Tensor noise;  // 1 x d_model
};

struct GraphOptions {
  std::vector<GraphPatch> patches;
  std::vector<GraphNoise> noise;
  bool params_require_grad = false;
  /// Stop after this block; logits are then not produced.
  std::optional<std::size_t> last_layer;
  /// Restrict logits to these (sequence, position) pairs, in order.
  std::optional<std::vector<std::pair<std::size_t, std::size_t>>> logit_positions;
};

struct GraphResult {
  std::vector<ad::Segment> segments;
  std::vector<ad::Var> params;  // canonical order
  std::vector<ad::Var> residual_out, mlp_in, mlp_out;  // per computed layer, packed rows
  ad::Var logits;  // packed rows (or logit_positions rows) x vocab

  std::size_t row(std::size_t sequence, std::size_t position) const {
    return segments[sequence].offset + position;
  }
};

GraphResult build_graph(ad::Tape& tape, const Transformer& model, std::span<const TokenSeq> sequences,
                        const GraphOptions& options = {});

}  // namespace cpa
