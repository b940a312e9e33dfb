// SPDX-License-Identifier: Apache-2.0

#include "cpa/interp.hpp"

#include <algorithm>
#include <cmath>

#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

SaliencyMap gradient_saliency(const Transformer& model, const EditRequest& request, const EditHyperparams& hp,
                              const std::optional<Tensor>& value, std::size_t epoch) {
  const ModelConfig& cfg = model.config();
  if (hp.edit_layer >= cfg.n_layers) throw ValidationError("saliency: edit layer outside the model");
  ad::Tape tape;
  const TargetObjective obj = target_objective(tape, model, request, hp, value);
  tape.backward(obj.loss);

  const std::size_t len = request.rewrite.tokens.size();
  SaliencyMap map;
  map.first_layer = hp.edit_layer;
  map.tags = request.rewrite.tags;
  map.tokens = request.rewrite.tokens;
  map.epoch = epoch;
  map.grid = Tensor({cfg.n_layers - hp.edit_layer, len});
  for (std::size_t l = hp.edit_layer; l < cfg.n_layers; ++l) {
    const Tensor g = tape.grad(obj.graph.residual_out[l]);
    for (std::size_t p = 0; p < len; ++p) {
      map.grid(l - hp.edit_layer, p) = l2_norm(g.row_span(obj.graph.row(0, p)));
    }
  }
  return map;
}

double default_noise_std(const Transformer& model) {
  const auto e = model.weights().token_embedding.data();
  double mean = 0.0;
  for (double x : e) mean += x;
  mean /= static_cast<double>(e.size());
  double var = 0.0;
  for (double x : e) var += (x - mean) * (x - mean);
  return 3.0 * std::sqrt(var / static_cast<double>(e.size()));
}

std::vector<std::size_t> corrupted_positions(const Prompt& prompt, CorruptSpan span) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < prompt.tags.size(); ++i) {
    const PositionTag t = prompt.tags[i];
    const bool subject = t == PositionTag::FirstSubject || t == PositionTag::MidSubject || t == PositionTag::LastSubject;
    const bool relation = t == PositionTag::RelationPrefix || t == PositionTag::FirstRelation ||
                          t == PositionTag::MidRelation || t == PositionTag::LastRelation;
    if ((span == CorruptSpan::Subject && subject) || (span == CorruptSpan::Relation && relation)) out.push_back(i);
  }
  if (out.empty()) throw ValidationError("trace: corruption span is empty for this prompt");
  return out;
}

TraceGrid causal_trace(const Transformer& model, const Prompt& prompt, TokenId target, const Corruption& corruption) {
  const ModelConfig& cfg = model.config();
  if (corruption.n_seeds == 0) throw ValidationError("trace: n_seeds must be positive");
  if (!(corruption.noise_std >= 0.0)) throw ValidationError("trace: noise std must be non-negative");
  if (target >= cfg.vocab_size) throw ValidationError("trace: target token outside vocabulary");
  const std::vector<std::size_t> span = corrupted_positions(prompt, corruption.span);
  const std::size_t len = prompt.tokens.size();
  const std::size_t last = len - 1;

  // Clean run: reference probability and the MLP outputs to restore.
  std::vector<Tensor> clean;  // layer-major rows
  TraceGrid grid;
  {
    ad::Tape tape;
    const std::vector<TokenSeq> seqs{prompt.tokens};
    const GraphResult g = build_graph(tape, model, seqs);
    grid.p_clean = ad::softmax_rows(g.logits.value().row(last))[target];
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t p = 0; p < len; ++p) clean.push_back(g.mlp_out[l].value().row(p));
    }
  }
  grid.tags = prompt.tags;
  grid.tokens = prompt.tokens;
  grid.target = target;
  grid.corruption = corruption;
  grid.ie = Tensor({cfg.n_layers, len});

  // Per seed: one corrupted run and one run per restored site, packed.
  const std::size_t per_seed = 1 + cfg.n_layers * len;
  constexpr std::size_t kChunk = 192;
  for (std::size_t s = 0; s < corruption.n_seeds; ++s) {
    const std::uint64_t noise_seed = mix_seed(corruption.seed, s);
    std::vector<double> probs(per_seed);
    for (std::size_t start = 0; start < per_seed; start += kChunk) {
      const std::size_t end = std::min(per_seed, start + kChunk);
      ad::Tape tape;
      GraphOptions opt;
      opt.logit_positions.emplace();
      std::vector<TokenSeq> seqs;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t seq = seqs.size();
        seqs.push_back(prompt.tokens);
        for (std::size_t p : span) {
          opt.noise.push_back({seq, p, noise_row(cfg.d_model, corruption.noise_std, noise_seed, p)});
        }
        if (k > 0) {
          const std::size_t site = k - 1;
          const std::size_t layer = site / len, pos = site % len;
          opt.patches.push_back({Site::MlpOut, layer, seq, pos, tape.constant(clean[site])});
        }
        opt.logit_positions->push_back({seq, last});
      }
      const GraphResult g = build_graph(tape, model, seqs, opt);
      const Tensor p = ad::softmax_rows(g.logits.value());
      for (std::size_t k = start; k < end; ++k) probs[k] = p(k - start, target);
    }
    grid.p_corrupted += probs[0];
    for (std::size_t site = 0; site + 1 < per_seed; ++site) {
      grid.ie(site / len, site % len) += indirect_effect(probs[site + 1], probs[0]);
    }
  }
  const double inv = 1.0 / static_cast<double>(corruption.n_seeds);
  grid.ie *= inv;
  grid.p_corrupted *= inv;
  return grid;
}

RieGrid rie(const TraceGrid& pre, const TraceGrid& post) {
  if (pre.ie.shape() != post.ie.shape() || pre.tags != post.tags || pre.tokens != post.tokens) {
    throw ValidationError("rie: traces do not share prompt and layer structure");
  }
  RieGrid out;
  out.tags = pre.tags;
  out.per_layer = Tensor(pre.ie.shape());
  for (std::size_t i = 0; i < pre.ie.size(); ++i) {
    out.per_layer[i] = std::log(std::max(post.ie[i], kIeFloor) / std::max(pre.ie[i], kIeFloor));
  }
  out.max_rie = column_max(out.per_layer);
  return out;
}

std::map<PositionTag, double> max_by_tag(std::span<const double> values, std::span<const PositionTag> tags) {
  if (values.size() != tags.size()) throw ValidationError("max_by_tag: values and tags differ in length");
  std::map<PositionTag, double> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto [it, inserted] = out.emplace(tags[i], values[i]);
    if (!inserted) it->second = std::max(it->second, values[i]);
  }
  return out;
}

std::vector<double> column_max(const Tensor& grid) {
  std::vector<double> out(grid.cols(), -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t c = 0; c < grid.cols(); ++c) out[c] = std::max(out[c], grid(r, c));
  }
  return out;
}

}  // namespace cpa
