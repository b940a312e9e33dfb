// SPDX-License-Identifier: Apache-2.0

#include "cpa/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

namespace {

void expect_shape(const Tensor& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw ValidationError("parameter " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                          shape_string(shape));
  }
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = stddev * rng.normal();
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 2) throw ValidationError("model: n_layers must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ValidationError("model: d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
  }
  if (d_mlp == 0) throw ValidationError("model: d_mlp must be positive");
  if (vocab_size == 0) throw ValidationError("model: vocab_size must be positive");
  if (max_seq_len == 0) throw ValidationError("model: max_seq_len must be positive");
}

Transformer::Transformer(ModelConfig config, Weights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const std::size_t d = config_.d_model, v = config_.vocab_size;
  expect_shape(weights_.token_embedding, {v, d}, "token_embedding");
  expect_shape(weights_.position_embedding, {config_.max_seq_len, d}, "position_embedding");
  if (weights_.layers.size() != config_.n_layers) throw ValidationError("model: layer count mismatch");
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const auto& L = weights_.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    expect_shape(L.ln1_gain, {1, d}, p + "ln1_gain");
    expect_shape(L.ln1_bias, {1, d}, p + "ln1_bias");
    expect_shape(L.w_qkv, {3 * d, d}, p + "w_qkv");
    expect_shape(L.w_out, {d, d}, p + "w_out");
    expect_shape(L.ln2_gain, {1, d}, p + "ln2_gain");
    expect_shape(L.ln2_bias, {1, d}, p + "ln2_bias");
    expect_shape(L.w_up, {config_.d_mlp, d}, p + "w_up");
    expect_shape(L.w_down, {d, config_.d_mlp}, p + "w_down");
  }
  expect_shape(weights_.final_gain, {1, d}, "final_gain");
  expect_shape(weights_.final_bias, {1, d}, "final_bias");
  expect_shape(weights_.unembedding, {v, d}, "unembedding");
}

Transformer Transformer::random(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  Weights w;
  w.token_embedding = normal_tensor({config.vocab_size, d}, base, rng);
  w.position_embedding = normal_tensor({config.max_seq_len, d}, base, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights L;
    L.ln1_gain = Tensor({1, d}, 1.0);
    L.ln1_bias = Tensor({1, d}, 0.0);
    L.w_qkv = normal_tensor({3 * d, d}, base, rng);
    L.w_out = normal_tensor({d, d}, resid, rng);
    L.ln2_gain = Tensor({1, d}, 1.0);
    L.ln2_bias = Tensor({1, d}, 0.0);
    L.w_up = normal_tensor({config.d_mlp, d}, base, rng);
    L.w_down = normal_tensor({d, config.d_mlp}, resid, rng);
    w.layers.push_back(std::move(L));
  }
  w.final_gain = Tensor({1, d}, 1.0);
  w.final_bias = Tensor({1, d}, 0.0);
  w.unembedding = normal_tensor({config.vocab_size, d}, base, rng);
  return Transformer(config, std::move(w));
}

std::vector<Tensor*> Transformer::parameters() {
  std::vector<Tensor*> out{&weights_.token_embedding, &weights_.position_embedding};
  for (auto& L : weights_.layers) {
    for (Tensor* t : {&L.ln1_gain, &L.ln1_bias, &L.w_qkv, &L.w_out, &L.ln2_gain, &L.ln2_bias, &L.w_up, &L.w_down}) {
      out.push_back(t);
    }
  }
  out.push_back(&weights_.final_gain);
  out.push_back(&weights_.final_bias);
  out.push_back(&weights_.unembedding);
  return out;
}

std::vector<const Tensor*> Transformer::parameters() const {
  auto mut = const_cast<Transformer*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> Transformer::parameter_names() const {
  std::vector<std::string> names{"token_embedding", "position_embedding"};
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (const char* n : {"ln1_gain", "ln1_bias", "w_qkv", "w_out", "ln2_gain", "ln2_bias", "w_up", "w_down"}) {
      names.push_back("layers." + std::to_string(l) + "." + n);
    }
  }
  names.insert(names.end(), {"final_gain", "final_bias", "unembedding"});
  return names;
}

// ---------------------------------------------------------------------------

const char* site_name(Site site) {
  switch (site) {
    case Site::Embedding: return "embedding";
    case Site::ResidualOut: return "residual_out";
    case Site::MlpIn: return "mlp_in";
    case Site::MlpOut: return "mlp_out";
  }
  return "unknown";
}

std::size_t site_width(const ModelConfig& config, Site site) {
  return site == Site::MlpIn ? config.d_mlp : config.d_model;
}

Tensor noise_row(std::size_t width, double stddev, std::uint64_t seed, std::size_t position) {
  Rng rng(mix_seed(seed, position));
  Tensor row({1, width});
  for (double& x : row.data()) x = stddev * rng.normal();
  return row;
}

GraphResult build_graph(ad::Tape& tape, const Transformer& model, std::span<const TokenSeq> sequences,
                        const GraphOptions& options) {
  const ModelConfig& cfg = model.config();
  const Weights& w = model.weights();
  if (sequences.empty()) throw ValidationError("forward: no sequences");

  GraphResult result;
  std::vector<std::size_t> ids, positions;
  for (const TokenSeq& seq : sequences) {
    if (seq.empty()) throw ValidationError("forward: empty token sequence");
    if (seq.size() > cfg.max_seq_len) {
      throw ValidationError("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    }
    result.segments.push_back({ids.size(), seq.size()});
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (seq[p] >= cfg.vocab_size) {
        throw ValidationError("forward: token id " + std::to_string(seq[p]) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
      }
      ids.push_back(seq[p]);
      positions.push_back(p);
    }
  }

  const std::size_t last_layer = options.last_layer.value_or(cfg.n_layers - 1);
  if (last_layer >= cfg.n_layers) throw ValidationError("forward: last_layer out of range");

  // Validate every intervention before any compute.
  using PatchKey = std::pair<Site, std::size_t>;
  std::map<PatchKey, std::pair<std::vector<std::size_t>, std::vector<ad::Var>>> patches;
  for (const GraphPatch& p : options.patches) {
    if (p.site == Site::Embedding) throw ValidationError("forward: embedding site only supports noise");
    if (p.layer >= cfg.n_layers) {
      throw ValidationError("forward: intervention layer " + std::to_string(p.layer) + " >= n_layers " +
                            std::to_string(cfg.n_layers));
    }
    if (p.sequence >= sequences.size() || p.position >= sequences[p.sequence].size()) {
      throw ValidationError("forward: intervention position " + std::to_string(p.position) +
                            " outside sequence");
    }
    if (!p.value.valid() || p.value.value().size() != site_width(cfg, p.site)) {
      throw ValidationError(std::string("forward: replacement width does not match site ") + site_name(p.site));
    }
    auto& slot = patches[{p.site, p.layer}];
    slot.first.push_back(result.row(p.sequence, p.position));
    slot.second.push_back(p.value);
  }
  for (const GraphNoise& n : options.noise) {
    if (n.sequence >= sequences.size() || n.position >= sequences[n.sequence].size()) {
      throw ValidationError("forward: noise position outside sequence");
    }
    if (n.noise.size() != cfg.d_model) throw ValidationError("forward: noise width mismatch");
  }
  std::vector<std::size_t> logit_rows;
  if (options.logit_positions) {
    for (const auto& [s, p] : *options.logit_positions) {
      if (s >= sequences.size() || p >= sequences[s].size()) {
        throw ValidationError("forward: logit position outside sequence");
      }
      logit_rows.push_back(result.row(s, p));
    }
  }

  auto apply = [&](ad::Var x, Site site, std::size_t layer) {
    auto it = patches.find({site, layer});
    if (it == patches.end()) return x;
    return ad::replace_rows(x, it->second.first, it->second.second);
  };

  const bool rg = options.params_require_grad;
  auto bind = [&](const Tensor& t) {
    ad::Var v = tape.external(t, rg);
    result.params.push_back(v);
    return v;
  };

  ad::Var tok = bind(w.token_embedding);
  ad::Var pos = bind(w.position_embedding);
  ad::Var x = ad::add(ad::embedding(tok, ids), ad::embedding(pos, positions));
  if (!options.noise.empty()) {
    Tensor noise({ids.size(), cfg.d_model});
    for (const GraphNoise& n : options.noise) {
      const std::size_t r = result.row(n.sequence, n.position);
      for (std::size_t c = 0; c < cfg.d_model; ++c) noise(r, c) += n.noise[c];
    }
    x = ad::add(x, tape.constant(std::move(noise)));
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& L = w.layers[l];
    ad::Var ln1g = bind(L.ln1_gain), ln1b = bind(L.ln1_bias), wqkv = bind(L.w_qkv), wout = bind(L.w_out);
    ad::Var ln2g = bind(L.ln2_gain), ln2b = bind(L.ln2_bias), wup = bind(L.w_up), wdown = bind(L.w_down);
    if (l > last_layer) continue;

    ad::Var a = ad::layer_norm(x, ln1g, ln1b);
    ad::Var att = ad::causal_self_attention(ad::matmul_nt(a, wqkv), cfg.n_heads, result.segments);
    x = ad::add(x, ad::matmul_nt(att, wout));
    ad::Var b = ad::layer_norm(x, ln2g, ln2b);
    ad::Var hidden = apply(ad::gelu(ad::matmul_nt(b, wup)), Site::MlpIn, l);
    ad::Var out = apply(ad::matmul_nt(hidden, wdown), Site::MlpOut, l);
    x = apply(ad::add(x, out), Site::ResidualOut, l);
    result.mlp_in.push_back(hidden);
    result.mlp_out.push_back(out);
    result.residual_out.push_back(x);
  }
  ad::Var fg = bind(w.final_gain), fb = bind(w.final_bias), unembed = bind(w.unembedding);
  if (last_layer + 1 == cfg.n_layers) {
    ad::Var h = options.logit_positions ? ad::gather_rows(x, logit_rows) : x;
    result.logits = ad::matmul_nt(ad::layer_norm(h, fg, fb), unembed);
  }
  return result;
}

// ---------------------------------------------------------------------------

ForwardRecord forward(const Transformer& model, std::span<const TokenId> tokens,
                      std::span<const InterventionSpec> interventions) {
  const ModelConfig& cfg = model.config();
  ad::Tape tape;
  GraphOptions options;
  std::vector<const InterventionSpec*> reads;
  for (const InterventionSpec& spec : interventions) {
    if (spec.position >= tokens.size()) {
      throw ValidationError("intervention position " + std::to_string(spec.position) + " >= sequence length " +
                            std::to_string(tokens.size()));
    }
    if (spec.site != Site::Embedding && spec.layer >= cfg.n_layers) {
      throw ValidationError("intervention layer " + std::to_string(spec.layer) + " >= n_layers " +
                            std::to_string(cfg.n_layers));
    }
    if (const auto* rep = std::get_if<ReplaceAction>(&spec.action)) {
      if (spec.site == Site::Embedding) throw ValidationError("replace is not supported at the embedding site");
      if (rep->value.size() != site_width(cfg, spec.site)) {
        throw ValidationError(std::string("replacement vector width ") + std::to_string(rep->value.size()) +
                              " does not match site " + site_name(spec.site));
      }
      options.patches.push_back(
          {spec.site, spec.layer, 0, spec.position, tape.constant(rep->value.reshaped({1, rep->value.size()}))});
    } else if (const auto* noise = std::get_if<NoiseAction>(&spec.action)) {
      if (spec.site != Site::Embedding) throw ValidationError("noise is only supported at the embedding site");
      options.noise.push_back({0, spec.position, noise_row(cfg.d_model, noise->stddev, noise->seed, spec.position)});
    } else {
      reads.push_back(&spec);
    }
  }

  const TokenSeq seq(tokens.begin(), tokens.end());
  GraphResult g = build_graph(tape, model, std::span<const TokenSeq>(&seq, 1), options);
  ForwardRecord record;
  record.logits = g.logits.value();
  for (const InterventionSpec* spec : reads) {
    if (spec->site == Site::Embedding) throw ValidationError("read is not supported at the embedding site");
    const auto& per_layer = spec->site == Site::ResidualOut ? g.residual_out
                            : spec->site == Site::MlpIn     ? g.mlp_in
                                                            : g.mlp_out;
    record.captured.push_back(per_layer[spec->layer].value().row(spec->position));
  }
  return record;
}

Tensor next_token_distribution(const Transformer& model, std::span<const TokenId> tokens,
                               std::span<const InterventionSpec> interventions) {
  ForwardRecord rec = forward(model, tokens, interventions);
  return ad::softmax_rows(rec.logits.row(rec.logits.rows() - 1));
}

Generation generate(const Transformer& model, std::span<const TokenId> prompt, std::size_t n_steps,
                    double temperature, std::uint64_t seed) {
  if (n_steps == 0) throw ValidationError("generate: n_steps must be >= 1");
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  const std::size_t window = model.config().max_seq_len;
  Rng rng(seed);
  TokenSeq context(prompt.begin(), prompt.end());
  Generation out;
  for (std::size_t step = 0; step < n_steps; ++step) {
    std::span<const TokenId> view(context);
    if (view.size() > window) {
      view = view.subspan(view.size() - window);
      out.truncated = true;
    }
    const Tensor probs = next_token_distribution(model, view);
    TokenId next = 0;
    if (temperature <= 0.0) {
      next = static_cast<TokenId>(std::max_element(probs.data().begin(), probs.data().end()) - probs.data().begin());
    } else {
      std::vector<double> weights(probs.size());
      double total = 0.0;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        weights[i] = std::pow(probs[i], 1.0 / temperature);
        total += weights[i];
      }
      double u = rng.uniform() * total;
      next = probs.size() - 1;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (u < weights[i]) {
          next = i;
          break;
        }
        u -= weights[i];
      }
    }
    context.push_back(next);
    out.tokens.push_back(next);
  }
  return out;
}

}  // namespace cpa
