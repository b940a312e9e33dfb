// SPDX-License-Identifier: Apache-2.0

#include "cpa/editor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "cpa/adam.hpp"
#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

constexpr double kDegenerateKey = 1e-12;

/// Clean activations of the prefixed rewrites, one row per prompt, followed
/// by a subject-only prompt that anchors the KL term. Its final position is
/// both its last subject token and its prediction slot.
struct CleanRun {
  std::size_t n_rewrites = 0;
  std::vector<TokenSeq> seqs;
  std::vector<std::size_t> subject_pos;
  std::vector<std::size_t> relation_pos;
  Tensor essence_logits;  // clean final-position logits of the subject-only prompt
  std::map<std::pair<Site, std::size_t>, std::vector<Tensor>> rows;
};

CleanRun clean_run(const Transformer& model, const EditRequest& request,
                   std::vector<std::pair<Site, std::size_t>> sites, bool need_relation) {
  CleanRun run;
  const std::vector<Prompt> prompts = request.prefixed_rewrites();
  if (prompts.empty()) throw ValidationError("edit request has no prompts");
  for (const Prompt& p : prompts) {
    run.seqs.push_back(p.tokens);
    run.subject_pos.push_back(p.last_subject());
    if (need_relation) run.relation_pos.push_back(p.last_relation());
  }
  run.n_rewrites = prompts.size();
  const std::size_t subject_end = request.rewrite.last_subject();
  run.seqs.emplace_back(request.rewrite.tokens.begin(),
                        request.rewrite.tokens.begin() + static_cast<std::ptrdiff_t>(subject_end + 1));
  run.subject_pos.push_back(subject_end);
  if (need_relation) run.relation_pos.push_back(subject_end);

  ad::Tape tape;
  GraphOptions opt;
  opt.logit_positions.emplace();
  opt.logit_positions->push_back({run.n_rewrites, subject_end});
  const GraphResult g = build_graph(tape, model, run.seqs, opt);
  run.essence_logits = g.logits.value();
  for (const auto& [site, layer] : sites) {
    const auto& per_layer = site == Site::ResidualOut ? g.residual_out : site == Site::MlpIn ? g.mlp_in : g.mlp_out;
    const bool at_subject = site != Site::ResidualOut;
    auto& out = run.rows[{site, layer}];
    for (std::size_t i = 0; i < run.seqs.size(); ++i) {
      const std::size_t pos = at_subject ? run.subject_pos[i] : run.relation_pos[i];
      out.push_back(per_layer[layer].value().row(g.row(i, pos)));
    }
  }
  return run;
}

Tensor mean_rows(const std::vector<Tensor>& rows, std::size_t count) {
  Tensor out = Tensor::zeros_like(rows.front());
  for (std::size_t i = 0; i < count; ++i) out += rows[i];
  out *= 1.0 / static_cast<double>(count);
  return out;
}

/// Adam on an additive offset that starts at zero. The decay term
/// weight_decay * |offset| / |reference|^2 is added to the loss and keeps the
/// offset small relative to the clean activation it shifts.
template <typename LossFn>
PhaseTrace optimize_offset(Tensor& offset, const Tensor& reference, double threshold, const EditHyperparams& hp,
                           const std::string& phase, LossFn loss_fn) {
  const double ref_sq = std::max(dot(reference.data(), reference.data()), 1e-12);
  AdamState adam(AdamConfig{hp.learning_rate});
  PhaseTrace trace;
  for (std::size_t epoch = 0;; ++epoch) {
    ad::Tape tape;
    ad::Var off = tape.leaf(offset);
    ad::Var loss;
    double value = 0.0;
    try {
      loss = loss_fn(tape, off);
      if (hp.weight_decay > 0.0) loss = ad::add(loss, ad::scale(ad::frobenius_norm(off), hp.weight_decay / ref_sq));
      value = loss.value().item();
    } catch (const NumericError& e) {
      throw NumericError(phase + ": epoch " + std::to_string(epoch) + ": " + e.what());
    }
    if (!std::isfinite(value)) throw NumericError(phase + ": loss is not finite at epoch " + std::to_string(epoch));
    trace.losses.push_back(value);
    if (value < threshold) {
      trace.converged = true;
      break;
    }
    if (epoch == hp.max_epochs) break;
    try {
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError(phase + ": epoch " + std::to_string(epoch) + ": " + e.what());
    }
    adam.step(offset, tape.grad(off));
    ++trace.steps;
  }
  return trace;
}

/// Negative log-likelihood of the new object over the rewrites plus the
/// weighted KL of the subject-only prompt against its clean distribution.
ad::Var target_loss(ad::Tape& tape, const Transformer& model, const CleanRun& run, std::vector<GraphPatch> patches,
                    TokenId new_object, double kl_weight, GraphResult* graph = nullptr) {
  GraphOptions opt;
  opt.patches = std::move(patches);
  opt.params_require_grad = graph != nullptr;
  opt.logit_positions.emplace();
  for (std::size_t i = 0; i < run.seqs.size(); ++i) opt.logit_positions->push_back({i, run.seqs[i].size() - 1});
  GraphResult local;
  GraphResult& g = graph ? *graph : local;
  g = build_graph(tape, model, run.seqs, opt);
  std::vector<std::size_t> rewrite_rows(run.n_rewrites);
  for (std::size_t i = 0; i < run.n_rewrites; ++i) rewrite_rows[i] = i;
  const std::vector<std::size_t> targets(run.n_rewrites, new_object);
  ad::Var nll = ad::cross_entropy(ad::gather_rows(g.logits, rewrite_rows), targets);
  if (kl_weight == 0.0) return nll;
  const std::size_t essence = run.n_rewrites;
  ad::Var current = ad::gather_rows(g.logits, std::span<const std::size_t>(&essence, 1));
  ad::Var kl = ad::kl_divergence(current, tape.constant(run.essence_logits));
  return ad::add(nll, ad::scale(kl, kl_weight));
}

/// One shared replacement, base + offset, at `positions[i]` of every sequence.
std::vector<GraphPatch> replacement_patches(ad::Tape& tape, Site site, std::size_t layer, const Tensor& base,
                                            const std::vector<std::size_t>& positions, ad::Var offset) {
  const ad::Var value = ad::add(tape.constant(base), offset);
  std::vector<GraphPatch> patches;
  for (std::size_t i = 0; i < positions.size(); ++i) patches.push_back({site, layer, i, positions[i], value});
  return patches;
}

template <typename Fn>
auto stage(const char* label, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(label) + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(std::string(label) + ": " + e.what());
  }
}

nlohmann::json trace_json(const PhaseTrace& t) {
  return {{"losses", t.losses}, {"converged", t.converged}, {"steps", t.steps}};
}

}  // namespace

// ---------------------------------------------------------------------------

void EditHyperparams::validate(const ModelConfig& config) const {
  if (edit_layer >= config.n_layers) throw ValidationError("edit: edit layer must be below n_layers");
  if (anchor_layer <= edit_layer) throw ValidationError("edit: anchor layer must be deeper than the edit layer");
  if (anchor_layer >= config.n_layers) throw ValidationError("edit: anchor layer must be below n_layers");
  if (!(target_threshold > 0.0) || !(trajectory_threshold > 0.0)) {
    throw ValidationError("edit: loss thresholds must be positive");
  }
  if (max_epochs == 0) throw ValidationError("edit: max_epochs must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("edit: learning_rate must be positive");
  if (weight_decay < 0.0 || kl_weight < 0.0) throw ValidationError("edit: weights must be non-negative");
  if (!(trajectory_weight > 0.0)) throw ValidationError("edit: trajectory_weight must be positive");
  if (covariance_samples == 0) throw ValidationError("edit: covariance_samples must be positive");
  if (!(covariance_ridge > 0.0)) throw ValidationError("edit: covariance_ridge must be positive");
}

nlohmann::json EditHyperparams::to_json() const {
  return {{"edit_layer", edit_layer},
          {"anchor_layer", anchor_layer},
          {"kl_weight", kl_weight},
          {"trajectory_weight", trajectory_weight},
          {"target_threshold", target_threshold},
          {"trajectory_threshold", trajectory_threshold},
          {"max_epochs", max_epochs},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"covariance_samples", covariance_samples},
          {"covariance_ridge", covariance_ridge},
          {"covariance_seed", covariance_seed}};
}

const char* method_name(EditMethod method) {
  switch (method) {
    case EditMethod::Baseline: return "baseline";
    case EditMethod::Cpa: return "cpa";
    case EditMethod::Phase1Only: return "phase1_only";
    case EditMethod::Phase2Only: return "phase2_only";
  }
  return "?";
}

EditMethod method_from_name(const std::string& name) {
  for (EditMethod m : {EditMethod::Baseline, EditMethod::Cpa, EditMethod::Phase1Only, EditMethod::Phase2Only}) {
    if (name == method_name(m)) return m;
  }
  throw ValidationError("unknown edit method '" + name + "'");
}

nlohmann::json EditOutcome::to_json() const {
  nlohmann::json j;
  j["method"] = method_name(method);
  j["layer"] = layer;
  j["key_norm"] = l2_norm(key.data());
  j["value_norm"] = l2_norm(value.data());
  j["old_value_norm"] = l2_norm(old_value.data());
  j["delta_norm"] = l2_norm(delta.data());
  if (anchor) {
    j["anchor"] = {{"layer", anchor->layer},
                   {"position", anchor->position},
                   {"original_norm", l2_norm(anchor->original.data())},
                   {"offset_norm", l2_norm(anchor->offset.data())}};
  }
  nlohmann::json phases = nlohmann::json::object();
  for (const auto& [name, trace] : this->phases) phases[name] = trace_json(trace);
  j["phases"] = std::move(phases);
  return j;
}

// ---------------------------------------------------------------------------

Tensor compute_key(const Transformer& model, const EditRequest& request, std::size_t layer) {
  if (layer >= model.config().n_layers) throw ValidationError("compute_key: layer out of range");
  const CleanRun run = clean_run(model, request, {{Site::MlpIn, layer}}, false);
  return mean_rows(run.rows.at({Site::MlpIn, layer}), run.n_rewrites);
}

Tensor estimate_covariance(const Transformer& model, const FactWorld& world, std::size_t layer,
                           std::size_t n_samples, double ridge, std::uint64_t seed) {
  if (layer >= model.config().n_layers) throw ValidationError("covariance: layer out of range");
  if (n_samples == 0) throw ValidationError("covariance: n_samples must be positive");
  if (!(ridge > 0.0)) throw ValidationError("covariance: ridge must be positive");

  Rng rng(seed);
  std::vector<TokenId> fillers;
  for (const auto& f : world.fillers()) fillers.push_back(world.tokenizer().id(f));
  std::vector<TokenSeq> pool;
  for (const FactTriple& f : world.facts()) {
    for (const PromptTemplate& t : world.templates(f.relation)) {
      TokenSeq seq;
      if (!fillers.empty() && rng.uniform() < 0.5) {
        const std::size_t n = 1 + rng.below(3);
        for (std::size_t k = 0; k < n; ++k) seq.push_back(fillers[rng.below(fillers.size())]);
      }
      const Prompt p = world.render_prompt(f.subject, f.relation, t);
      seq.insert(seq.end(), p.tokens.begin(), p.tokens.end());
      if (seq.size() <= model.config().max_seq_len) pool.push_back(std::move(seq));
    }
  }
  rng.shuffle(pool);

  const std::size_t width = model.config().d_mlp;
  RowMatrix second = RowMatrix::Zero(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(width));
  std::size_t taken = 0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < pool.size() && taken < n_samples; start += kChunk) {
    const std::size_t end = std::min(pool.size(), start + kChunk);
    std::vector<TokenSeq> chunk(pool.begin() + static_cast<std::ptrdiff_t>(start),
                                pool.begin() + static_cast<std::ptrdiff_t>(end));
    ad::Tape tape;
    GraphOptions opt;
    opt.last_layer = layer;
    const GraphResult g = build_graph(tape, model, chunk, opt);
    const Tensor& keys = g.mlp_in[layer].value();
    if (!keys.all_finite()) throw NumericError("covariance: non-finite MLP activations at layer " + std::to_string(layer));
    const std::size_t use = std::min(keys.rows(), n_samples - taken);
    ConstMap k(keys.data().data(), static_cast<Eigen::Index>(use), static_cast<Eigen::Index>(width));
    second.noalias() += k.transpose() * k;
    taken += use;
  }
  if (taken == 0) throw ValidationError("covariance: world has no prompts");
  second /= static_cast<double>(taken);
  second.diagonal().array() += ridge;
  // Symmetrize exactly; the product above is symmetric only up to rounding.
  const RowMatrix sym = 0.5 * (second + second.transpose());
  Tensor out({width, width});
  std::copy(sym.data(), sym.data() + sym.size(), out.data().begin());
  return out;
}

CovarianceCache::CovarianceCache(const Transformer& model, const FactWorld& world, const EditHyperparams& hp)
    : model_(model), world_(world), samples_(hp.covariance_samples), ridge_(hp.covariance_ridge),
      seed_(hp.covariance_seed) {}

const Tensor& CovarianceCache::at(std::size_t layer) {
  auto it = cache_.find(layer);
  if (it == cache_.end()) {
    it = cache_.emplace(layer, estimate_covariance(model_, world_, layer, samples_, ridge_, seed_)).first;
  }
  return it->second;
}

RankOneResult rank_one_update(const Tensor& w, const Tensor& key, const Tensor& value, const Tensor& covariance) {
  if (w.rank() != 2) throw ValidationError("rank-one update: W must be a matrix");
  const std::size_t out = w.rows(), in = w.cols();
  if (key.size() != in) throw ValidationError("rank-one update: key width does not match W");
  if (value.size() != out) throw ValidationError("rank-one update: value width does not match W");
  if (covariance.rank() != 2 || covariance.rows() != in || covariance.cols() != in) {
    throw ValidationError("rank-one update: covariance must be key width x key width");
  }
  const auto n_in = static_cast<Eigen::Index>(in), n_out = static_cast<Eigen::Index>(out);
  ConstMap c(covariance.data().data(), n_in, n_in);
  ConstMap wm(w.data().data(), n_out, n_in);
  ConstVecMap k(key.data().data(), n_in);
  ConstVecMap v(value.data().data(), n_out);

  const Eigen::LLT<RowMatrix> llt(c);
  if (llt.info() != Eigen::Success) throw ValidationError("rank-one update: covariance is not positive definite");
  const Eigen::VectorXd u = llt.solve(k);
  const double denom = k.dot(u);
  if (!(denom >= kDegenerateKey)) throw ValidationError("rank-one update: degenerate key (k^T C^-1 k below 1e-12)");
  const Eigen::VectorXd residual = v - wm * k;
  const RowMatrix delta = residual * (u / denom).transpose();

  RankOneResult result{w, Tensor({out, in})};
  std::copy(delta.data(), delta.data() + delta.size(), result.delta.data().begin());
  result.updated += result.delta;
  return result;
}

TargetObjective target_objective(ad::Tape& tape, const Transformer& model, const EditRequest& request,
                                 const EditHyperparams& hp, const std::optional<Tensor>& value) {
  hp.validate(model.config());
  const std::size_t layer = hp.edit_layer;
  const CleanRun run = clean_run(model, request, {{Site::MlpOut, layer}}, false);
  const auto& clean = run.rows.at({Site::MlpOut, layer});
  const Tensor base = mean_rows(clean, run.n_rewrites);
  Tensor offset = Tensor::zeros_like(base);
  if (value) {
    if (value->size() != offset.size()) throw ValidationError("target objective: value width does not match d_model");
    for (std::size_t c = 0; c < offset.size(); ++c) offset[c] = (*value)[c] - base[c];
  }
  TargetObjective out;
  ad::Var off = tape.constant(offset);
  out.loss = target_loss(tape, model, run, replacement_patches(tape, Site::MlpOut, layer, base, run.subject_pos, off),
                         request.new_object_token, hp.kl_weight, &out.graph);
  return out;
}

TargetResult optimize_target_baseline(const Transformer& model, const EditRequest& request,
                                      const EditHyperparams& hp) {
  hp.validate(model.config());
  const std::size_t layer = hp.edit_layer;
  const CleanRun run = clean_run(model, request, {{Site::MlpOut, layer}}, false);
  const auto& clean = run.rows.at({Site::MlpOut, layer});
  const TokenId new_object = request.new_object_token;

  TargetResult result;
  result.old_value = mean_rows(clean, run.n_rewrites);
  Tensor offset = Tensor::zeros_like(result.old_value);
  result.trace = optimize_offset(offset, result.old_value, hp.target_threshold, hp, "target optimization",
                                 [&](ad::Tape& tape, ad::Var off) {
                                   return target_loss(tape, model, run,
                                                      replacement_patches(tape, Site::MlpOut, layer,
                                                                          result.old_value, run.subject_pos, off),
                                                      new_object, hp.kl_weight);
                                 });
  result.value = result.old_value + offset;
  return result;
}

AnchorResult phase1_relation_anchoring(const Transformer& model, const EditRequest& request,
                                       const EditHyperparams& hp) {
  hp.validate(model.config());
  const std::size_t layer = hp.anchor_layer;
  const CleanRun run = clean_run(model, request, {{Site::ResidualOut, layer}}, true);
  const auto& clean = run.rows.at({Site::ResidualOut, layer});
  const TokenId new_object = request.new_object_token;

  AnchorResult result;
  result.anchor.layer = layer;
  result.anchor.position = run.relation_pos[0];
  result.anchor.original = clean[0];
  Tensor offset = Tensor::zeros_like(clean[0]);
  result.trace = optimize_offset(offset, clean[0], hp.target_threshold, hp, "relation anchoring",
                                 [&](ad::Tape& tape, ad::Var off) {
                                   return target_loss(tape, model, run,
                                                      replacement_patches(tape, Site::ResidualOut, layer,
                                                                          clean[0], run.relation_pos, off),
                                                      new_object, hp.kl_weight);
                                 });
  result.anchor.offset = offset;
  result.anchor.optimized = clean[0] + offset;
  return result;
}

TargetResult phase2_trajectory_alignment(const Transformer& model, const EditRequest& request,
                                         const AnchorSpec& anchor, const EditHyperparams& hp) {
  hp.validate(model.config());
  const std::size_t d = model.config().d_model;
  if (anchor.optimized.size() != d) {
    throw ValidationError("trajectory alignment: anchor width does not match d_model");
  }
  if (anchor.layer <= hp.edit_layer || anchor.layer >= model.config().n_layers) {
    throw ValidationError("trajectory alignment: anchor layer must lie between the edit layer and the top");
  }
  const std::size_t layer = hp.edit_layer;
  const CleanRun run = clean_run(model, request, {{Site::MlpOut, layer}}, true);
  const auto& clean = run.rows.at({Site::MlpOut, layer});

  // Every prefixed rewrite should reach the same optimized anchor.
  Tensor targets({run.n_rewrites, d});
  for (std::size_t i = 0; i < run.n_rewrites; ++i) {
    for (std::size_t c = 0; c < d; ++c) targets(i, c) = anchor.optimized[c];
  }
  TargetResult result;
  result.old_value = mean_rows(clean, run.n_rewrites);
  Tensor offset = Tensor::zeros_like(result.old_value);
  result.trace = optimize_offset(
      offset, result.old_value, hp.trajectory_threshold, hp, "trajectory alignment", [&](ad::Tape& tape, ad::Var off) {
        GraphOptions opt;
        opt.patches = replacement_patches(tape, Site::MlpOut, layer, result.old_value, run.subject_pos, off);
        opt.last_layer = anchor.layer;
        const GraphResult g = build_graph(tape, model, run.seqs, opt);
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < run.n_rewrites; ++i) rows.push_back(g.row(i, run.relation_pos[i]));
        ad::Var reached = ad::gather_rows(g.residual_out[anchor.layer], rows);
        return ad::scale(ad::frobenius_norm(ad::sub(reached, tape.constant(targets))), hp.trajectory_weight);
      });
  result.value = result.old_value + offset;
  return result;
}

EditResult edit(const Transformer& model, const EditRequest& request, EditMethod method, const EditHyperparams& hp,
                CovarianceCache& covariances) {
  hp.validate(model.config());
  EditOutcome outcome;
  outcome.method = method;

  switch (method) {
    case EditMethod::Baseline:
    case EditMethod::Phase2Only: {
      TargetResult target = stage("target optimization", [&] { return optimize_target_baseline(model, request, hp); });
      outcome.layer = hp.edit_layer;
      outcome.key = stage("key", [&] { return compute_key(model, request, hp.edit_layer); });
      outcome.old_value = std::move(target.old_value);
      outcome.value = std::move(target.value);
      outcome.phases["target"] = std::move(target.trace);
      break;
    }
    case EditMethod::Cpa: {
      AnchorResult anchor = stage("relation anchoring", [&] { return phase1_relation_anchoring(model, request, hp); });
      TargetResult target =
          stage("trajectory alignment", [&] { return phase2_trajectory_alignment(model, request, anchor.anchor, hp); });
      outcome.layer = hp.edit_layer;
      outcome.key = stage("key", [&] { return compute_key(model, request, hp.edit_layer); });
      outcome.old_value = std::move(target.old_value);
      outcome.value = std::move(target.value);
      outcome.anchor = std::move(anchor.anchor);
      outcome.phases["anchor"] = std::move(anchor.trace);
      outcome.phases["trajectory"] = std::move(target.trace);
      break;
    }
    case EditMethod::Phase1Only: {
      // Without trajectory alignment the anchor itself is written: the key
      // and value are the anchor layer's MLP activations at the last
      // relation token, with the value shifted by the anchor offset.
      AnchorResult anchor = stage("relation anchoring", [&] { return phase1_relation_anchoring(model, request, hp); });
      const std::size_t layer = hp.anchor_layer;
      const CleanRun run = stage("key", [&] { return clean_run(model, request, {}, true); });
      ad::Tape tape;
      const GraphResult g = build_graph(tape, model, run.seqs, GraphOptions{});
      std::vector<Tensor> keys, values;
      for (std::size_t i = 0; i < run.n_rewrites; ++i) {
        keys.push_back(g.mlp_in[layer].value().row(g.row(i, run.relation_pos[i])));
        values.push_back(g.mlp_out[layer].value().row(g.row(i, run.relation_pos[i])));
      }
      outcome.layer = layer;
      outcome.key = mean_rows(keys, keys.size());
      outcome.old_value = mean_rows(values, values.size());
      outcome.value = outcome.old_value + anchor.anchor.offset;
      outcome.anchor = std::move(anchor.anchor);
      outcome.phases["anchor"] = std::move(anchor.trace);
      break;
    }
  }

  RankOneResult update = stage("rank-one update", [&] {
    return rank_one_update(model.weights().layers[outcome.layer].w_down, outcome.key, outcome.value,
                           covariances.at(outcome.layer));
  });
  Transformer edited = model;
  edited.weights().layers[outcome.layer].w_down = std::move(update.updated);
  outcome.delta = std::move(update.delta);
  return {std::move(edited), std::move(outcome)};
}

}  // namespace cpa
