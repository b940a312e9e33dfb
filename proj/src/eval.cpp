// SPDX-License-Identifier: Apache-2.0

#include "cpa/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cpa/checkpoint.hpp"
#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

namespace {

/// Final-position probabilities for a batch of prompts.
std::vector<Tensor> final_distributions(const Transformer& model, const std::vector<TokenSeq>& seqs) {
  std::vector<Tensor> out;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < seqs.size(); start += kChunk) {
    const std::size_t end = std::min(seqs.size(), start + kChunk);
    std::vector<TokenSeq> chunk(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                seqs.begin() + static_cast<std::ptrdiff_t>(end));
    GraphOptions opt;
    opt.logit_positions.emplace();
    for (std::size_t i = 0; i < chunk.size(); ++i) opt.logit_positions->push_back({i, chunk[i].size() - 1});
    ad::Tape tape;
    const GraphResult g = build_graph(tape, model, chunk, opt);
    const Tensor probs = ad::softmax_rows(g.logits.value());
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(probs.row(i));
  }
  return out;
}

TokenId argmax(const Tensor& probs) {
  return static_cast<TokenId>(std::max_element(probs.data().begin(), probs.data().end()) - probs.data().begin());
}

std::optional<double> mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

std::optional<double> MetricRecord::get(const std::string& metric) const {
  auto it = values.find(metric);
  if (it == values.end()) return std::nullopt;
  return it->second;
}

double bigram_entropy(std::span<const TokenId> tokens) {
  if (tokens.size() < 2) return 0.0;
  std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) ++counts[{tokens[i], tokens[i + 1]}];
  const double total = static_cast<double>(tokens.size() - 1);
  double h = 0.0;
  for (const auto& [pair, n] : counts) {
    const double p = static_cast<double>(n) / total;
    h -= p * std::log2(p);
  }
  return h;
}

MetricRecord evaluate_edit(const Transformer& pre, const Transformer& post, const FactWorld& world,
                           const EditRequest& request, std::uint64_t fluency_seed, const FluencyConfig& fluency) {
  if (!(pre.config() == post.config())) throw ValidationError("evaluate: models have different configs");
  MetricRecord rec;
  rec.edit_id = request.id;

  const TokenId new_tok = request.new_object_token;
  const TokenId old_tok = world.object_token(request.fact.object);

  // One batch per model: rewrite, paraphrases, neighborhood, relation probes.
  std::vector<TokenSeq> seqs{request.rewrite.tokens};
  for (const Prompt& p : request.paraphrases) seqs.push_back(p.tokens);
  for (const Probe& p : request.neighborhood) seqs.push_back(p.prompt.tokens);
  for (const Probe& p : request.relation_probes) seqs.push_back(p.prompt.tokens);
  const auto before = final_distributions(pre, seqs);
  const auto after = final_distributions(post, seqs);

  std::size_t at = 0;
  rec.values["efficacy"] = after[at][new_tok] > after[at][old_tok] ? 1.0 : 0.0;
  rec.values["efficacy_argmax"] = argmax(after[at]) == new_tok ? 1.0 : 0.0;
  ++at;

  std::vector<double> gen;
  for (std::size_t i = 0; i < request.paraphrases.size(); ++i, ++at) {
    gen.push_back(after[at][new_tok] > after[at][old_tok] ? 1.0 : 0.0);
  }
  if (auto m = mean_of(gen)) rec.values["generalization"] = *m;

  // Probes the unedited model gets wrong measure pretraining error, not
  // editing damage, and are left out.
  std::vector<double> s_spec;
  for (const Probe& p : request.neighborhood) {
    const TokenId truth = world.object_token(p.true_object);
    if (argmax(before[at]) == truth) s_spec.push_back(after[at][new_tok] < after[at][truth] ? 1.0 : 0.0);
    ++at;
  }
  if (auto m = mean_of(s_spec)) rec.values["s_spec"] = *m;

  std::vector<double> r_spec, dp, cap;
  for (const Probe& p : request.relation_probes) {
    const TokenId truth = world.object_token(p.true_object);
    if (argmax(before[at]) == truth) {
      r_spec.push_back(after[at][new_tok] < after[at][truth] ? 1.0 : 0.0);
      dp.push_back(argmax(after[at]) != argmax(before[at]) ? 1.0 : 0.0);
      cap.push_back(after[at][truth]);
    }
    ++at;
  }
  if (auto m = mean_of(r_spec)) rec.values["r_spec"] = *m;
  if (auto m = mean_of(dp)) rec.values["dp"] = *m;
  if (auto m = mean_of(cap)) rec.values["cap"] = *m;

  if (fluency.samples > 0 && fluency.tokens > 0) {
    const TokenSeq prompt = world.subject_prompt(request.fact.subject).tokens;
    std::vector<double> entropies;
    for (std::size_t k = 0; k < fluency.samples; ++k) {
      const Generation g = generate(post, prompt, fluency.tokens, fluency.temperature, mix_seed(fluency_seed, k));
      entropies.push_back(bigram_entropy(g.tokens));
    }
    rec.values["fluency"] = *mean_of(entropies);
  }
  return rec;
}

nlohmann::json Report::to_json() const {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, s] : metrics) {
    m[name] = {{"mean", s.mean}, {"std", s.std ? nlohmann::json(*s.std) : nlohmann::json(nullptr)}, {"n", s.count}};
  }
  return {{"method", method},     {"metrics", m},          {"n_edits", n_edits},
          {"n_seeds", n_seeds},   {"failures", failures},  {"config_hash", config_hash},
          {"world_hash", world_hash}, {"model_hash", model_hash}};
}

Report aggregate(const std::string& method, const std::vector<MetricRecord>& records,
                 const std::vector<std::uint64_t>& seeds) {
  Report report;
  report.method = method;
  report.n_seeds = seeds.size();
  for (const std::uint64_t seed : seeds) {
    for (const MetricRecord& r : records) report.n_edits += (r.method == method && r.seed == seed) ? 1 : 0;
  }
  for (const char* metric : kMetricNames) {
    std::vector<double> seed_means;
    std::size_t count = 0;
    for (const std::uint64_t seed : seeds) {
      std::vector<double> xs;
      for (const MetricRecord& r : records) {
        if (r.method != method || r.seed != seed) continue;
        if (auto v = r.get(metric)) xs.push_back(*v);
      }
      count += xs.size();
      if (auto m = mean_of(xs)) seed_means.push_back(*m);
    }
    if (seed_means.empty()) continue;
    MetricSummary s;
    s.count = count;
    s.mean = *mean_of(seed_means);
    if (seed_means.size() >= 2) {
      double ss = 0.0;
      for (double x : seed_means) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(seed_means.size() - 1));
    }
    report.metrics[metric] = s;
  }
  return report;
}

std::vector<EditRequest> draw_edits(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                                    std::uint64_t seed) {
  EditRequestStream stream(world, seed);
  std::vector<EditRequest> out;
  while (out.size() < n_edits) {
    std::optional<EditRequest> req = stream.next();
    if (!req) break;
    const Tensor probs = next_token_distribution(model, req->rewrite.tokens);
    if (argmax(probs) == world.object_token(req->fact.object)) out.push_back(std::move(*req));
  }
  return out;
}

ExperimentResult run_experiment(const Transformer& model, const FactWorld& world,
                                const std::vector<EditMethod>& methods, std::size_t n_edits,
                                const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                                const ExperimentOptions& options) {
  if (methods.empty()) throw ValidationError("experiment: no methods");
  if (seeds.empty()) throw ValidationError("experiment: no seeds");
  if (n_edits == 0) throw ValidationError("experiment: n_edits must be positive");
  hp.validate(model.config());

  CovarianceCache covariances(model, world, hp);
  ExperimentResult result;
  for (const std::uint64_t seed : seeds) {
    const std::vector<EditRequest> edits = draw_edits(model, world, n_edits, seed);
    for (const EditRequest& request : edits) {
      for (const EditMethod method : methods) {
        const auto start = std::chrono::steady_clock::now();
        try {
          EditResult edited = edit(model, request, method, hp, covariances);
          MetricRecord rec = evaluate_edit(model, edited.model, world, request, mix_seed(seed, request.id),
                                           options.fluency);
          rec.method = method_name(method);
          rec.seed = seed;
          rec.wall_ms = elapsed_ms(start);
          if (options.observer) options.observer(seed, request, method, edited.model, edited.outcome);
          result.records.push_back(std::move(rec));
        } catch (const std::exception& e) {
          result.failures.push_back({seed, request.id, method_name(method), e.what()});
        }
      }
    }
  }

  const std::string world_hash = world.hash();
  const std::string model_hash = model_checksum(model);
  for (const EditMethod method : methods) {
    Report r = aggregate(method_name(method), result.records, seeds);
    r.world_hash = world_hash;
    r.model_hash = model_hash;
    r.config_hash = options.config_hash;
    for (const EditFailure& f : result.failures) r.failures += f.method == r.method ? 1 : 0;
    result.reports.push_back(std::move(r));
  }
  return result;
}

ExperimentResult ablation_suite(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                                const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                                const ExperimentOptions& options) {
  return run_experiment(model, world, {EditMethod::Phase1Only, EditMethod::Phase2Only, EditMethod::Cpa}, n_edits,
                        seeds, hp, options);
}

SweepResult anchor_layer_sweep(const Transformer& model, const FactWorld& world,
                               const std::vector<std::size_t>& anchor_layers, std::size_t n_edits,
                               const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                               const ExperimentOptions& options) {
  SweepResult sweep;
  for (const std::size_t layer : anchor_layers) {
    if (layer <= hp.edit_layer || layer >= model.config().n_layers) {
      sweep.notices.push_back("anchor layer " + std::to_string(layer) + " skipped: must lie in (" +
                              std::to_string(hp.edit_layer) + ", " + std::to_string(model.config().n_layers) + ")");
      continue;
    }
    EditHyperparams at = hp;
    at.anchor_layer = layer;
    sweep.layers.push_back(layer);
    sweep.per_layer.push_back(run_experiment(model, world, {EditMethod::Cpa}, n_edits, seeds, at, options));
  }
  return sweep;
}

std::vector<LossCurves> phase_loss_dynamics(const Transformer& model, const FactWorld& world,
                                            const std::vector<std::size_t>& anchor_layers, std::size_t n_edits,
                                            std::uint64_t seed, const EditHyperparams& hp) {
  if (n_edits < 10) throw ValidationError("loss dynamics: n_edits must be at least 10");
  const std::vector<EditRequest> edits = draw_edits(model, world, n_edits, seed);
  std::vector<LossCurves> out;
  auto accumulate = [](std::array<double, kDynamicsEpochs>& sum, const std::vector<double>& losses) {
    for (std::size_t e = 0; e < kDynamicsEpochs; ++e) sum[e] += losses[std::min(e, losses.size() - 1)];
  };
  for (const std::size_t layer : anchor_layers) {
    EditHyperparams at = hp;
    at.anchor_layer = layer;
    at.validate(model.config());
    LossCurves curves;
    curves.anchor_layer = layer;
    for (const EditRequest& request : edits) {
      const AnchorResult anchor = phase1_relation_anchoring(model, request, at);
      const TargetResult target = phase2_trajectory_alignment(model, request, anchor.anchor, at);
      accumulate(curves.anchor, anchor.trace.losses);
      accumulate(curves.trajectory, target.trace.losses);
      ++curves.n_edits;
    }
    if (curves.n_edits == 0) throw ValidationError("loss dynamics: no usable edits");
    for (std::size_t e = 0; e < kDynamicsEpochs; ++e) {
      curves.anchor[e] /= static_cast<double>(curves.n_edits);
      curves.trajectory[e] /= static_cast<double>(curves.n_edits);
    }
    out.push_back(curves);
  }
  return out;
}

}  // namespace cpa
