// SPDX-License-Identifier: Apache-2.0

#include "cpa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cpa/adam.hpp"
#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

namespace {

constexpr std::size_t kMaxPrefixTokens = 3;

struct Sample {
  TokenSeq prompt;  // without prefix
  TokenId object;
};

/// A training sequence with every supervised position; targets[i] is
/// predicted from position positions[i].
struct Sequence {
  TokenSeq tokens;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

std::vector<Sample> training_samples(const FactWorld& world) {
  std::vector<Sample> out;
  for (const FactTriple& f : world.facts()) {
    for (const PromptTemplate& t : world.templates(f.relation)) {
      out.push_back({world.render_prompt(f.subject, f.relation, t).tokens, world.object_token(f.object)});
    }
  }
  return out;
}

Sequence single_fact(const Sample& s) {
  Sequence q{s.prompt, {s.prompt.size() - 1}, {s.object}};
  q.tokens.push_back(s.object);
  return q;
}

/// Subject tokens, then `n_facts` distinct relations in random order, each
/// as a random subject-first phrasing followed by its object.
Sequence biography(const FactWorld& world, std::size_t subject, std::size_t n_facts, Rng& rng) {
  std::vector<std::size_t> relations(world.relations().size());
  for (std::size_t r = 0; r < relations.size(); ++r) relations[r] = r;
  rng.shuffle(relations);
  relations.resize(std::min(n_facts, relations.size()));
  const TokenSeq name = world.subject_prompt(subject).tokens;
  Sequence q{name, {}, {}};
  for (std::size_t r : relations) {
    std::vector<PromptTemplate> forms;
    for (const PromptTemplate& t : world.templates(r)) {
      if (t.kind == TemplateKind::SubjectFirst) forms.push_back(t);
    }
    const Prompt p = world.render_prompt(subject, r, forms[rng.below(forms.size())]);
    q.tokens.insert(q.tokens.end(), p.tokens.begin() + static_cast<std::ptrdiff_t>(name.size()), p.tokens.end());
    q.positions.push_back(q.tokens.size() - 1);
    const TokenId object = world.object_token(world.object_of(subject, r));
    q.targets.push_back(object);
    q.tokens.push_back(object);
  }
  return q;
}

std::size_t longest_biography(const FactWorld& world, std::size_t n_facts) {
  std::vector<std::size_t> phrase(world.relations().size(), 0);
  std::size_t longest_name = 0;
  for (std::size_t s = 0; s < world.subjects().size(); ++s) {
    const std::size_t name = world.subject_prompt(s).tokens.size();
    longest_name = std::max(longest_name, name);
    for (std::size_t r = 0; r < phrase.size(); ++r) {
      for (const PromptTemplate& t : world.templates(r)) {
        if (t.kind != TemplateKind::SubjectFirst) continue;
        phrase[r] = std::max(phrase[r], world.render_prompt(s, r, t).tokens.size() - name);
      }
    }
  }
  std::sort(phrase.rbegin(), phrase.rend());
  std::size_t total = longest_name;
  for (std::size_t i = 0; i < std::min(n_facts, phrase.size()); ++i) total += phrase[i] + 1;
  return total;
}

std::size_t longest_prompt(const FactWorld& world) {
  std::size_t longest = 0;
  for (const FactTriple& f : world.facts()) {
    for (const PromptTemplate& t : world.templates(f.relation)) {
      longest = std::max(longest, world.render_prompt(f.subject, f.relation, t).tokens.size());
    }
  }
  return longest;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("train: epochs must be positive");
  if (batch_size == 0) throw ValidationError("train: batch_size must be positive");
  if (!(accuracy_gate > 0.0 && accuracy_gate <= 1.0)) throw ValidationError("train: accuracy gate must be in (0, 1]");
  if (!(learning_rate > 0.0)) throw ValidationError("train: learning_rate must be positive");
  if (prefix_probability < 0.0 || prefix_probability > 1.0) {
    throw ValidationError("train: prefix_probability must be in [0, 1]");
  }
  if (biographies_per_subject > 0 && biography_facts == 0) {
    throw ValidationError("train: biography_facts must be positive when biographies are enabled");
  }
}

nlohmann::json TrainReport::to_json() const {
  return {{"epoch_losses", epoch_losses},
          {"fact_accuracy", fact_accuracy},
          {"gate_passed", gate_passed},
          {"wall_seconds", wall_seconds}};
}

ModelConfig model_config_for(const FactWorld& world, ModelConfig base, const TrainConfig& train_config) {
  base.vocab_size = world.tokenizer().size();
  // Longest prompt, a full filler prefix, and the object token.
  std::size_t needed = longest_prompt(world) + 1;
  if (train_config.biographies_per_subject > 0) {
    needed = std::max(needed, longest_biography(world, train_config.biography_facts));
  }
  needed += kMaxPrefixTokens;
  if (base.max_seq_len < needed) {
    throw ValidationError("model: max_seq_len " + std::to_string(base.max_seq_len) + " is shorter than the " +
                          std::to_string(needed) + " tokens a prefixed training sequence needs");
  }
  base.validate();
  return base;
}

double fact_accuracy(const Transformer& model, const FactWorld& world) {
  const auto samples = training_samples(world);
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<TokenSeq> seqs;
    GraphOptions opt;
    opt.logit_positions.emplace();
    for (std::size_t i = start; i < end; ++i) {
      opt.logit_positions->push_back({seqs.size(), samples[i].prompt.size() - 1});
      seqs.push_back(samples[i].prompt);
    }
    ad::Tape tape;
    const GraphResult g = build_graph(tape, model, seqs, opt);
    const Tensor& logits = g.logits.value();
    for (std::size_t i = start; i < end; ++i) {
      const auto row = logits.row_span(i - start);
      const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == samples[i].object ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const FactWorld& world, const ModelConfig& model_config, const TrainConfig& train_config,
                  const EpochCallback& on_epoch) {
  train_config.validate();
  if (world.num_facts() == 0) throw ValidationError("train: world has no facts");
  const ModelConfig config = model_config_for(world, model_config, train_config);
  const auto start_time = std::chrono::steady_clock::now();

  Transformer model = Transformer::random(config);
  const auto params = model.parameters();
  AdamState adam(AdamConfig{train_config.learning_rate, train_config.weight_decay});
  Rng rng(train_config.seed);

  const auto samples = training_samples(world);
  std::vector<TokenId> filler_ids;
  for (const auto& f : world.fillers()) filler_ids.push_back(world.tokenizer().id(f));

  TrainReport report;
  for (std::size_t epoch = 0; epoch < train_config.epochs; ++epoch) {
    std::vector<Sequence> sequences;
    for (const Sample& sm : samples) sequences.push_back(single_fact(sm));
    for (std::size_t b = 0; b < train_config.biographies_per_subject; ++b) {
      for (std::size_t s = 0; s < world.subjects().size(); ++s) {
        sequences.push_back(biography(world, s, train_config.biography_facts, rng));
      }
    }
    rng.shuffle(sequences);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < sequences.size(); start += train_config.batch_size) {
      const std::size_t end = std::min(sequences.size(), start + train_config.batch_size);
      std::vector<TokenSeq> seqs;
      std::vector<std::size_t> targets;
      GraphOptions opt;
      opt.params_require_grad = true;
      opt.logit_positions.emplace();
      for (std::size_t i = start; i < end; ++i) {
        TokenSeq seq;
        if (!filler_ids.empty() && rng.uniform() < train_config.prefix_probability) {
          const std::size_t n = 1 + rng.below(kMaxPrefixTokens);
          for (std::size_t k = 0; k < n; ++k) seq.push_back(filler_ids[rng.below(filler_ids.size())]);
        }
        const std::size_t offset = seq.size();
        const Sequence& q = sequences[i];
        seq.insert(seq.end(), q.tokens.begin(), q.tokens.end());
        for (std::size_t k = 0; k < q.positions.size(); ++k) {
          opt.logit_positions->push_back({seqs.size(), offset + q.positions[k]});
          targets.push_back(q.targets[k]);
        }
        seqs.push_back(std::move(seq));
      }
      ad::Tape tape;
      double loss_value = 0.0;
      std::vector<Tensor> grads;
      try {
        const GraphResult g = build_graph(tape, model, seqs, opt);
        ad::Var loss = ad::cross_entropy(g.logits, targets);
        loss_value = loss.value().item();
        tape.backward(loss);
        for (const ad::Var& p : g.params) grads.push_back(tape.grad(p));
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }
      adam.step(params, grads);
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ": loss is not finite");
    }
    report.epoch_losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }

  report.fact_accuracy = fact_accuracy(model, world);
  report.gate_passed = report.fact_accuracy >= train_config.accuracy_gate;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return {std::move(model), std::move(report)};
}

}  // namespace cpa
