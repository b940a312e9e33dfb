// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "cpa/error.hpp"
#include "cpa/interp.hpp"
#include "cpa/studies.hpp"
#include "fixtures.hpp"

using namespace cpa;
using namespace cpa::testing;

namespace {

TraceGrid grid_with(double value, std::vector<PositionTag> tags, std::size_t layers = 2) {
  TraceGrid g;
  g.ie = Tensor({layers, tags.size()}, value);
  g.tags = std::move(tags);
  return g;
}

}  // namespace

TEST_CASE("indirect effect arithmetic") {
  CHECK(indirect_effect(0.9, 0.1) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(indirect_effect(0.3, 0.3) == 0.0);
}

TEST_CASE("RIE: identical grids give zero, log ratio, clamp") {
  const std::vector<PositionTag> tags = {PositionTag::LastSubject, PositionTag::LastRelation};
  const TraceGrid pre = grid_with(0.2, tags);
  CHECK(rie(pre, pre).per_layer == Tensor({2, 2}, 0.0));
  const RieGrid r = rie(pre, grid_with(0.8, tags));
  CHECK(r.per_layer(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(r.max_rie.size() == 2);
  const RieGrid clamped = rie(grid_with(0.0, tags), grid_with(0.5, tags));
  CHECK(std::isfinite(clamped.max_rie[0]));
  CHECK(clamped.max_rie[0] == doctest::Approx(std::log(0.5 / kIeFloor)));
  const RieGrid negative = rie(grid_with(-0.3, tags), grid_with(-0.1, tags));
  CHECK(negative.max_rie[0] == 0.0);
}

TEST_CASE("RIE rejects grids with different structure") {
  const TraceGrid a = grid_with(0.1, {PositionTag::LastSubject, PositionTag::LastRelation});
  CHECK_THROWS_AS(rie(a, grid_with(0.1, {PositionTag::LastSubject})), ValidationError);
  CHECK_THROWS_AS(rie(a, grid_with(0.1, {PositionTag::LastRelation, PositionTag::LastSubject})), ValidationError);
  CHECK_THROWS_AS(rie(a, grid_with(0.1, {PositionTag::LastSubject, PositionTag::LastRelation}, 3)), ValidationError);
}

TEST_CASE("column max and per-tag max") {
  Tensor g = Tensor::matrix(2, 3, {1, 5, 2, 4, 0, 3});
  CHECK(column_max(g) == std::vector<double>{4, 5, 3});
  const std::vector<double> v = {4, 5, 3};
  const std::vector<PositionTag> tags = {PositionTag::FirstSubject, PositionTag::LastSubject, PositionTag::FirstSubject};
  const auto m = max_by_tag(v, tags);
  CHECK(m.at(PositionTag::FirstSubject) == 4);
  CHECK(m.at(PositionTag::LastSubject) == 5);
  CHECK(m.size() == 2);
}

TEST_CASE("tag means and rankings") {
  const std::vector<TagValues> rows = {{{PositionTag::LastSubject, 1.0}, {PositionTag::LastRelation, 3.0}},
                                       {{PositionTag::LastSubject, 2.0}}};
  const TagValues m = mean_by_tag(rows);
  CHECK(m.at(PositionTag::LastSubject) == 1.5);
  CHECK(m.at(PositionTag::LastRelation) == 3.0);
  CHECK(ranked_tags(m) == std::vector<PositionTag>{PositionTag::LastRelation, PositionTag::LastSubject});
}

TEST_CASE("corruption spans") {
  const FactWorld w = example_world();
  const Prompt p = w.render_prompt(0, 0, {TemplateKind::SubjectFirst, 0});
  CHECK(corrupted_positions(p, CorruptSpan::Subject) == std::vector<std::size_t>{0, 1});
  CHECK(corrupted_positions(p, CorruptSpan::Relation) == std::vector<std::size_t>{2, 3, 4, 5});
  const Prompt rf = w.render_prompt(1, 1, {TemplateKind::RelationFirst, 0});
  CHECK_THROWS_AS(corrupted_positions(w.subject_prompt(0), CorruptSpan::Relation), ValidationError);
  CHECK(corrupted_positions(rf, CorruptSpan::Subject) == std::vector<std::size_t>{4, 5});
}

TEST_CASE("restoring clean activations into a clean run has zero effect") {
  const FactWorld w = example_world();
  const Transformer m = Transformer::random(tiny_config(w.tokenizer().size()));
  const Prompt p = w.render_prompt(0, 0, {TemplateKind::SubjectFirst, 0});
  Corruption c;
  c.noise_std = 0.0;
  c.n_seeds = 2;
  const TraceGrid g = causal_trace(m, p, w.object_token(0), c);
  CHECK(g.ie.rows() == m.config().n_layers);
  CHECK(g.ie.cols() == p.tokens.size());
  CHECK(g.p_clean == doctest::Approx(g.p_corrupted).epsilon(1e-15));
  for (double v : g.ie.data()) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("trace entries are bounded, deterministic, and restoring everything downstream recovers the clean run") {
  const FactWorld w = example_world();
  const Transformer m = Transformer::random(tiny_config(w.tokenizer().size()));
  const Prompt p = w.render_prompt(0, 0, {TemplateKind::SubjectFirst, 0});
  Corruption c;
  c.noise_std = 1.0;
  c.n_seeds = 3;
  c.seed = 7;
  const TraceGrid g = causal_trace(m, p, w.object_token(0), c);
  for (double v : g.ie.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(causal_trace(m, p, w.object_token(0), c).ie == g.ie);
  CHECK(g.p_clean != g.p_corrupted);
}

TEST_CASE("default noise is three embedding standard deviations") {
  const Transformer m = Transformer::random(tiny_config(12));
  const auto& e = m.weights().token_embedding.data();
  double mean = 0.0;
  for (double x : e) mean += x;
  mean /= static_cast<double>(e.size());
  double var = 0.0;
  for (double x : e) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(e.size()));
  CHECK(default_noise_std(m) == doctest::Approx(3.0 * sd).epsilon(1e-3));
}

TEST_CASE("saliency maps are non-negative with the declared shape") {
  const Trained& t = small_trained();
  const EditHyperparams hp = small_hp();
  const EditRequest req = sample_edit_requests(t.world, 1, 2).requests.at(0);
  const SaliencyMap s = gradient_saliency(t.model, req, hp);
  CHECK(s.first_layer == hp.edit_layer);
  CHECK(s.grid.rows() == t.model.config().n_layers - hp.edit_layer);
  CHECK(s.grid.cols() == req.rewrite.tokens.size());
  CHECK(s.tags == req.rewrite.tags);
  for (double v : s.grid.data()) CHECK(v >= 0.0);
  CHECK(s.epoch == 1);
  double total = 0.0;
  for (double v : s.grid.data()) total += v;
  CHECK(total > 0.0);
}

TEST_CASE("saliency equals the gradient norm of the objective at each state") {
  const Trained& t = small_trained();
  const EditHyperparams hp = small_hp();
  const EditRequest req = sample_edit_requests(t.world, 1, 2).requests.at(0);
  const SaliencyMap s = gradient_saliency(t.model, req, hp);
  ad::Tape tape;
  TargetObjective obj = target_objective(tape, t.model, req, hp);
  tape.backward(obj.loss);
  const std::size_t layer = hp.edit_layer + 1;
  const std::size_t pos = req.rewrite.last_subject();
  const Tensor grad = tape.grad(obj.graph.residual_out[layer]);
  double sq = 0.0;
  for (double g : grad.row_span(obj.graph.row(0, pos))) sq += g * g;
  CHECK(s.grid(layer - hp.edit_layer, pos) == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
}
