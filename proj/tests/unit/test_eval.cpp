// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "cpa/error.hpp"
#include "cpa/eval.hpp"
#include "cpa/report.hpp"
#include "fixtures.hpp"

using namespace cpa;
using namespace cpa::testing;

TEST_CASE("bigram entropy") {
  const TokenSeq constant = {3, 3, 3, 3};
  CHECK(bigram_entropy(constant) == 0.0);
  const TokenSeq alternating = {1, 2, 1, 2, 1};  // pairs (1,2) x2 and (2,1) x2
  CHECK(bigram_entropy(alternating) == doctest::Approx(1.0));
  const TokenSeq distinct = {1, 2, 3, 4, 5};  // four distinct pairs
  CHECK(bigram_entropy(distinct) == doctest::Approx(2.0));
  CHECK(bigram_entropy(TokenSeq{7}) == 0.0);
}

TEST_CASE("a no-op edit changes nothing") {
  const Trained& t = small_trained();
  const std::vector<EditRequest> edits = draw_edits(t.model, t.world, 4, 1);
  REQUIRE(!edits.empty());
  for (const EditRequest& req : edits) {
    const MetricRecord r = evaluate_edit(t.model, t.model, t.world, req, 1);
    CHECK(r.get("efficacy") == 0.0);
    CHECK(r.get("efficacy_argmax") == 0.0);
    if (r.get("dp")) {
      CHECK(*r.get("dp") == 0.0);
      CHECK(r.get("r_spec") == 1.0);
    }
    if (r.get("s_spec")) CHECK(*r.get("s_spec") == 1.0);
    CHECK(*r.get("fluency") >= 0.0);
  }
}

TEST_CASE("edit draws contain only facts the model answers correctly") {
  const Trained& t = small_trained();
  for (const EditRequest& req : draw_edits(t.model, t.world, 6, 2)) {
    const Tensor p = next_token_distribution(t.model, req.rewrite.tokens);
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i) {
      if (p[i] > p[best]) best = i;
    }
    CHECK(best == t.world.object_token(req.fact.object));
  }
}

TEST_CASE("metrics are deterministic and within range") {
  const Trained& t = small_trained();
  const EditHyperparams hp = small_hp();
  FluencyConfig fl;
  fl.samples = 2;
  fl.tokens = 8;
  ExperimentOptions opts;
  opts.fluency = fl;
  const ExperimentResult a = run_experiment(t.model, t.world, {EditMethod::Baseline, EditMethod::Cpa}, 2, {4}, hp, opts);
  const ExperimentResult b = run_experiment(t.model, t.world, {EditMethod::Baseline, EditMethod::Cpa}, 2, {4}, hp, opts);
  CHECK(records_csv(a.records) == records_csv(b.records));
  CHECK(reports_json(a.reports) == reports_json(b.reports));
  CHECK(a.records.size() + a.failures.size() == 4);
  for (const MetricRecord& r : a.records) {
    for (const auto& [name, v] : r.values) {
      CHECK(std::isfinite(v));
      if (name != "fluency") {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
  for (const Report& rep : a.reports) CHECK(!rep.metrics.at("efficacy").std.has_value());
}

TEST_CASE("aggregation: mean of seed means, sample std, duplicated seeds") {
  std::vector<MetricRecord> recs;
  auto add = [&](std::uint64_t seed, double eff) {
    MetricRecord r;
    r.method = "m";
    r.seed = seed;
    r.values["efficacy"] = eff;
    recs.push_back(r);
  };
  add(1, 1.0);
  add(1, 0.0);  // seed 1 mean 0.5
  add(2, 1.0);  // seed 2 mean 1.0
  const Report rep = aggregate("m", recs, {1, 2});
  CHECK(rep.metrics.at("efficacy").mean == doctest::Approx(0.75));
  CHECK(*rep.metrics.at("efficacy").std == doctest::Approx(std::sqrt(0.125)));
  CHECK(rep.n_edits == 3);
  CHECK(rep.n_seeds == 2);
  CHECK(rep.metrics.count("s_spec") == 0);

  const Report single = aggregate("m", recs, {2});
  CHECK(!single.metrics.at("efficacy").std.has_value());

  const Report dup = aggregate("m", recs, {2, 2});
  CHECK(dup.metrics.at("efficacy").mean == 1.0);
  CHECK(*dup.metrics.at("efficacy").std == 0.0);
}

TEST_CASE("duplicated seed list yields duplicated rows") {
  const Trained& t = small_trained();
  ExperimentOptions opts;
  opts.fluency.samples = 0;
  const ExperimentResult r = run_experiment(t.model, t.world, {EditMethod::Baseline}, 1, {3, 3}, small_hp(), opts);
  REQUIRE(r.records.size() == 2);
  CHECK(r.records[0].values == r.records[1].values);
  CHECK(r.records[0].edit_id == r.records[1].edit_id);
}

TEST_CASE("aggregate reproduced from the per-edit CSV") {
  const Trained& t = small_trained();
  ExperimentOptions opts;
  opts.fluency.samples = 1;
  opts.fluency.tokens = 6;
  const ExperimentResult r = run_experiment(t.model, t.world, {EditMethod::Baseline}, 2, {1, 2}, small_hp(), opts);
  const std::vector<MetricRecord> parsed = parse_records_csv(records_csv(r.records));
  REQUIRE(parsed.size() == r.records.size());
  const Report again = aggregate("baseline", parsed, {1, 2});
  for (const auto& [name, s] : r.reports.at(0).metrics) {
    CHECK(again.metrics.at(name).mean == s.mean);
    CHECK(again.metrics.at(name).std == s.std);
  }
}

TEST_CASE("experiment input validation") {
  const Trained& t = small_trained();
  CHECK_THROWS_AS(run_experiment(t.model, t.world, {}, 1, {1}, small_hp()), ValidationError);
  CHECK_THROWS_AS(run_experiment(t.model, t.world, {EditMethod::Baseline}, 0, {1}, small_hp()), ValidationError);
  CHECK_THROWS_AS(phase_loss_dynamics(t.model, t.world, {1}, 5, 1, small_hp()), ValidationError);
}

TEST_CASE("anchor sweep skips layers at or below the edit layer") {
  const Trained& t = small_trained();
  ExperimentOptions opts;
  opts.fluency.samples = 0;
  const SweepResult s = anchor_layer_sweep(t.model, t.world, {0, 1, 2}, 1, {1}, small_hp(), opts);
  CHECK(s.layers == std::vector<std::size_t>{1, 2});
  CHECK(s.notices.size() == 1);
  CHECK(s.per_layer.size() == 2);
}

TEST_CASE("loss curves have seven finite points per phase") {
  const Trained& t = small_trained();
  const std::vector<LossCurves> c = phase_loss_dynamics(t.model, t.world, {1, 2}, 10, 1, small_hp());
  REQUIRE(c.size() == 2);
  for (const LossCurves& lc : c) {
    CHECK(lc.anchor.size() == 7);
    CHECK(lc.trajectory.size() == 7);
    for (double v : lc.anchor) CHECK(std::isfinite(v));
    for (double v : lc.trajectory) CHECK(std::isfinite(v));
  }
}
