// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpa/checkpoint.hpp"
#include "cpa/config.hpp"
#include "cpa/error.hpp"
#include "cpa/report.hpp"
#include "cpa/trainer.hpp"
#include "fixtures.hpp"

using namespace cpa;
using namespace cpa::testing;

TEST_CASE("config parsing: comments, values, unknown keys with line numbers") {
  const RunConfig c = parse_config(
      "# comment\n\nworld.n_subjects = 12\nedit.kl_weight=0.125\nexperiment.methods = cpa, phase1_only\n"
      "experiment.seeds = 4,5\nexperiment.anchor_layers = 3..6\nrun.out_dir = out\n",
      "c.cfg");
  CHECK(c.world.n_subjects == 12);
  CHECK(c.edit.kl_weight == 0.125);
  CHECK(c.experiment.methods == std::vector<EditMethod>{EditMethod::Cpa, EditMethod::Phase1Only});
  CHECK(c.experiment.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(c.experiment.anchor_first == 3);
  CHECK(c.experiment.anchor_last == 6);
  CHECK(c.out_dir == "out");
  CHECK_THROWS_WITH_AS(parse_config("\nworld.colour = 3\n", "c.cfg"), doctest::Contains("c.cfg:2"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("world.colour = 3\n"), doctest::Contains("world.colour"), ValidationError);
  CHECK_THROWS_AS(parse_config("model.d_model = big\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("model.d_model = -4\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("no equals sign\n"), ValidationError);
  CHECK_THROWS_AS(parse_config("experiment.methods = rome\n"), ValidationError);
}

TEST_CASE("config text round-trips exactly and hashes stably") {
  RunConfig c;
  c.edit.learning_rate = 0.1;  // not exactly representable
  c.experiment.seeds = {9, 1};
  const RunConfig back = parse_config(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.edit.learning_rate == c.edit.learning_rate);
  CHECK(back.hash() == c.hash());
  c.world.seed = 1;
  CHECK(back.hash() != c.hash());
}

TEST_CASE("missing config file names the path") {
  CHECK_THROWS_WITH_AS(load_config("/nonexistent/x.cfg"), doctest::Contains("/nonexistent/x.cfg"), ValidationError);
}

TEST_CASE("range parsing") {
  CHECK(parse_range("3..7") == std::pair<std::size_t, std::size_t>{3, 7});
  CHECK(parse_range("4") == std::pair<std::size_t, std::size_t>{4, 4});
  CHECK_THROWS_AS(parse_range("7..3"), ValidationError);
  CHECK_THROWS_AS(parse_range("a..b"), ValidationError);
}

TEST_CASE("grid CSV: header plus one row per cell, exact decimal round-trip") {
  const Tensor g = Tensor::matrix(2, 3, {0.1, 1.0 / 3.0, -2e-17, 5.0, 1e300, 0.7});
  const std::vector<PositionTag> tags = {PositionTag::FirstSubject, PositionTag::LastSubject, PositionTag::LastRelation};
  const std::string csv = grid_csv(g, 2, tags);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "layer,position_index,position_tag,value");
  std::size_t n = 0;
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string layer, pos, tag, value;
    std::getline(cells, layer, ',');
    std::getline(cells, pos, ',');
    std::getline(cells, tag, ',');
    std::getline(cells, value, ',');
    const std::size_t r = std::stoul(layer) - 2;
    const std::size_t c = std::stoul(pos);
    CHECK(tag == tag_name(tags[c]));
    CHECK(std::strtod(value.c_str(), nullptr) == g(r, c));
    ++n;
  }
  CHECK(n == 6);
  CHECK_THROWS_AS(grid_csv(g, 0, {PositionTag::LastSubject}), ValidationError);
}

TEST_CASE("heatmap export writes CSV and sidecar; bad grids and paths fail") {
  const auto dir = std::filesystem::temp_directory_path() / "cpa_test_heatmap";
  std::filesystem::remove_all(dir);
  const Tensor g = Tensor::matrix(1, 2, {0.5, 0.25});
  const std::vector<PositionTag> tags = {PositionTag::LastSubject, PositionTag::LastRelation};
  emit_heatmap_data(dir, "grid", g, 0, tags, {{"model_checksum", "abc"}});
  CHECK(std::filesystem::exists(dir / "grid.csv"));
  std::ifstream side(dir / "grid.json");
  const nlohmann::json j = nlohmann::json::parse(side);
  CHECK(j["model_checksum"] == "abc");
  CHECK(j["tags"] == nlohmann::json::array({"ls", "lr"}));
  Tensor bad = g;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(emit_heatmap_data(dir, "bad", bad, 0, tags, {}), ValidationError);
  CHECK_THROWS_AS(write_text("/proc/cpa_no_such_dir/x.csv", "x"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("records CSV columns and blanks") {
  MetricRecord r;
  r.edit_id = 3;
  r.method = "cpa";
  r.seed = 2;
  r.values = {{"efficacy", 1.0}, {"r_spec", 0.5}};
  r.wall_ms = 12.5;
  const std::string csv = records_csv({r});
  CHECK(csv ==
        "edit_id,method,seed,efficacy,generalization,s_spec,r_spec,dp,cap,fluency,wall_ms,efficacy_argmax\n"
        "3,cpa,2,1,,,0.5,,,,,\n");
  CHECK(records_csv({r}, true).find(",12.5,") != std::string::npos);
  const auto back = parse_records_csv(records_csv({r}, true));
  REQUIRE(back.size() == 1);
  CHECK(back[0].values == r.values);
  CHECK(back[0].wall_ms == 12.5);
  CHECK_THROWS_AS(parse_records_csv("edit_id,method,seed\n1,a\n"), ValidationError);
}

TEST_CASE("training: trivial world, determinism, validation") {
  std::vector<Relation> rel = {{"r", {"likes"}, "The liking of", {0, 1}}, {"q", {"hates"}, "The hatred of", {0, 1}}};
  const FactWorld w = FactWorld::from_inventories({"Ada"}, {rel[0]}, {"tea", "coffee"}, {{1}}, {"so"});
  const ModelConfig mc = model_config_for(w, tiny_config(0));
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  const TrainResult a = train(w, mc, tc);
  CHECK(a.report.fact_accuracy == 1.0);
  CHECK(a.report.gate_passed);
  CHECK(a.report.epoch_losses.size() == 30);
  for (double l : a.report.epoch_losses) CHECK(std::isfinite(l));
  const TrainResult b = train(w, mc, tc);
  CHECK(serialize_checkpoint(a.model) == serialize_checkpoint(b.model));

  TrainConfig bad = tc;
  bad.epochs = 0;
  CHECK_THROWS_AS(train(w, mc, bad), ValidationError);
  bad = tc;
  bad.accuracy_gate = 1.5;
  CHECK_THROWS_AS(train(w, mc, bad), ValidationError);
}

TEST_CASE("training with biographies: sequence length check, determinism, validation") {
  const FactWorld w = FactWorld::build(small_spec());
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.biographies_per_subject = 1;
  tc.biography_facts = 3;

  ModelConfig short_mc = tiny_config(0);
  short_mc.max_seq_len = 8;
  CHECK_THROWS_WITH(model_config_for(w, short_mc, tc), doctest::Contains("max_seq_len"));

  ModelConfig mc = tiny_config(0);
  mc.max_seq_len = 64;
  mc = model_config_for(w, mc, tc);
  CHECK(mc.vocab_size == w.tokenizer().size());
  const TrainResult a = train(w, mc, tc);
  const TrainResult b = train(w, mc, tc);
  CHECK(serialize_checkpoint(a.model) == serialize_checkpoint(b.model));
  for (double l : a.report.epoch_losses) CHECK(std::isfinite(l));

  TrainConfig bad = tc;
  bad.biography_facts = 0;
  CHECK_THROWS_AS(train(w, mc, bad), ValidationError);
}
