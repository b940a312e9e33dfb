// SPDX-License-Identifier: Apache-2.0
//
// cpa-lab: command-line front end. Exit codes: 0 success, 1 invalid input
// (bad flag, config key, missing file), 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpa/checkpoint.hpp"
#include "cpa/config.hpp"
#include "cpa/error.hpp"
#include "cpa/eval.hpp"
#include "cpa/interp.hpp"
#include "cpa/report.hpp"
#include "cpa/studies.hpp"
#include "cpa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cpa {
namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string methods;
  std::string layers;
  std::vector<std::string> overrides;
  std::string span = "subject";
  std::string epochs = "1";
  std::string input;
  bool wall_time = false;
};

struct Context {
  RunConfig config;
  Options options;
  fs::path out;

  fs::path checkpoint_path() const {
    return config.checkpoint.empty() ? out / "model.ckpt" : fs::path(config.checkpoint);
  }
};

void note(const std::string& text) { std::fprintf(stderr, "%s\n", text.c_str()); }

Context make_context(const Options& options) {
  Context ctx;
  ctx.options = options;
  if (!options.config_path.empty()) ctx.config = load_config(options.config_path);
  for (const std::string& item : options.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + item + "'");
    ctx.config.set(item.substr(0, eq), item.substr(eq + 1));
  }
  if (options.seed) ctx.config.experiment.seeds = {*options.seed};
  if (!options.methods.empty()) ctx.config.experiment.methods = parse_methods(options.methods);
  if (!options.layers.empty()) {
    std::tie(ctx.config.experiment.anchor_first, ctx.config.experiment.anchor_last) = parse_range(options.layers);
  }
  if (!options.out_dir.empty()) {
    ctx.config.out_dir = options.out_dir;
  } else if (const char* env = std::getenv("CPA_LAB_OUT"); env != nullptr && *env != '\0') {
    ctx.config.out_dir = env;
  }
  ctx.out = ctx.config.out_dir;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw IoError("cannot create output directory " + ctx.out.string() + ": " + ec.message());
  return ctx;
}

json seeds_json(const RunConfig& c) { return c.experiment.seeds; }

FactWorld build_world(const Context& ctx) { return FactWorld::build(ctx.config.world); }

Transformer load_model(const Context& ctx, const FactWorld& world) {
  const fs::path path = ctx.checkpoint_path();
  if (!fs::exists(path)) {
    throw ValidationError("checkpoint not found: " + path.string() + " (run `cpa-lab train` first)");
  }
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.metadata.contains("world_hash") && ckpt.metadata["world_hash"] != world.hash()) {
    throw ValidationError("checkpoint " + path.string() + " was trained on a different world");
  }
  if (ckpt.model.config().vocab_size != world.tokenizer().size()) {
    throw ValidationError("checkpoint " + path.string() + " vocabulary does not match the world");
  }
  return std::move(ckpt.model);
}

ExperimentOptions experiment_options(const Context& ctx) {
  ExperimentOptions o;
  o.fluency.samples = ctx.config.experiment.fluency_samples;
  o.fluency.tokens = ctx.config.experiment.fluency_tokens;
  o.config_hash = ctx.config.hash();
  return o;
}

std::vector<std::size_t> anchor_layers(const RunConfig& c) {
  std::vector<std::size_t> out;
  for (std::size_t l = c.experiment.anchor_first; l <= c.experiment.anchor_last; ++l) out.push_back(l);
  return out;
}

json failures_json(const std::vector<EditFailure>& failures) {
  json out = json::array();
  for (const EditFailure& f : failures) {
    out.push_back({{"seed", f.seed}, {"edit_id", f.edit_id}, {"method", f.method}, {"message", f.message}});
  }
  return out;
}

json prompt_words(const FactWorld& world, const TokenSeq& tokens) {
  json out = json::array();
  for (TokenId t : tokens) out.push_back(world.tokenizer().word(t));
  return out;
}

void write_experiment(OutputSet& out, const std::string& stem, const ExperimentResult& r, bool wall_time) {
  out.text(stem + ".csv", records_csv(r.records, wall_time));
  out.json(stem + ".json", reports_json(r.reports));
  out.json(stem + "_failures.json", failures_json(r.failures));
  for (const EditFailure& f : r.failures) {
    note("edit failed: seed " + std::to_string(f.seed) + " edit " + std::to_string(f.edit_id) + " " + f.method +
         ": " + f.message);
  }
}

void finish(OutputSet& out, const std::string& command, const Context& ctx, json extra = json::object()) {
  extra["seeds"] = seeds_json(ctx.config);
  out.write_manifest(command, ctx.config.to_json(), extra);
  note("wrote " + out.dir().string());
}

// ---------------------------------------------------------------------------

int cmd_world_build(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  OutputSet out(ctx.out);
  write_world_jsonl(world, out.path("world.jsonl"));
  out.add("world.jsonl");
  finish(out, "world-build", ctx, {{"world_hash", world.hash()}});
  return 0;
}

int cmd_train(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const ModelConfig mc = model_config_for(world, ctx.config.model);
  TrainResult result = train(world, mc, ctx.config.train, [](std::size_t epoch, double loss) {
    if (epoch % 10 == 0) std::fprintf(stderr, "epoch %zu loss %.6f\n", epoch, loss);
  });
  json report = result.report.to_json();
  if (!ctx.options.wall_time) report.erase("wall_seconds");
  save_checkpoint(result.model, ctx.checkpoint_path(),
                  {{"world_hash", world.hash()},
                   {"train_seed", ctx.config.train.seed},
                   {"fact_accuracy", result.report.fact_accuracy}});
  OutputSet out(ctx.out);
  out.json("train_report.json", report);
  finish(out, "train", ctx,
         {{"checkpoint", ctx.checkpoint_path().string()}, {"model_checksum", model_checksum(result.model)}});
  std::fprintf(stderr, "fact accuracy %.4f (gate %.2f)\n", result.report.fact_accuracy,
               ctx.config.train.accuracy_gate);
  if (!result.report.gate_passed) {
    note("accuracy gate not met; checkpoint kept for inspection");
    return 2;
  }
  return 0;
}

int cmd_edit(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  ExperimentOptions opts = experiment_options(ctx);
  opts.fluency.samples = 0;
  json outcomes = json::array();
  opts.observer = [&](std::uint64_t seed, const EditRequest& request, EditMethod, const Transformer&,
                      const EditOutcome& outcome) {
    outcomes.push_back({{"seed", seed},
                        {"edit_id", request.id},
                        {"subject", world.subjects()[request.fact.subject]},
                        {"relation", world.relations()[request.fact.relation].name},
                        {"object", world.objects()[request.fact.object]},
                        {"new_object", world.objects()[request.new_object]},
                        {"hyperparams", ctx.config.edit.to_json()},
                        {"outcome", outcome.to_json()}});
  };
  const ExperimentResult r = run_experiment(model, world, ctx.config.experiment.methods, ctx.config.experiment.n_edits,
                                            ctx.config.experiment.seeds, ctx.config.edit, opts);
  OutputSet out(ctx.out);
  out.json("edit_outcomes.json", outcomes);
  out.json("edit_failures.json", failures_json(r.failures));
  finish(out, "edit", ctx);
  return 0;
}

int cmd_eval(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const ExperimentResult r = run_experiment(model, world, ctx.config.experiment.methods, ctx.config.experiment.n_edits,
                                            ctx.config.experiment.seeds, ctx.config.edit, experiment_options(ctx));
  OutputSet out(ctx.out);
  write_experiment(out, "eval", r, ctx.options.wall_time);
  finish(out, "eval", ctx);
  return 0;
}

int cmd_ablate(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const ExperimentResult r = ablation_suite(model, world, ctx.config.experiment.n_edits, ctx.config.experiment.seeds,
                                            ctx.config.edit, experiment_options(ctx));
  OutputSet out(ctx.out);
  write_experiment(out, "ablation", r, ctx.options.wall_time);
  finish(out, "ablate", ctx);
  return 0;
}

int cmd_sweep_anchor(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const SweepResult sweep = anchor_layer_sweep(model, world, anchor_layers(ctx.config), ctx.config.experiment.n_edits,
                                               ctx.config.experiment.seeds, ctx.config.edit, experiment_options(ctx));
  OutputSet out(ctx.out);
  for (const std::string& n : sweep.notices) note(n);
  std::string table = "anchor_layer,metric,mean,std\n";
  json groups = json::array();
  for (std::size_t i = 0; i < sweep.layers.size(); ++i) {
    const std::size_t layer = sweep.layers[i];
    const ExperimentResult& r = sweep.per_layer[i];
    write_experiment(out, "sweep_la" + std::to_string(layer), r, ctx.options.wall_time);
    for (const Report& rep : r.reports) {
      for (const char* metric : kMetricNames) {
        auto it = rep.metrics.find(metric);
        if (it == rep.metrics.end()) continue;
        table += std::to_string(layer) + "," + metric + "," + format_number(it->second.mean) + ",";
        if (it->second.std) table += format_number(*it->second.std);
        table += "\n";
      }
    }
    groups.push_back({{"anchor_layer", layer}, {"reports", reports_json(r.reports)}});
  }
  out.text("sweep.csv", table);
  out.json("sweep.json", {{"groups", groups}, {"notices", sweep.notices}});
  finish(out, "sweep-anchor", ctx);
  return 0;
}

int cmd_loss_curves(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const std::vector<LossCurves> curves =
      phase_loss_dynamics(model, world, anchor_layers(ctx.config), ctx.config.experiment.dynamics_edits,
                          ctx.config.experiment.seeds.front(), ctx.config.edit);
  std::string csv = "anchor_layer,phase,epoch,loss\n";
  json j = json::array();
  for (const LossCurves& c : curves) {
    for (std::size_t e = 0; e < kDynamicsEpochs; ++e) {
      csv += std::to_string(c.anchor_layer) + ",anchor," + std::to_string(e + 1) + "," + format_number(c.anchor[e]) + "\n";
    }
    for (std::size_t e = 0; e < kDynamicsEpochs; ++e) {
      csv += std::to_string(c.anchor_layer) + ",trajectory," + std::to_string(e + 1) + "," +
             format_number(c.trajectory[e]) + "\n";
    }
    j.push_back({{"anchor_layer", c.anchor_layer}, {"anchor", c.anchor}, {"trajectory", c.trajectory},
                 {"n_edits", c.n_edits}});
  }
  OutputSet out(ctx.out);
  out.text("loss_curves.csv", csv);
  out.json("loss_curves.json", j);
  finish(out, "loss-curves", ctx);
  return 0;
}

json tag_values_json(const TagValues& values) {
  json out = json::object();
  for (const auto& [tag, v] : values) out[tag_name(tag)] = v;
  return out;
}

int cmd_saliency(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const std::string checksum = model_checksum(model);
  std::vector<std::size_t> epochs;
  for (std::uint64_t e : parse_seeds(ctx.options.epochs)) epochs.push_back(static_cast<std::size_t>(e));
  OutputSet out(ctx.out);
  json summary = json::array();
  for (const std::size_t epoch : epochs) {
    const SaliencyStudy s = saliency_study(model, world, ctx.config.experiment.saliency_edits,
                                           ctx.config.experiment.seeds.front(), ctx.config.edit, epoch);
    const std::string stem = "saliency_e" + std::to_string(epoch);
    std::string csv = "edit_id,position_tag,value\n";
    for (std::size_t i = 0; i < s.per_edit.size(); ++i) {
      for (const auto& [tag, v] : s.per_edit[i]) {
        csv += std::to_string(s.edit_ids[i]) + "," + tag_name(tag) + "," + format_number(v) + "\n";
      }
    }
    out.text(stem + "_tags.csv", csv);
    emit_heatmap_data(out.dir(), stem + "_example", s.example.grid, s.example.first_layer, s.example.tags,
                      {{"kind", "saliency"},
                       {"model_checksum", checksum},
                       {"prompt", prompt_words(world, s.example.tokens)},
                       {"edit_id", s.edit_ids.front()},
                       {"epoch", epoch}});
    out.add(stem + "_example.csv");
    out.add(stem + "_example.json");
    json ranked = json::array();
    for (PositionTag t : ranked_tags(s.mean)) ranked.push_back(tag_name(t));
    summary.push_back({{"epoch", epoch}, {"n_edits", s.per_edit.size()}, {"mean_column_max", tag_values_json(s.mean)},
                       {"ranked_tags", ranked}});
  }
  out.json("saliency.json", summary);
  finish(out, "saliency", ctx);
  return 0;
}

CorruptSpan span_from_name(const std::string& name) {
  if (name == "subject") return CorruptSpan::Subject;
  if (name == "relation") return CorruptSpan::Relation;
  throw ValidationError("--span must be subject or relation, got '" + name + "'");
}

json corruption_json(const Corruption& c) {
  return {{"span", c.span == CorruptSpan::Subject ? "subject" : "relation"},
          {"noise_std", c.noise_std},
          {"n_seeds", c.n_seeds},
          {"seed", c.seed}};
}

int cmd_trace(const Context& ctx) {
  const FactWorld world = build_world(ctx);
  const Transformer model = load_model(ctx, world);
  const std::string checksum = model_checksum(model);
  Corruption c;
  c.span = span_from_name(ctx.options.span);
  c.noise_std = default_noise_std(model) / 3.0 * ctx.config.experiment.noise_scale;
  c.n_seeds = ctx.config.experiment.noise_seeds;
  const RieStudy s = rie_study(model, world, ctx.config.experiment.methods, ctx.config.experiment.n_edits,
                               ctx.config.experiment.seeds, ctx.config.edit, c);
  OutputSet out(ctx.out);
  std::string csv = "edit_id,method,position_tag,max_rie\n";
  for (const RieRow& row : s.rows) {
    for (const auto& [tag, v] : row.max_rie) {
      csv += std::to_string(row.edit_id) + "," + row.method + "," + tag_name(tag) + "," + format_number(v) + "\n";
    }
  }
  out.text("rie_tags.csv", csv);
  const json prompt = prompt_words(world, s.example_pre.tokens);
  emit_heatmap_data(out.dir(), "trace_pre", s.example_pre.ie, 0, s.example_pre.tags,
                    {{"kind", "indirect_effect"},
                     {"model_checksum", checksum},
                     {"prompt", prompt},
                     {"target", world.tokenizer().word(s.example_pre.target)},
                     {"corruption", corruption_json(s.example_pre.corruption)},
                     {"p_clean", s.example_pre.p_clean},
                     {"p_corrupted", s.example_pre.p_corrupted}});
  out.add("trace_pre.csv");
  out.add("trace_pre.json");
  json summary = json::object();
  for (const auto& [method, post] : s.example_post) {
    emit_heatmap_data(out.dir(), "trace_post_" + method, post.ie, 0, post.tags,
                      {{"kind", "indirect_effect"},
                       {"method", method},
                       {"base_model_checksum", checksum},
                       {"prompt", prompt},
                       {"target", world.tokenizer().word(post.target)},
                       {"corruption", corruption_json(post.corruption)},
                       {"p_clean", post.p_clean},
                       {"p_corrupted", post.p_corrupted}});
    emit_heatmap_data(out.dir(), "rie_" + method, s.example_rie.at(method).per_layer, 0, s.example_rie.at(method).tags,
                      {{"kind", "rie"}, {"method", method}, {"base_model_checksum", checksum}, {"prompt", prompt},
                       {"corruption", corruption_json(post.corruption)}});
    for (const char* f : {"trace_post_", "rie_"}) {
      out.add(f + method + ".csv");
      out.add(f + method + ".json");
    }
  }
  for (const auto& [method, mean] : s.mean) {
    json m = {{"mean_max_rie", tag_values_json(mean)}};
    if (mean.count(PositionTag::LastRelation) && mean.count(PositionTag::LastSubject)) {
      m["lr_minus_ls"] = mean.at(PositionTag::LastRelation) - mean.at(PositionTag::LastSubject);
    }
    summary[method] = m;
  }
  out.json("rie.json", {{"methods", summary}, {"corruption", corruption_json(c)}, {"failures", failures_json(s.failures)}});
  finish(out, "trace", ctx);
  return 0;
}

int cmd_report(const Context& ctx) {
  const fs::path input = ctx.options.input.empty() ? ctx.out / "eval.csv" : fs::path(ctx.options.input);
  std::ifstream in(input, std::ios::binary);
  if (!in) throw ValidationError("records file not found or unreadable: " + input.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::vector<MetricRecord> records = parse_records_csv(buf.str());
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  for (const MetricRecord& r : records) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  }
  std::vector<Report> reports;
  for (const std::string& m : methods) {
    Report rep = aggregate(m, records, seeds);
    rep.config_hash = ctx.config.hash();
    reports.push_back(std::move(rep));
  }
  OutputSet out(ctx.out);
  out.json("report.json", {{"source", input.filename().string()}, {"reports", reports_json(reports)}});
  finish(out, "report", ctx);
  return 0;
}

}  // namespace
}  // namespace cpa

int main(int argc, char** argv) {
  using namespace cpa;
  CLI::App app{"cpa-lab: knowledge-editing experiments on a toy transformer"};
  app.require_subcommand(1);
  Options options;

  struct Command {
    const char* name;
    const char* help;
    std::function<int(const Context&)> run;
  };
  const std::vector<Command> commands = {
      {"world-build", "Generate the fact world and write it as JSON lines", cmd_world_build},
      {"train", "Pretrain the model on the world and save a checkpoint", cmd_train},
      {"edit", "Apply edits and export per-edit outcomes", cmd_edit},
      {"saliency", "Gradient saliency of the editing objective, aggregated by position tag", cmd_saliency},
      {"trace", "Causal traces before/after editing and their log ratio", cmd_trace},
      {"eval", "Edit and score every method; per-edit CSV and aggregate JSON", cmd_eval},
      {"ablate", "Compare the single-phase variants with the full two-phase method", cmd_ablate},
      {"sweep-anchor", "Run the two-phase method over a range of anchor layers", cmd_sweep_anchor},
      {"loss-curves", "Mean per-epoch losses of both phases per anchor layer", cmd_loss_curves},
      {"report", "Re-aggregate a per-edit CSV", cmd_report},
  };
  std::function<int(const Context&)> selected;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", options.config_path, "Run configuration file");
    sub->add_option("--seed", options.seed, "Use this single experiment seed");
    sub->add_option("--out-dir", options.out_dir, "Output directory (env CPA_LAB_OUT)");
    sub->add_option("--methods", options.methods, "Comma-separated edit methods");
    sub->add_option("--layers", options.layers, "Anchor layer range a..b");
    sub->add_option("--set", options.overrides, "Override a config key (key=value)");
    sub->add_flag("--wall-time", options.wall_time, "Record wall-clock times (outputs stop being reproducible)");
    if (std::string(c.name) == "trace") sub->add_option("--span", options.span, "Corrupted span: subject|relation");
    if (std::string(c.name) == "saliency") sub->add_option("--epochs", options.epochs, "Comma-separated epochs");
    if (std::string(c.name) == "report") sub->add_option("--input", options.input, "Per-edit CSV (default out/eval.csv)");
    sub->callback([&selected, run = c.run] { selected = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    const Context ctx = make_context(options);
    return selected(ctx);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return 2;
  }
}
