// SPDX-License-Identifier: Apache-2.0

#include "cpa/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "cpa/error.hpp"

namespace cpa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ValidationError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  in.imbue(std::locale::classic());
  double out = 0.0;
  in >> out;
  if (in.fail() || !in.eof()) throw ValidationError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(const char* key, T RunConfig::*section, std::size_t T::*member) {
  return {key, [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*section).*member = to_u64(k, v); },
          [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <typename T>
Field u64_field(const char* key, T RunConfig::*section, std::uint64_t T::*member) {
  return {key, [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*section).*member = to_u64(k, v); },
          [=](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <typename T>
Field double_field(const char* key, T RunConfig::*section, double T::*member) {
  return {key, [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*section).*member = to_double(k, v); },
          [=](const RunConfig& c) { return fmt_double((c.*section).*member); }};
}

const std::vector<Field>& fields() {
  using R = RunConfig;
  static const std::vector<Field> table = {
      size_field("world.n_subjects", &R::world, &WorldSpec::n_subjects),
      size_field("world.n_relations", &R::world, &WorldSpec::n_relations),
      size_field("world.objects_per_relation", &R::world, &WorldSpec::objects_per_relation),
      double_field("world.multi_token_fraction", &R::world, &WorldSpec::multi_token_fraction),
      size_field("world.relations_per_pool", &R::world, &WorldSpec::relations_per_pool),
      size_field("world.name_parts", &R::world, &WorldSpec::name_parts),
      u64_field("world.seed", &R::world, &WorldSpec::seed),

      size_field("model.n_layers", &R::model, &ModelConfig::n_layers),
      size_field("model.d_model", &R::model, &ModelConfig::d_model),
      size_field("model.n_heads", &R::model, &ModelConfig::n_heads),
      size_field("model.d_mlp", &R::model, &ModelConfig::d_mlp),
      size_field("model.max_seq_len", &R::model, &ModelConfig::max_seq_len),
      u64_field("model.seed", &R::model, &ModelConfig::seed),

      size_field("train.epochs", &R::train, &TrainConfig::epochs),
      size_field("train.batch_size", &R::train, &TrainConfig::batch_size),
      double_field("train.learning_rate", &R::train, &TrainConfig::learning_rate),
      double_field("train.weight_decay", &R::train, &TrainConfig::weight_decay),
      u64_field("train.seed", &R::train, &TrainConfig::seed),
      double_field("train.accuracy_gate", &R::train, &TrainConfig::accuracy_gate),
      double_field("train.prefix_probability", &R::train, &TrainConfig::prefix_probability),
      size_field("train.biographies_per_subject", &R::train, &TrainConfig::biographies_per_subject),
      size_field("train.biography_facts", &R::train, &TrainConfig::biography_facts),

      size_field("edit.edit_layer", &R::edit, &EditHyperparams::edit_layer),
      size_field("edit.anchor_layer", &R::edit, &EditHyperparams::anchor_layer),
      double_field("edit.kl_weight", &R::edit, &EditHyperparams::kl_weight),
      double_field("edit.trajectory_weight", &R::edit, &EditHyperparams::trajectory_weight),
      double_field("edit.target_threshold", &R::edit, &EditHyperparams::target_threshold),
      double_field("edit.trajectory_threshold", &R::edit, &EditHyperparams::trajectory_threshold),
      size_field("edit.max_epochs", &R::edit, &EditHyperparams::max_epochs),
      double_field("edit.learning_rate", &R::edit, &EditHyperparams::learning_rate),
      double_field("edit.weight_decay", &R::edit, &EditHyperparams::weight_decay),
      size_field("edit.covariance_samples", &R::edit, &EditHyperparams::covariance_samples),
      double_field("edit.covariance_ridge", &R::edit, &EditHyperparams::covariance_ridge),
      u64_field("edit.covariance_seed", &R::edit, &EditHyperparams::covariance_seed),

      size_field("experiment.n_edits", &R::experiment, &ExperimentConfig::n_edits),
      {"experiment.seeds",
       [](R& c, const std::string&, const std::string& v) { c.experiment.seeds = parse_seeds(v); },
       [](const R& c) {
         std::string s;
         for (std::size_t i = 0; i < c.experiment.seeds.size(); ++i) {
           s += (i ? "," : "") + std::to_string(c.experiment.seeds[i]);
         }
         return s;
       }},
      {"experiment.methods",
       [](R& c, const std::string&, const std::string& v) { c.experiment.methods = parse_methods(v); },
       [](const R& c) {
         std::string s;
         for (std::size_t i = 0; i < c.experiment.methods.size(); ++i) {
           s += std::string(i ? "," : "") + method_name(c.experiment.methods[i]);
         }
         return s;
       }},
      {"experiment.anchor_layers",
       [](R& c, const std::string&, const std::string& v) {
         std::tie(c.experiment.anchor_first, c.experiment.anchor_last) = parse_range(v);
       },
       [](const R& c) {
         return std::to_string(c.experiment.anchor_first) + ".." + std::to_string(c.experiment.anchor_last);
       }},
      size_field("experiment.dynamics_edits", &R::experiment, &ExperimentConfig::dynamics_edits),
      size_field("experiment.saliency_edits", &R::experiment, &ExperimentConfig::saliency_edits),
      double_field("experiment.noise_scale", &R::experiment, &ExperimentConfig::noise_scale),
      size_field("experiment.noise_seeds", &R::experiment, &ExperimentConfig::noise_seeds),
      size_field("experiment.fluency_samples", &R::experiment, &ExperimentConfig::fluency_samples),
      size_field("experiment.fluency_tokens", &R::experiment, &ExperimentConfig::fluency_tokens),

      {"run.checkpoint", [](R& c, const std::string&, const std::string& v) { c.checkpoint = v; },
       [](const R& c) { return c.checkpoint; }},
      {"run.out_dir", [](R& c, const std::string&, const std::string& v) { c.out_dir = v; },
       [](const R& c) { return c.out_dir; }},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(*this, key, value);
      return;
    }
  }
  throw ValidationError("config: unknown key '" + key + "'");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const Field& f : fields()) j[f.key] = f.get(*this);
  return j;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : to_text()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(source + ":" + std::to_string(n) + ": expected 'key = value', got '" + t + "'");
    }
    try {
      config.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config file not found or unreadable: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::vector<EditMethod> parse_methods(const std::string& text) {
  std::vector<EditMethod> out;
  for (const std::string& item : split_list(text)) out.push_back(method_from_name(item));
  if (out.empty()) throw ValidationError("config: empty method list");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(text)) out.push_back(to_u64("seed", item));
  if (out.empty()) throw ValidationError("config: empty seed list");
  return out;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
  const std::string t = trim(text);
  const auto dots = t.find("..");
  if (dots == std::string::npos) {
    const std::size_t v = to_u64("layer range", t);
    return {v, v};
  }
  const std::size_t a = to_u64("layer range", trim(t.substr(0, dots)));
  const std::size_t b = to_u64("layer range", trim(t.substr(dots + 2)));
  if (a > b) throw ValidationError("config: layer range '" + t + "' is empty");
  return {a, b};
}

}  // namespace cpa
