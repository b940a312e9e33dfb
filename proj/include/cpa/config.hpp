// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat text file of `section.key = value` lines.
// Blank lines and lines starting with '#' are ignored; unknown keys are
// rejected with their line number.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpa/editor.hpp"
#include "cpa/model.hpp"
#include "cpa/trainer.hpp"
#include "cpa/world.hpp"

namespace cpa {

struct ExperimentConfig {
  std::size_t n_edits = 50;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<EditMethod> methods{EditMethod::Baseline, EditMethod::Cpa};
  std::size_t anchor_first = 3;  // inclusive range for the anchor sweep
  std::size_t anchor_last = 7;
  std::size_t dynamics_edits = 30;
  std::size_t saliency_edits = 100;
  double noise_scale = 3.0;  // trace noise = scale * std of token embeddings
  std::size_t noise_seeds = 10;
  std::size_t fluency_samples = 5;
  std::size_t fluency_tokens = 30;
};

struct RunConfig {
  WorldSpec world;
  ModelConfig model;
  TrainConfig train;
  EditHyperparams edit;
  ExperimentConfig experiment;
  std::string checkpoint;  // empty: <out_dir>/model.ckpt
  std::string out_dir = "cpa-out";

  /// Applies one `key = value` assignment.
  void set(const std::string& key, const std::string& value);
  /// Every key with its current value, one `key = value` line each, in a
  /// fixed order; parse_config(to_text()) reproduces the config.
  std::string to_text() const;
  nlohmann::json to_json() const;
  /// FNV-1a of to_text(), 16 hex digits.
  std::string hash() const;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

std::vector<EditMethod> parse_methods(const std::string& text);
std::vector<std::uint64_t> parse_seeds(const std::string& text);
/// "a..b" (inclusive) or a single integer.
std::pair<std::size_t, std::size_t> parse_range(const std::string& text);

}  // namespace cpa
