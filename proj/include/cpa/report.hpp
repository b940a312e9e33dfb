// SPDX-License-Identifier: Apache-2.0
//
// Output files: per-edit metric CSVs, aggregate JSON, layer x position grid
// CSVs with JSON sidecars, and the run manifest. Numbers are written with
// 17 significant digits so they parse back to the same doubles, and nothing
// time-dependent is written unless asked for, so reruns are byte-identical.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpa/eval.hpp"
#include "cpa/world.hpp"

namespace cpa {

std::string format_number(double value);

/// Columns: edit_id, method, seed, the metrics of kMetricNames in order
/// with efficacy_argmax last, and wall_ms (blank unless include_wall_time).
std::string records_csv(const std::vector<MetricRecord>& records, bool include_wall_time = false);

/// Inverse of records_csv; blank cells are absent metrics. Throws
/// ValidationError naming the line on malformed input.
std::vector<MetricRecord> parse_records_csv(const std::string& text);

nlohmann::json reports_json(const std::vector<Report>& reports);

/// Columns: layer, position_index, position_tag, value.
std::string grid_csv(const Tensor& grid, std::size_t first_layer, const std::vector<PositionTag>& tags);

/// Creates parent directories; throws IoError when the file cannot be written.
void write_text(const std::filesystem::path& path, const std::string& content);
void write_json(const std::filesystem::path& path, const nlohmann::json& value);

/// Writes `stem`.csv and `stem`.json (sidecar) into `dir`.
void emit_heatmap_data(const std::filesystem::path& dir, const std::string& stem, const Tensor& grid,
                       std::size_t first_layer, const std::vector<PositionTag>& tags, nlohmann::json sidecar);

/// Version string of this build (from git when available).
const char* version_string();

/// Collects written files for the manifest.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  void text(const std::string& name, const std::string& content);
  void json(const std::string& name, const nlohmann::json& value);
  void add(const std::string& name) { files_.push_back(name); }
  /// manifest.json: command, config snapshot, seeds, version, file list.
  void write_manifest(const std::string& command, const nlohmann::json& config, const nlohmann::json& extra = {});

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

}  // namespace cpa
