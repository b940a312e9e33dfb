// SPDX-License-Identifier: Apache-2.0

#include "cpa/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cpa/error.hpp"

#ifndef CPA_LAB_VERSION
#define CPA_LAB_VERSION "unknown"
#endif

namespace cpa {

std::string format_number(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string records_csv(const std::vector<MetricRecord>& records, bool include_wall_time) {
  static constexpr const char* kColumns[] = {"efficacy", "generalization", "s_spec", "r_spec",
                                             "dp",       "cap",            "fluency"};
  std::string out = "edit_id,method,seed";
  for (const char* c : kColumns) out += std::string(",") + c;
  out += ",wall_ms,efficacy_argmax\n";
  for (const MetricRecord& r : records) {
    out += std::to_string(r.edit_id) + "," + r.method + "," + std::to_string(r.seed);
    for (const char* c : kColumns) {
      out += ",";
      if (auto v = r.get(c)) out += format_number(*v);
    }
    out += ",";
    if (include_wall_time) out += format_number(r.wall_ms);
    out += ",";
    if (auto v = r.get("efficacy_argmax")) out += format_number(*v);
    out += "\n";
  }
  return out;
}

std::vector<MetricRecord> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("records csv: empty input");
  std::vector<std::string> header;
  {
    std::istringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "edit_id" || header[1] != "method" || header[2] != "seed") {
    throw ValidationError("records csv: header must start with edit_id,method,seed");
  }
  std::vector<MetricRecord> out;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header.size()) {
      throw ValidationError("records csv: line " + std::to_string(n) + " has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(header.size()));
    }
    try {
      MetricRecord r;
      r.edit_id = std::stoull(cells[0]);
      r.method = cells[1];
      r.seed = std::stoull(cells[2]);
      for (std::size_t c = 3; c < cells.size(); ++c) {
        if (cells[c].empty()) continue;
        const double v = std::stod(cells[c]);
        if (header[c] == "wall_ms") {
          r.wall_ms = v;
        } else {
          r.values[header[c]] = v;
        }
      }
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ValidationError("records csv: line " + std::to_string(n) + " has a malformed number");
    }
  }
  return out;
}

nlohmann::json reports_json(const std::vector<Report>& reports) {
  nlohmann::json out = nlohmann::json::array();
  for (const Report& r : reports) out.push_back(r.to_json());
  return out;
}

std::string grid_csv(const Tensor& grid, std::size_t first_layer, const std::vector<PositionTag>& tags) {
  if (grid.cols() != tags.size()) throw ValidationError("grid export: tag count does not match grid width");
  std::string out = "layer,position_index,position_tag,value\n";
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t c = 0; c < grid.cols(); ++c) {
      out += std::to_string(first_layer + r) + "," + std::to_string(c) + "," + tag_name(tags[c]) + "," +
             format_number(grid(r, c)) + "\n";
    }
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& value) {
  write_text(path, value.dump(2) + "\n");
}

void emit_heatmap_data(const std::filesystem::path& dir, const std::string& stem, const Tensor& grid,
                       std::size_t first_layer, const std::vector<PositionTag>& tags, nlohmann::json sidecar) {
  if (!grid.all_finite()) throw ValidationError("grid export: grid has non-finite entries");
  write_text(dir / (stem + ".csv"), grid_csv(grid, first_layer, tags));
  std::vector<std::string> tag_names;
  for (PositionTag t : tags) tag_names.push_back(tag_name(t));
  sidecar["tags"] = tag_names;
  sidecar["first_layer"] = first_layer;
  sidecar["rows"] = grid.rows();
  sidecar["cols"] = grid.cols();
  write_json(dir / (stem + ".json"), sidecar);
}

const char* version_string() { return CPA_LAB_VERSION; }

void OutputSet::text(const std::string& name, const std::string& content) {
  write_text(path(name), content);
  add(name);
}

void OutputSet::json(const std::string& name, const nlohmann::json& value) {
  write_json(path(name), value);
  add(name);
}

void OutputSet::write_manifest(const std::string& command, const nlohmann::json& config, const nlohmann::json& extra) {
  std::vector<std::string> files = files_;
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  nlohmann::json m = {{"command", command}, {"version", version_string()}, {"config", config}, {"files", files}};
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) m[k] = v;
  }
  write_json(path("manifest.json"), m);
}

}  // namespace cpa
