// SPDX-License-Identifier: Apache-2.0
//
// Multi-edit diagnostics: saliency and relative indirect effect reduced to
// one number per position tag per edit, then averaged over edits. Prompts
// differ in length, so positions are aligned by tag, not by index.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cpa/editor.hpp"
#include "cpa/eval.hpp"
#include "cpa/interp.hpp"

namespace cpa {

using TagValues = std::map<PositionTag, double>;

/// Mean over rows of each tag's value; a tag counts only the rows carrying it.
TagValues mean_by_tag(const std::vector<TagValues>& rows);

/// Tags sorted by value, largest first (ties by tag order).
std::vector<PositionTag> ranked_tags(const TagValues& values);

struct SaliencyStudy {
  std::size_t epoch = 1;
  std::vector<std::size_t> edit_ids;
  std::vector<TagValues> per_edit;  // per tag, the column maximum of the edit's map
  TagValues mean;
  SaliencyMap example;  // map of the first edit
};

/// Saliency at `epoch` (1 = the clean value; e > 1 = the value after e - 1
/// optimization steps of the next-token objective).
SaliencyStudy saliency_study(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                             std::uint64_t seed, const EditHyperparams& hp, std::size_t epoch = 1);

struct RieRow {
  std::size_t edit_id = 0;
  std::string method;
  TagValues max_rie;  // per tag, max over positions of the max-over-layers RIE
};

struct RieStudy {
  std::vector<RieRow> rows;
  std::map<std::string, TagValues> mean;  // per method
  std::vector<EditFailure> failures;
  // First edit: the pre-edit trace and, per method, the post-edit trace and RIE.
  TraceGrid example_pre;
  std::map<std::string, TraceGrid> example_post;
  std::map<std::string, RieGrid> example_rie;
};

/// Pre-edit traces target the true object, post-edit traces the new one.
/// `corruption.seed` is mixed with each edit id.
RieStudy rie_study(const Transformer& model, const FactWorld& world, const std::vector<EditMethod>& methods,
                   std::size_t n_edits, const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                   const Corruption& corruption);

}  // namespace cpa
