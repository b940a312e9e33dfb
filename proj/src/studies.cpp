// SPDX-License-Identifier: Apache-2.0

#include "cpa/studies.hpp"

#include <algorithm>
#include <optional>

#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

TagValues mean_by_tag(const std::vector<TagValues>& rows) {
  TagValues sum;
  std::map<PositionTag, std::size_t> count;
  for (const TagValues& row : rows) {
    for (const auto& [tag, v] : row) {
      sum[tag] += v;
      ++count[tag];
    }
  }
  for (auto& [tag, v] : sum) v /= static_cast<double>(count[tag]);
  return sum;
}

std::vector<PositionTag> ranked_tags(const TagValues& values) {
  std::vector<std::pair<PositionTag, double>> items(values.begin(), values.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<PositionTag> out;
  for (const auto& item : items) out.push_back(item.first);
  return out;
}

SaliencyStudy saliency_study(const Transformer& model, const FactWorld& world, std::size_t n_edits,
                             std::uint64_t seed, const EditHyperparams& hp, std::size_t epoch) {
  if (epoch == 0) throw ValidationError("saliency: epochs are numbered from 1");
  hp.validate(model.config());
  SaliencyStudy study;
  study.epoch = epoch;
  for (const EditRequest& request : draw_edits(model, world, n_edits, seed)) {
    std::optional<Tensor> value;
    if (epoch > 1) {
      EditHyperparams steps = hp;
      steps.max_epochs = epoch - 1;
      steps.target_threshold = 1e-300;
      value = optimize_target_baseline(model, request, steps).value;
    }
    SaliencyMap map = gradient_saliency(model, request, hp, value, epoch);
    const std::vector<double> peaks = column_max(map.grid);
    study.edit_ids.push_back(request.id);
    study.per_edit.push_back(max_by_tag(peaks, map.tags));
    if (study.per_edit.size() == 1) study.example = std::move(map);
  }
  if (study.per_edit.empty()) throw ValidationError("saliency: no edit requests the model answers correctly");
  study.mean = mean_by_tag(study.per_edit);
  return study;
}

RieStudy rie_study(const Transformer& model, const FactWorld& world, const std::vector<EditMethod>& methods,
                   std::size_t n_edits, const std::vector<std::uint64_t>& seeds, const EditHyperparams& hp,
                   const Corruption& corruption) {
  if (methods.empty()) throw ValidationError("trace: no methods");
  hp.validate(model.config());
  CovarianceCache covariances(model, world, hp);
  RieStudy study;
  std::map<std::string, std::vector<TagValues>> by_method;
  bool first = true;
  for (const std::uint64_t seed : seeds) {
    for (const EditRequest& request : draw_edits(model, world, n_edits, seed)) {
      Corruption c = corruption;
      c.seed = mix_seed(mix_seed(corruption.seed, seed), request.id);
      const TraceGrid pre = causal_trace(model, request.rewrite, world.object_token(request.fact.object), c);
      for (const EditMethod method : methods) {
        const std::string name = method_name(method);
        try {
          const EditResult edited = edit(model, request, method, hp, covariances);
          TraceGrid post = causal_trace(edited.model, request.rewrite, request.new_object_token, c);
          RieGrid grid = rie(pre, post);
          RieRow row{request.id, name, max_by_tag(grid.max_rie, grid.tags)};
          by_method[name].push_back(row.max_rie);
          study.rows.push_back(std::move(row));
          if (first) {
            study.example_post.emplace(name, std::move(post));
            study.example_rie.emplace(name, std::move(grid));
          }
        } catch (const std::exception& e) {
          study.failures.push_back({seed, request.id, name, e.what()});
        }
      }
      if (first) study.example_pre = pre;
      first = false;
    }
  }
  if (first) throw ValidationError("trace: no edit requests the model answers correctly");
  for (const auto& [name, rows] : by_method) study.mean[name] = mean_by_tag(rows);
  return study;
}

}  // namespace cpa
