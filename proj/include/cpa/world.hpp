// SPDX-License-Identifier: Apache-2.0
//
// Synthetic fact graph: subjects, relations with several surface phrasings,
// one object per (subject, relation), a word-level tokenizer, prompt
// rendering with per-token position tags, and edit-request sampling.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpa/model.hpp"

namespace cpa {

enum class PositionTag { RelationPrefix, FirstSubject, MidSubject, LastSubject, FirstRelation, MidRelation, LastRelation, Other };

inline constexpr PositionTag kAllTags[] = {PositionTag::RelationPrefix, PositionTag::FirstSubject, PositionTag::MidSubject,
                                           PositionTag::LastSubject,    PositionTag::FirstRelation, PositionTag::MidRelation,
                                           PositionTag::LastRelation,   PositionTag::Other};

const char* tag_name(PositionTag tag);  // "rp", "fs", "ms", "ls", "fr", "mr", "lr", "other"
PositionTag tag_from_name(const std::string& name);

class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words);

  TokenSeq encode(const std::string& text) const;
  std::string decode(std::span<const TokenId> tokens) const;
  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const { return words_.at(id); }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId> index_;
};

struct Relation {
  std::string name;
  std::vector<std::string> phrases;  // subject-first phrasings; [0] is canonical
  std::string prefix;                // relation-first phrasing, precedes the subject
  std::vector<std::size_t> objects;  // object inventory (indices into FactWorld::objects)
};

struct FactTriple {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;
  bool operator==(const FactTriple&) const = default;
};

enum class TemplateKind { SubjectFirst, RelationFirst };

struct PromptTemplate {
  TemplateKind kind = TemplateKind::SubjectFirst;
  std::size_t phrasing = 0;  // index into Relation::phrases for subject-first
};

struct Prompt {
  TokenSeq tokens;
  std::vector<PositionTag> tags;

  std::optional<std::size_t> find_last(PositionTag tag) const;
  std::size_t last_subject() const;  // throws when absent
  std::size_t last_relation() const; // throws when absent
};

/// Prepends tokens tagged `Other`.
Prompt with_prefix(const Prompt& prompt, const TokenSeq& prefix);

struct WorldSpec {
  std::size_t n_subjects = 40;
  std::size_t n_relations = 8;
  std::size_t objects_per_relation = 6;
  double multi_token_fraction = 0.1;
  /// Relations are grouped into pools of this size that share one object
  /// inventory (1 = every relation has its own objects).
  std::size_t relations_per_pool = 1;
  /// Multi-token subject names draw their parts from this many shared name
  /// tokens, so that no single part identifies a subject (0 = every part is
  /// a fresh token).
  std::size_t name_parts = 0;
  std::uint64_t seed = 0;
};

class FactWorld {
 public:
  static FactWorld build(const WorldSpec& spec);

  /// Assemble a world from explicit inventories. `facts[s][r]` is the object
  /// index of subject s under relation r.
  static FactWorld from_inventories(std::vector<std::string> subjects, std::vector<Relation> relations,
                                    std::vector<std::string> objects, std::vector<std::vector<std::size_t>> facts,
                                    std::vector<std::string> fillers = {}, std::uint64_t seed = 0);

  const WorldSpec& spec() const { return spec_; }
  const std::vector<std::string>& subjects() const { return subjects_; }
  const std::vector<Relation>& relations() const { return relations_; }
  const std::vector<std::string>& objects() const { return objects_; }
  const std::vector<std::string>& fillers() const { return fillers_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }

  std::size_t num_facts() const { return subjects_.size() * relations_.size(); }
  std::size_t object_of(std::size_t subject, std::size_t relation) const;
  FactTriple fact(std::size_t index) const;  // row-major over (subject, relation)
  std::vector<FactTriple> facts() const;
  TokenId object_token(std::size_t object) const;

  /// Every template a relation can be rendered with: each subject-first
  /// phrasing followed by the relation-first form.
  std::vector<PromptTemplate> templates(std::size_t relation) const;
  Prompt render_prompt(std::size_t subject, std::size_t relation, PromptTemplate tmpl) const;
  Prompt subject_prompt(std::size_t subject) const;

  /// Stable hash of the world's content (inventories, fact table, vocabulary).
  std::string hash() const;

 private:
  friend FactWorld read_world_jsonl(const std::filesystem::path& path);
  void finalize();

  WorldSpec spec_;
  std::vector<std::string> subjects_;
  std::vector<Relation> relations_;
  std::vector<std::string> objects_;
  std::vector<std::string> fillers_;
  std::vector<std::size_t> table_;  // subject-major
  Tokenizer tokenizer_;
};

// ---------------------------------------------------------------------------
// Edit requests

struct Probe {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t true_object = 0;
  Prompt prompt;
};

struct EditRequest {
  std::size_t id = 0;
  FactTriple fact;
  std::size_t new_object = 0;
  TokenId new_object_token = 0;
  Prompt rewrite;
  std::vector<Prompt> paraphrases;
  std::vector<Probe> neighborhood;     // <s', r>
  std::vector<Probe> relation_probes;  // <s, r'>
  std::vector<TokenSeq> prefixes;      // prefixes[0] is empty

  /// Rewrite prompt with each prefix prepended, in prefix order.
  std::vector<Prompt> prefixed_rewrites() const;
};

struct EditSampling {
  std::vector<EditRequest> requests;
  std::vector<FactTriple> skipped;  // facts whose relation has a single possible object
};

inline constexpr std::size_t kNumPrefixes = 4;
inline constexpr std::size_t kMaxNeighborhoodProbes = 5;

EditRequest make_edit_request(const FactWorld& world, const FactTriple& fact, std::size_t new_object,
                              std::uint64_t seed, std::size_t id = 0);

/// Samples up to n distinct facts in a seed-determined order.
EditSampling sample_edit_requests(const FactWorld& world, std::size_t n, std::uint64_t seed);

/// Facts in a seed-determined order, each paired with a new object; used to
/// draw requests lazily when some must be rejected by the caller.
class EditRequestStream {
 public:
  EditRequestStream(const FactWorld& world, std::uint64_t seed);
  std::optional<EditRequest> next();
  const std::vector<FactTriple>& skipped() const { return skipped_; }

 private:
  const FactWorld& world_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t issued_ = 0;
  std::vector<FactTriple> skipped_;
};

// ---------------------------------------------------------------------------
// JSON-lines serialization: a header record, then one record per fact.

void write_world_jsonl(const FactWorld& world, const std::filesystem::path& path);
FactWorld read_world_jsonl(const std::filesystem::path& path);

}  // namespace cpa
