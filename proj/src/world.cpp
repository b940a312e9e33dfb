// SPDX-License-Identifier: Apache-2.0

#include "cpa/world.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cpa/error.hpp"
#include "cpa/random.hpp"

namespace cpa {

namespace {

struct RelationSeed {
  const char* name;
  std::vector<std::string> phrases;
  const char* prefix;
};

const std::vector<RelationSeed>& curated_relations() {
  static const std::vector<RelationSeed> kRelations = {
      {"language", {"speaks", "talks in"}, "The language of"},
      {"citizenship", {"is citizen of", "holds passport of"}, "The nationality of"},
      {"profession", {"works as", "earns living as"}, "The job of"},
      {"city", {"lives in", "resides in"}, "The hometown of"},
      {"sport", {"plays", "competes in"}, "The sport of"},
      {"instrument", {"performs on", "is skilled at"}, "The instrument of"},
      {"employer", {"works for", "is employed by"}, "The employer of"},
      {"religion", {"believes in", "worships"}, "The faith of"},
      {"genre", {"writes", "composes"}, "The genre of"},
      {"team", {"supports", "cheers for"}, "The team of"},
      {"food", {"eats", "likes eating"}, "The dish of"},
      {"color", {"wears", "dresses in"}, "The color of"},
  };
  return kRelations;
}

const std::vector<std::string>& default_fillers() {
  static const std::vector<std::string> kFillers = {"so",  "then",   "well",    "yes",    "and",  "also",
                                                    "now", "indeed", "however", "anyway", "okay", "today"};
  return kFillers;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

class NameMaker {
 public:
  NameMaker(Rng& rng, std::set<std::string>& used) : rng_(rng), used_(used) {}

  std::string make(std::size_t syllables, bool capitalize) {
    static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
    static constexpr std::string_view kVowels = "aeiou";
    for (;;) {
      std::string w;
      for (std::size_t i = 0; i < syllables; ++i) {
        w += kConsonants[rng_.below(kConsonants.size())];
        w += kVowels[rng_.below(kVowels.size())];
      }
      if (capitalize) w[0] = static_cast<char>(w[0] - 'a' + 'A');
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string>& used_;
};

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json header_json(const FactWorld& world) {
  nlohmann::json rels = nlohmann::json::array();
  for (const Relation& r : world.relations()) {
    rels.push_back({{"name", r.name}, {"phrases", r.phrases}, {"prefix", r.prefix}, {"objects", r.objects}});
  }
  const WorldSpec& s = world.spec();
  return {{"type", "header"},
          {"seed", s.seed},
          {"spec",
           {{"n_subjects", s.n_subjects},
            {"n_relations", s.n_relations},
            {"objects_per_relation", s.objects_per_relation},
            {"multi_token_fraction", s.multi_token_fraction},
            {"relations_per_pool", s.relations_per_pool},
            {"name_parts", s.name_parts}}},
          {"subjects", world.subjects()},
          {"relations", rels},
          {"objects", world.objects()},
          {"fillers", world.fillers()},
          {"templates", {"subject-first: <s> <r>", "relation-first: <r-prefix> <s>"}},
          {"vocabulary", world.tokenizer().words()}};
}

}  // namespace

// ---------------------------------------------------------------------------

const char* tag_name(PositionTag tag) {
  switch (tag) {
    case PositionTag::RelationPrefix: return "rp";
    case PositionTag::FirstSubject: return "fs";
    case PositionTag::MidSubject: return "ms";
    case PositionTag::LastSubject: return "ls";
    case PositionTag::FirstRelation: return "fr";
    case PositionTag::MidRelation: return "mr";
    case PositionTag::LastRelation: return "lr";
    case PositionTag::Other: return "other";
  }
  return "other";
}

PositionTag tag_from_name(const std::string& name) {
  for (PositionTag t : kAllTags) {
    if (name == tag_name(t)) return t;
  }
  throw ValidationError("unknown position tag '" + name + "'");
}

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
  for (TokenId i = 0; i < words_.size(); ++i) {
    if (words_[i].empty() || words_[i].find(' ') != std::string::npos) {
      throw ValidationError("tokenizer: invalid word '" + words_[i] + "'");
    }
    if (!index_.emplace(words_[i], i).second) throw ValidationError("tokenizer: duplicate word '" + words_[i] + "'");
  }
}

TokenId Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw ValidationError("unknown surface form '" + word + "'");
  return it->second;
}

TokenSeq Tokenizer::encode(const std::string& text) const {
  TokenSeq out;
  for (const std::string& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word(tokens[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::optional<std::size_t> Prompt::find_last(PositionTag tag) const {
  for (std::size_t i = tags.size(); i-- > 0;) {
    if (tags[i] == tag) return i;
  }
  return std::nullopt;
}

std::size_t Prompt::last_subject() const {
  auto p = find_last(PositionTag::LastSubject);
  if (!p) throw ValidationError("prompt has no last-subject position");
  return *p;
}

std::size_t Prompt::last_relation() const {
  auto p = find_last(PositionTag::LastRelation);
  if (!p) throw ValidationError("prompt has no last-relation position");
  return *p;
}

Prompt with_prefix(const Prompt& prompt, const TokenSeq& prefix) {
  Prompt out;
  out.tokens = prefix;
  out.tags.assign(prefix.size(), PositionTag::Other);
  out.tokens.insert(out.tokens.end(), prompt.tokens.begin(), prompt.tokens.end());
  out.tags.insert(out.tags.end(), prompt.tags.begin(), prompt.tags.end());
  return out;
}

// ---------------------------------------------------------------------------

FactWorld FactWorld::build(const WorldSpec& spec) {
  if (spec.n_subjects < 4) throw ValidationError("world: n_subjects must be >= 4");
  if (spec.n_relations < 2) throw ValidationError("world: n_relations must be >= 2");
  if (spec.objects_per_relation < 2) throw ValidationError("world: objects_per_relation must be >= 2");
  if (spec.relations_per_pool == 0) throw ValidationError("world: relations_per_pool must be >= 1");
  if (spec.name_parts == 1) throw ValidationError("world: name_parts must be 0 or >= 2");
  if (spec.multi_token_fraction < 0.0 || spec.multi_token_fraction > 1.0) {
    throw ValidationError("world: multi_token_fraction must be in [0, 1]");
  }

  Rng rng(spec.seed);
  FactWorld w;
  w.spec_ = spec;
  w.fillers_ = default_fillers();

  std::set<std::string> used(w.fillers_.begin(), w.fillers_.end());
  const auto& curated = curated_relations();
  for (const auto& rs : curated) {
    for (const auto& p : rs.phrases)
      for (const auto& word : split_words(p)) used.insert(word);
    for (const auto& word : split_words(rs.prefix)) used.insert(word);
  }
  NameMaker names(rng, used);

  for (std::size_t r = 0; r < spec.n_relations; ++r) {
    Relation rel;
    if (r < curated.size()) {
      rel.name = curated[r].name;
      rel.phrases = curated[r].phrases;
      rel.prefix = curated[r].prefix;
    } else {
      rel.name = "relation" + std::to_string(r);
      const std::string a = names.make(2, false), b = names.make(2, false), c = names.make(2, false);
      rel.phrases = {a, b + " " + c};
      rel.prefix = "The " + names.make(2, false) + " of";
    }
    w.relations_.push_back(std::move(rel));
  }

  // Object inventories, shared within each pool of relations.
  for (std::size_t r = 0; r < spec.n_relations; ++r) {
    if (r % spec.relations_per_pool == 0) {
      for (std::size_t k = 0; k < spec.objects_per_relation; ++k) {
        w.relations_[r].objects.push_back(w.objects_.size());
        w.objects_.push_back(names.make(2, false));
      }
    } else {
      w.relations_[r].objects = w.relations_[r - r % spec.relations_per_pool].objects;
    }
  }

  const auto n_multi = static_cast<std::size_t>(spec.multi_token_fraction * static_cast<double>(spec.n_subjects) + 0.5);
  std::vector<std::string> part_pool;
  for (std::size_t i = 0; i < spec.name_parts; ++i) part_pool.push_back(names.make(2, true));
  std::set<std::string> full_names;
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    if (s < n_multi) {
      // Alternate two- and three-token names so every subject category occurs.
      const std::size_t parts = (s % 2 == 0) ? 2 : 3;
      std::string name;
      for (std::size_t attempt = 0;; ++attempt) {
        if (attempt == 10000) throw ValidationError("world: name_parts too small for the number of subjects");
        name.clear();
        for (std::size_t p = 0; p < parts; ++p) {
          name += (p ? " " : "") + (part_pool.empty() ? names.make(2, true) : part_pool[rng.below(part_pool.size())]);
        }
        if (full_names.insert(name).second) break;
      }
      w.subjects_.push_back(name);
    } else {
      w.subjects_.push_back(names.make(3, true));
    }
  }
  // Interleave multi-token subjects with the rest.
  rng.shuffle(w.subjects_);

  w.table_.assign(spec.n_subjects * spec.n_relations, 0);
  for (std::size_t r = 0; r < spec.n_relations; ++r) {
    const auto& inv = w.relations_[r].objects;
    for (;;) {
      std::set<std::size_t> distinct;
      for (std::size_t s = 0; s < spec.n_subjects; ++s) {
        w.table_[s * spec.n_relations + r] = inv[rng.below(inv.size())];
        distinct.insert(w.table_[s * spec.n_relations + r]);
      }
      if (distinct.size() >= 2) break;
    }
  }
  w.finalize();
  return w;
}

FactWorld FactWorld::from_inventories(std::vector<std::string> subjects, std::vector<Relation> relations,
                                      std::vector<std::string> objects, std::vector<std::vector<std::size_t>> facts,
                                      std::vector<std::string> fillers, std::uint64_t seed) {
  FactWorld w;
  w.spec_.n_subjects = subjects.size();
  w.spec_.n_relations = relations.size();
  w.spec_.objects_per_relation = relations.empty() ? 0 : relations[0].objects.size();
  w.spec_.multi_token_fraction = 0.0;
  w.spec_.seed = seed;
  w.subjects_ = std::move(subjects);
  w.relations_ = std::move(relations);
  w.objects_ = std::move(objects);
  w.fillers_ = std::move(fillers);
  if (facts.size() != w.subjects_.size()) throw ValidationError("world: fact table row count mismatch");
  for (std::size_t s = 0; s < facts.size(); ++s) {
    if (facts[s].size() != w.relations_.size()) throw ValidationError("world: fact table column count mismatch");
    for (std::size_t r = 0; r < facts[s].size(); ++r) {
      const auto& inv = w.relations_[r].objects;
      if (std::find(inv.begin(), inv.end(), facts[s][r]) == inv.end()) {
        throw ValidationError("world: object of subject " + std::to_string(s) + " not in inventory of relation " +
                              std::to_string(r));
      }
      w.table_.push_back(facts[s][r]);
    }
  }
  w.finalize();
  return w;
}

void FactWorld::finalize() {
  std::vector<std::string> vocab;
  std::set<std::string> seen;
  auto add = [&](const std::string& text) {
    for (const auto& word : split_words(text)) {
      if (seen.insert(word).second) vocab.push_back(word);
    }
  };
  for (const auto& f : fillers_) add(f);
  for (const auto& r : relations_) {
    for (const auto& p : r.phrases) add(p);
    add(r.prefix);
  }
  for (const auto& s : subjects_) add(s);
  for (const auto& o : objects_) {
    if (split_words(o).size() != 1) throw ValidationError("world: objects must be single words, got '" + o + "'");
    if (seen.count(o)) throw ValidationError("world: object word '" + o + "' collides with another surface form");
    add(o);
  }
  tokenizer_ = Tokenizer(std::move(vocab));
  for (const auto& r : relations_) {
    if (r.phrases.empty()) throw ValidationError("world: relation '" + r.name + "' has no phrasing");
    for (const auto& p : r.phrases) {
      if (split_words(p).empty()) throw ValidationError("world: empty phrasing in relation '" + r.name + "'");
    }
  }
  for (const auto& s : subjects_) {
    if (split_words(s).empty()) throw ValidationError("world: empty subject surface form");
  }
}

std::size_t FactWorld::object_of(std::size_t subject, std::size_t relation) const {
  if (subject >= subjects_.size() || relation >= relations_.size()) throw ValidationError("fact index out of range");
  return table_[subject * relations_.size() + relation];
}

FactTriple FactWorld::fact(std::size_t index) const {
  const std::size_t s = index / relations_.size(), r = index % relations_.size();
  return {s, r, object_of(s, r)};
}

std::vector<FactTriple> FactWorld::facts() const {
  std::vector<FactTriple> out;
  for (std::size_t i = 0; i < num_facts(); ++i) out.push_back(fact(i));
  return out;
}

TokenId FactWorld::object_token(std::size_t object) const { return tokenizer_.id(objects_.at(object)); }

std::vector<PromptTemplate> FactWorld::templates(std::size_t relation) const {
  std::vector<PromptTemplate> out;
  for (std::size_t p = 0; p < relations_.at(relation).phrases.size(); ++p) {
    out.push_back({TemplateKind::SubjectFirst, p});
  }
  if (!relations_.at(relation).prefix.empty()) out.push_back({TemplateKind::RelationFirst, 0});
  return out;
}

namespace {

void append_span(Prompt& prompt, const TokenSeq& span, PositionTag first, PositionTag mid, PositionTag last) {
  for (std::size_t i = 0; i < span.size(); ++i) {
    prompt.tokens.push_back(span[i]);
    if (i + 1 == span.size()) {
      prompt.tags.push_back(last);
    } else if (i == 0) {
      prompt.tags.push_back(first);
    } else {
      prompt.tags.push_back(mid);
    }
  }
}

}  // namespace

Prompt FactWorld::render_prompt(std::size_t subject, std::size_t relation, PromptTemplate tmpl) const {
  const Relation& rel = relations_.at(relation);
  const TokenSeq subj = tokenizer_.encode(subjects_.at(subject));
  Prompt p;
  if (tmpl.kind == TemplateKind::SubjectFirst) {
    if (tmpl.phrasing >= rel.phrases.size()) throw ValidationError("unknown phrasing for relation " + rel.name);
    append_span(p, subj, PositionTag::FirstSubject, PositionTag::MidSubject, PositionTag::LastSubject);
    append_span(p, tokenizer_.encode(rel.phrases[tmpl.phrasing]), PositionTag::FirstRelation, PositionTag::MidRelation,
                PositionTag::LastRelation);
  } else {
    if (rel.prefix.empty()) throw ValidationError("relation " + rel.name + " has no relation-first form");
    for (TokenId t : tokenizer_.encode(rel.prefix)) {
      p.tokens.push_back(t);
      p.tags.push_back(PositionTag::RelationPrefix);
    }
    append_span(p, subj, PositionTag::FirstSubject, PositionTag::MidSubject, PositionTag::LastSubject);
  }
  return p;
}

Prompt FactWorld::subject_prompt(std::size_t subject) const {
  Prompt p;
  append_span(p, tokenizer_.encode(subjects_.at(subject)), PositionTag::FirstSubject, PositionTag::MidSubject,
              PositionTag::LastSubject);
  return p;
}

std::string FactWorld::hash() const {
  nlohmann::json j = header_json(*this);
  j["table"] = table_;
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------

std::vector<Prompt> EditRequest::prefixed_rewrites() const {
  std::vector<Prompt> out;
  for (const TokenSeq& prefix : prefixes) out.push_back(with_prefix(rewrite, prefix));
  return out;
}

EditRequest make_edit_request(const FactWorld& world, const FactTriple& fact, std::size_t new_object,
                              std::uint64_t seed, std::size_t id) {
  const std::size_t s = fact.subject, r = fact.relation;
  if (new_object == fact.object) throw ValidationError("edit request: new object equals the current object");
  Rng rng(mix_seed(seed, s * world.relations().size() + r));

  EditRequest req;
  req.id = id;
  req.fact = fact;
  req.new_object = new_object;
  req.new_object_token = world.object_token(new_object);
  req.rewrite = world.render_prompt(s, r, {TemplateKind::SubjectFirst, 0});
  for (const PromptTemplate& t : world.templates(r)) {
    if (t.kind == TemplateKind::SubjectFirst && t.phrasing == 0) continue;
    req.paraphrases.push_back(world.render_prompt(s, r, t));
  }

  std::vector<std::size_t> neighbors;
  for (std::size_t other = 0; other < world.subjects().size(); ++other) {
    if (other != s && world.object_of(other, r) != new_object) neighbors.push_back(other);
  }
  rng.shuffle(neighbors);
  neighbors.resize(std::min(neighbors.size(), kMaxNeighborhoodProbes));
  std::sort(neighbors.begin(), neighbors.end());
  for (std::size_t other : neighbors) {
    req.neighborhood.push_back(
        {other, r, world.object_of(other, r), world.render_prompt(other, r, {TemplateKind::SubjectFirst, 0})});
  }
  for (std::size_t other = 0; other < world.relations().size(); ++other) {
    if (other == r) continue;
    if (world.object_of(s, other) == new_object) continue;  // shared pools: o* is the true answer there
    req.relation_probes.push_back(
        {s, other, world.object_of(s, other), world.render_prompt(s, other, {TemplateKind::SubjectFirst, 0})});
  }

  req.prefixes.push_back({});
  if (world.fillers().empty()) throw ValidationError("edit request: world has no filler words for prefixes");
  while (req.prefixes.size() < kNumPrefixes) {
    TokenSeq prefix(1 + rng.below(3));
    for (TokenId& t : prefix) t = world.tokenizer().id(world.fillers()[rng.below(world.fillers().size())]);
    req.prefixes.push_back(std::move(prefix));
  }

  if (req.paraphrases.empty()) throw ValidationError("edit request: needs >= 1 paraphrase");
  if (req.neighborhood.size() < 3) throw ValidationError("edit request: needs >= 3 neighborhood probes");
  if (req.relation_probes.size() < 3) throw ValidationError("edit request: needs >= 3 relation probes");
  return req;
}

EditRequestStream::EditRequestStream(const FactWorld& world, std::uint64_t seed) : world_(world), seed_(seed) {
  order_.resize(world.num_facts());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng(seed);
  rng.shuffle(order_);
}

std::optional<EditRequest> EditRequestStream::next() {
  while (cursor_ < order_.size()) {
    const FactTriple fact = world_.fact(order_[cursor_++]);
    const auto& inv = world_.relations()[fact.relation].objects;
    std::vector<std::size_t> choices;
    for (std::size_t o : inv) {
      if (o != fact.object) choices.push_back(o);
    }
    if (choices.empty()) {
      skipped_.push_back(fact);
      continue;
    }
    Rng rng(mix_seed(seed_ ^ 0x5eedULL, order_[cursor_ - 1]));
    const std::size_t new_object = choices[rng.below(choices.size())];
    try {
      return make_edit_request(world_, fact, new_object, seed_, issued_++);
    } catch (const ValidationError&) {
      --issued_;
      skipped_.push_back(fact);
    }
  }
  return std::nullopt;
}

EditSampling sample_edit_requests(const FactWorld& world, std::size_t n, std::uint64_t seed) {
  if (n > world.num_facts()) {
    throw ValidationError("sample_edit_requests: n=" + std::to_string(n) + " exceeds " +
                          std::to_string(world.num_facts()) + " facts");
  }
  EditRequestStream stream(world, seed);
  EditSampling out;
  while (out.requests.size() < n) {
    auto req = stream.next();
    if (!req) break;
    out.requests.push_back(std::move(*req));
  }
  out.skipped = stream.skipped();
  return out;
}

// ---------------------------------------------------------------------------

void write_world_jsonl(const FactWorld& world, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open world file for writing: " + path.string());
  out << header_json(world).dump() << '\n';
  for (const FactTriple& f : world.facts()) {
    const Relation& rel = world.relations()[f.relation];
    nlohmann::json rec = {{"type", "fact"},
                          {"subject", f.subject},
                          {"relation", f.relation},
                          {"object", f.object},
                          {"surface",
                           {{"subject", world.subjects()[f.subject]},
                            {"relation", rel.phrases[0]},
                            {"object", world.objects()[f.object]}}}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing world file: " + path.string());
}

FactWorld read_world_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open world file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("world file is empty: " + path.string());
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("type") != "header") throw IoError("world file: first record is not a header");
    std::vector<Relation> relations;
    for (const auto& r : header.at("relations")) {
      relations.push_back({r.at("name").get<std::string>(), r.at("phrases").get<std::vector<std::string>>(),
                           r.at("prefix").get<std::string>(), r.at("objects").get<std::vector<std::size_t>>()});
    }
    auto subjects = header.at("subjects").get<std::vector<std::string>>();
    std::vector<std::vector<std::size_t>> facts(subjects.size(), std::vector<std::size_t>(relations.size(), 0));
    std::size_t count = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      facts.at(rec.at("subject").get<std::size_t>()).at(rec.at("relation").get<std::size_t>()) =
          rec.at("object").get<std::size_t>();
      ++count;
    }
    if (count != subjects.size() * relations.size()) {
      throw IoError("world file: expected " + std::to_string(subjects.size() * relations.size()) + " facts, found " +
                    std::to_string(count));
    }
    FactWorld w = FactWorld::from_inventories(std::move(subjects), std::move(relations),
                                   header.at("objects").get<std::vector<std::string>>(), std::move(facts),
                                   header.at("fillers").get<std::vector<std::string>>(), header.at("seed"));
    const auto& spec = header.at("spec");
    w.spec_.n_subjects = spec.at("n_subjects");
    w.spec_.n_relations = spec.at("n_relations");
    w.spec_.objects_per_relation = spec.at("objects_per_relation");
    w.spec_.multi_token_fraction = spec.at("multi_token_fraction");
    w.spec_.relations_per_pool = spec.at("relations_per_pool");
    w.spec_.name_parts = spec.value("name_parts", std::size_t{0});
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("world file " + path.string() + ": " + e.what());
  }
}

}  // namespace cpa
