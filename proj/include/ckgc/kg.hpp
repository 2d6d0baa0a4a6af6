#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ckgc/errors.hpp"

namespace ckgc {

// Reference to an entity of one KG: (owning KG index, dense local id).
struct EntityRef {
  uint32_t kg_id = 0;
  uint32_t local_id = 0;

  friend bool operator==(const EntityRef&, const EntityRef&) = default;
  friend auto operator<=>(const EntityRef&, const EntityRef&) = default;
};

struct RelationRef {
  uint32_t kg_id = 0;
  uint32_t local_id = 0;

  friend bool operator==(const RelationRef&, const RelationRef&) = default;
  friend auto operator<=>(const RelationRef&, const RelationRef&) = default;
};

struct Triple {
  EntityRef head;
  RelationRef relation;
  EntityRef tail;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

// Cross-KG equivalence pair, stored with the smaller kg_id on the left.
struct SeedAlignment {
  EntityRef left;
  EntityRef right;

  friend bool operator==(const SeedAlignment&, const SeedAlignment&) = default;
  friend auto operator<=>(const SeedAlignment&, const SeedAlignment&) = default;
};

// Puts the smaller kg_id first. Throws DataError if both sides live in the
// same KG.
SeedAlignment make_alignment(EntityRef a, EntityRef b);

// Triple with ids local to one KG (the KG is implied by context).
struct LocalTriple {
  uint32_t head = 0;
  uint32_t rel = 0;
  uint32_t tail = 0;

  friend bool operator==(const LocalTriple&, const LocalTriple&) = default;
  friend auto operator<=>(const LocalTriple&, const LocalTriple&) = default;
};

struct KgData {
  std::string name;
  std::vector<std::string> entity_names;
  std::vector<std::string> relation_names;
  std::vector<LocalTriple> train;
  std::vector<LocalTriple> valid;
  std::vector<LocalTriple> test;

  uint32_t n_entities() const { return static_cast<uint32_t>(entity_names.size()); }
  uint32_t n_relations() const { return static_cast<uint32_t>(relation_names.size()); }
};

// The union of the individual KGs re-indexed into one dense id space.
// Only training triples enter `triples`; alignments are kept separate and
// expanded to both directions by the encoder, not here.
struct FusedKg {
  struct GlobalTriple {
    uint32_t head = 0;
    uint32_t rel = 0;
    uint32_t tail = 0;
    uint32_t kg = 0;  // source KG
  };

  std::vector<uint32_t> entity_offset;    // size m+1, prefix sums over |E_i|
  std::vector<uint32_t> relation_offset;  // size m+1, prefix sums over |R_i|
  uint32_t n_entities = 0;
  uint32_t n_relations = 0;  // sum of |R_i| plus the reserved ALIGN relation
  uint32_t align_rel_id = 0;
  std::vector<GlobalTriple> triples;
  std::vector<std::pair<uint32_t, uint32_t>> align_edges;  // global entity ids

  // Relation parameter sharing: maps a global relation id to the row of the
  // fused model's relation table. Identity when schemas are disjoint; with a
  // shared schema all KGs collapse onto one row set.
  std::vector<uint32_t> rel_param_of_global;
  uint32_t n_rel_param = 0;

  uint32_t to_global(EntityRef e) const { return entity_offset[e.kg_id] + e.local_id; }
  EntityRef to_local(uint32_t global_id) const;
  uint32_t rel_to_global(RelationRef r) const { return relation_offset[r.kg_id] + r.local_id; }
  RelationRef rel_to_local(uint32_t global_rel) const;
};

struct MultiKgStore {
  std::string name;
  bool shared_relation_schema = false;
  std::vector<KgData> kgs;
  std::vector<SeedAlignment> alignments;  // canonical, sorted, duplicate-free
  std::optional<FusedKg> fused;
  std::vector<std::string> warnings;  // e.g. entities seen only in held-out splits

  uint32_t n_kgs() const { return static_cast<uint32_t>(kgs.size()); }
  int kg_index(const std::string& kg_name) const;  // -1 when absent
};

// Checks every MultiKgStore invariant (id ranges, split disjointness,
// alignment canonical form). Throws DataError on violation.
void validate_store(const MultiKgStore& store);

// Builds the fused KG from training triples and alignments. Requires >= 2 KGs.
FusedKg build_fused_kg(const MultiKgStore& store);

// One application of the parameter-swapping meta-path over training triples.
// Requires a shared relation schema. Returns new triples only, sorted.
std::vector<Triple> parameter_swap_triples(const MultiKgStore& store);

// Cross-KG pairs implied by alignment transitivity that are not yet present,
// sorted. Computed from connected components of the alignment graph.
std::vector<SeedAlignment> alignment_closure(const MultiKgStore& store);

struct ComponentReport {
  std::map<size_t, size_t> histogram;  // component size -> count
  struct Component {
    std::vector<EntityRef> members;  // sorted
  };
  std::vector<Component> flagged;  // components with size > threshold
  size_t threshold = 0;
};

constexpr size_t kDefaultComponentFlagThreshold = 50;

ComponentReport alignment_component_report(const MultiKgStore& store,
                                           size_t threshold = kDefaultComponentFlagThreshold);

}  // namespace ckgc
