#include "ckgc/kg.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

namespace ckgc {

namespace {

// 64-bit key for a (kg, local) pair; kg counts stay well under 2^16.
uint64_t ref_key(EntityRef e) {
  return (static_cast<uint64_t>(e.kg_id) << 40) | e.local_id;
}

uint64_t triple_key(const LocalTriple& t, uint64_t n_entities) {
  return (static_cast<uint64_t>(t.rel) * n_entities + t.head) * n_entities + t.tail;
}

// Weighted union-find with path compression.
class UnionFind {
 public:
  explicit UnionFind(size_t n) : parent_(n), size_(n, 1) {
    for (size_t i = 0; i < n; ++i) parent_[i] = i;
  }

  size_t find(size_t x) {
    size_t r = x;
    while (parent_[r] != r) r = parent_[r];
    while (parent_[x] != r) {
      size_t next = parent_[x];
      parent_[x] = r;
      x = next;
    }
    return r;
  }

  void unite(size_t a, size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
  }

 private:
  std::vector<size_t> parent_;
  std::vector<size_t> size_;
};

std::vector<uint32_t> entity_offsets(const MultiKgStore& store) {
  std::vector<uint32_t> off(store.kgs.size() + 1, 0);
  for (size_t i = 0; i < store.kgs.size(); ++i)
    off[i + 1] = off[i] + store.kgs[i].n_entities();
  return off;
}

void require_shared_schema(const MultiKgStore& store) {
  if (!store.shared_relation_schema)
    throw DataError("store '" + store.name +
                    "' does not declare a shared relation schema; "
                    "parameter swapping needs compatible relation ids");
  for (size_t i = 1; i < store.kgs.size(); ++i) {
    if (store.kgs[i].n_relations() != store.kgs[0].n_relations())
      throw DataError("shared relation schema declared but relation counts differ: " +
                      store.kgs[0].name + " has " +
                      std::to_string(store.kgs[0].n_relations()) + ", " +
                      store.kgs[i].name + " has " +
                      std::to_string(store.kgs[i].n_relations()));
  }
}

}  // namespace

SeedAlignment make_alignment(EntityRef a, EntityRef b) {
  if (a.kg_id == b.kg_id)
    throw DataError("alignment endpoints must belong to different KGs (kg " +
                    std::to_string(a.kg_id) + ")");
  if (b.kg_id < a.kg_id) std::swap(a, b);
  return SeedAlignment{a, b};
}

int MultiKgStore::kg_index(const std::string& kg_name) const {
  for (size_t i = 0; i < kgs.size(); ++i)
    if (kgs[i].name == kg_name) return static_cast<int>(i);
  return -1;
}

EntityRef FusedKg::to_local(uint32_t global_id) const {
  auto it = std::upper_bound(entity_offset.begin(), entity_offset.end(), global_id);
  uint32_t kg = static_cast<uint32_t>(it - entity_offset.begin()) - 1;
  return EntityRef{kg, global_id - entity_offset[kg]};
}

RelationRef FusedKg::rel_to_local(uint32_t global_rel) const {
  auto it = std::upper_bound(relation_offset.begin(), relation_offset.end(), global_rel);
  uint32_t kg = static_cast<uint32_t>(it - relation_offset.begin()) - 1;
  return RelationRef{kg, global_rel - relation_offset[kg]};
}

void validate_store(const MultiKgStore& store) {
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    const KgData& kg = store.kgs[k];
    const uint64_t ne = kg.n_entities();
    const uint64_t nr = kg.n_relations();
    auto check_split = [&](const std::vector<LocalTriple>& split, const char* tag) {
      for (const LocalTriple& t : split) {
        if (t.head >= ne || t.tail >= ne)
          throw DataError("KG '" + kg.name + "' " + tag + ": entity id out of range");
        if (t.rel >= nr)
          throw DataError("KG '" + kg.name + "' " + tag + ": relation id out of range");
      }
    };
    check_split(kg.train, "train");
    check_split(kg.valid, "valid");
    check_split(kg.test, "test");

    std::unordered_set<uint64_t> seen;
    seen.reserve(kg.train.size() + kg.valid.size());
    for (const LocalTriple& t : kg.train) seen.insert(triple_key(t, ne));
    for (const LocalTriple& t : kg.valid)
      if (!seen.insert(triple_key(t, ne)).second)
        throw DataError("KG '" + kg.name + "': train/valid splits are not disjoint");
    for (const LocalTriple& t : kg.test)
      if (!seen.insert(triple_key(t, ne)).second)
        throw DataError("KG '" + kg.name + "': test split overlaps train or valid");
  }

  std::set<SeedAlignment> seen_align;
  for (const SeedAlignment& a : store.alignments) {
    if (a.left.kg_id >= store.n_kgs() || a.right.kg_id >= store.n_kgs())
      throw DataError("alignment references unknown KG index");
    if (a.left.kg_id >= a.right.kg_id)
      throw DataError("alignment not in canonical order (smaller kg_id first)");
    if (a.left.local_id >= store.kgs[a.left.kg_id].n_entities() ||
        a.right.local_id >= store.kgs[a.right.kg_id].n_entities())
      throw DataError("alignment references an out-of-range entity");
    if (!seen_align.insert(a).second) throw DataError("duplicate alignment");
  }
}

FusedKg build_fused_kg(const MultiKgStore& store) {
  if (store.n_kgs() < 2)
    throw DataError("fused KG requires at least 2 KGs, store has " +
                    std::to_string(store.n_kgs()));
  validate_store(store);

  FusedKg fused;
  fused.entity_offset = entity_offsets(store);
  fused.relation_offset.assign(store.kgs.size() + 1, 0);
  for (size_t i = 0; i < store.kgs.size(); ++i)
    fused.relation_offset[i + 1] = fused.relation_offset[i] + store.kgs[i].n_relations();

  fused.n_entities = fused.entity_offset.back();
  fused.n_relations = fused.relation_offset.back() + 1;
  fused.align_rel_id = fused.n_relations - 1;

  size_t total_train = 0;
  for (const KgData& kg : store.kgs) total_train += kg.train.size();
  fused.triples.reserve(total_train);
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    const uint32_t eo = fused.entity_offset[k];
    const uint32_t ro = fused.relation_offset[k];
    for (const LocalTriple& t : store.kgs[k].train)
      fused.triples.push_back({eo + t.head, ro + t.rel, eo + t.tail, k});
  }

  fused.align_edges.reserve(store.alignments.size());
  for (const SeedAlignment& a : store.alignments)
    fused.align_edges.emplace_back(fused.to_global(a.left), fused.to_global(a.right));

  if (store.shared_relation_schema) {
    require_shared_schema(store);
    const uint32_t shared = store.kgs.empty() ? 0 : store.kgs[0].n_relations();
    fused.n_rel_param = shared + 1;
    fused.rel_param_of_global.resize(fused.n_relations);
    for (uint32_t k = 0; k < store.n_kgs(); ++k)
      for (uint32_t r = 0; r < store.kgs[k].n_relations(); ++r)
        fused.rel_param_of_global[fused.relation_offset[k] + r] = r;
    fused.rel_param_of_global[fused.align_rel_id] = shared;
  } else {
    fused.n_rel_param = fused.n_relations;
    fused.rel_param_of_global.resize(fused.n_relations);
    for (uint32_t r = 0; r < fused.n_relations; ++r) fused.rel_param_of_global[r] = r;
  }

  return fused;
}

std::vector<Triple> parameter_swap_triples(const MultiKgStore& store) {
  require_shared_schema(store);
  validate_store(store);

  // Counterparts of each aligned entity, both directions.
  std::map<uint64_t, std::vector<EntityRef>> counterparts;
  for (const SeedAlignment& a : store.alignments) {
    counterparts[ref_key(a.left)].push_back(a.right);
    counterparts[ref_key(a.right)].push_back(a.left);
  }

  // Training triples per KG for the already-present check.
  std::vector<std::unordered_set<uint64_t>> train_sets(store.n_kgs());
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    const uint64_t ne = store.kgs[k].n_entities();
    train_sets[k].reserve(store.kgs[k].train.size());
    for (const LocalTriple& t : store.kgs[k].train)
      train_sets[k].insert(triple_key(t, ne));
  }

  std::set<Triple> result;
  std::vector<EntityRef> heads, tails;
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    for (const LocalTriple& t : store.kgs[k].train) {
      const EntityRef head{k, t.head};
      const EntityRef tail{k, t.tail};

      heads.clear();
      heads.push_back(head);
      if (auto it = counterparts.find(ref_key(head)); it != counterparts.end())
        heads.insert(heads.end(), it->second.begin(), it->second.end());
      tails.clear();
      tails.push_back(tail);
      if (auto it = counterparts.find(ref_key(tail)); it != counterparts.end())
        tails.insert(tails.end(), it->second.begin(), it->second.end());

      for (const EntityRef& h : heads) {
        for (const EntityRef& ta : tails) {
          // Both endpoints must resolve into the same target KG.
          if (h.kg_id != ta.kg_id) continue;
          const uint32_t target = h.kg_id;
          const LocalTriple cand{h.local_id, t.rel, ta.local_id};
          if (train_sets[target].count(
                  triple_key(cand, store.kgs[target].n_entities())))
            continue;
          result.insert(Triple{h, RelationRef{target, t.rel}, ta});
        }
      }
    }
  }
  return {result.begin(), result.end()};
}

namespace {

// Union-find components over entities that appear in at least one alignment.
// Returns (components as sorted member lists), sorted by first member.
std::vector<std::vector<EntityRef>> alignment_components(const MultiKgStore& store) {
  const std::vector<uint32_t> off = entity_offsets(store);
  UnionFind uf(off.back());
  std::vector<char> mentioned(off.back(), 0);
  for (const SeedAlignment& a : store.alignments) {
    const uint32_t l = off[a.left.kg_id] + a.left.local_id;
    const uint32_t r = off[a.right.kg_id] + a.right.local_id;
    mentioned[l] = mentioned[r] = 1;
    uf.unite(l, r);
  }

  std::map<size_t, std::vector<EntityRef>> by_root;
  for (uint32_t g = 0; g < off.back(); ++g) {
    if (!mentioned[g]) continue;
    const uint32_t kg =
        static_cast<uint32_t>(std::upper_bound(off.begin(), off.end(), g) - off.begin()) - 1;
    by_root[uf.find(g)].push_back(EntityRef{kg, g - off[kg]});
  }

  std::vector<std::vector<EntityRef>> comps;
  comps.reserve(by_root.size());
  for (auto& [root, members] : by_root) comps.push_back(std::move(members));
  return comps;  // members sorted by global id; components by smallest member
}

}  // namespace

std::vector<SeedAlignment> alignment_closure(const MultiKgStore& store) {
  if (store.n_kgs() < 2) throw DataError("alignment closure requires at least 2 KGs");
  validate_store(store);

  std::set<SeedAlignment> existing(store.alignments.begin(), store.alignments.end());
  std::set<SeedAlignment> result;
  for (const std::vector<EntityRef>& comp : alignment_components(store)) {
    for (size_t i = 0; i < comp.size(); ++i) {
      for (size_t j = i + 1; j < comp.size(); ++j) {
        if (comp[i].kg_id == comp[j].kg_id) continue;  // closure is cross-KG only
        SeedAlignment a = make_alignment(comp[i], comp[j]);
        if (!existing.count(a)) result.insert(a);
      }
    }
  }
  return {result.begin(), result.end()};
}

ComponentReport alignment_component_report(const MultiKgStore& store, size_t threshold) {
  validate_store(store);
  ComponentReport report;
  report.threshold = threshold;
  for (std::vector<EntityRef>& comp : alignment_components(store)) {
    report.histogram[comp.size()] += 1;
    if (comp.size() > threshold)
      report.flagged.push_back(ComponentReport::Component{std::move(comp)});
  }
  std::sort(report.flagged.begin(), report.flagged.end(),
            [](const auto& a, const auto& b) {
              return a.members.size() != b.members.size()
                         ? a.members.size() > b.members.size()
                         : a.members < b.members;
            });
  return report;
}

}  // namespace ckgc
