#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <ckgc/errors.hpp>
#include <ckgc/kg.hpp>
#include <ckgc/rng.hpp>

using namespace ckgc;

namespace {

KgData simple_kg(const std::string& name, uint32_t n_ent, uint32_t n_rel) {
  KgData kg;
  kg.name = name;
  for (uint32_t e = 0; e < n_ent; ++e)
    kg.entity_names.push_back(name + "_e" + std::to_string(e));
  for (uint32_t r = 0; r < n_rel; ++r) kg.relation_names.push_back("r" + std::to_string(r));
  return kg;
}

// Random store with a shared relation vocabulary, suitable for the swap and
// closure oracles.
MultiKgStore random_store(uint64_t seed, uint32_t max_entities = 30) {
  Rng rng(seed);
  MultiKgStore store;
  store.name = "rand";
  store.shared_relation_schema = true;
  const uint32_t m = 2 + static_cast<uint32_t>(rng.uniform(2));
  const uint32_t n_rel = 1 + static_cast<uint32_t>(rng.uniform(4));

  for (uint32_t k = 0; k < m; ++k) {
    KgData kg = simple_kg("kg" + std::to_string(k),
                          3 + static_cast<uint32_t>(rng.uniform(max_entities)), n_rel);
    std::set<LocalTriple> seen;
    const uint32_t n_triples =
        kg.n_entities() + static_cast<uint32_t>(rng.uniform(2 * kg.n_entities()));
    for (uint32_t i = 0; i < n_triples; ++i) {
      LocalTriple t{static_cast<uint32_t>(rng.uniform(kg.n_entities())),
                    static_cast<uint32_t>(rng.uniform(n_rel)),
                    static_cast<uint32_t>(rng.uniform(kg.n_entities()))};
      if (seen.insert(t).second) kg.train.push_back(t);
    }
    store.kgs.push_back(std::move(kg));
  }

  std::set<SeedAlignment> aligns;
  const uint32_t n_align = 1 + static_cast<uint32_t>(rng.uniform(20));
  for (uint32_t i = 0; i < n_align; ++i) {
    const uint32_t a = static_cast<uint32_t>(rng.uniform(m));
    const uint32_t b = static_cast<uint32_t>(rng.uniform(m));
    if (a == b) continue;
    aligns.insert(make_alignment(
        {a, static_cast<uint32_t>(rng.uniform(store.kgs[a].n_entities()))},
        {b, static_cast<uint32_t>(rng.uniform(store.kgs[b].n_entities()))}));
  }
  store.alignments.assign(aligns.begin(), aligns.end());
  return store;
}

// Brute-force swap: enumerate (alignment, triple, alignment) combinations.
std::vector<Triple> oracle_swap(const MultiKgStore& store) {
  auto counterparts_in = [&](EntityRef e, uint32_t target) {
    std::vector<uint32_t> out;
    for (const SeedAlignment& a : store.alignments) {
      if (a.left == e && a.right.kg_id == target) out.push_back(a.right.local_id);
      if (a.right == e && a.left.kg_id == target) out.push_back(a.left.local_id);
    }
    return out;
  };
  std::set<Triple> result;
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    for (const LocalTriple& t : store.kgs[k].train) {
      for (uint32_t target = 0; target < store.n_kgs(); ++target) {
        if (target == k) continue;
        for (uint32_t h : counterparts_in({k, t.head}, target)) {
          for (uint32_t ta : counterparts_in({k, t.tail}, target)) {
            const LocalTriple cand{h, t.rel, ta};
            bool present = false;
            for (const LocalTriple& e : store.kgs[target].train)
              if (e == cand) present = true;
            if (!present)
              result.insert(Triple{{target, h}, RelationRef{target, t.rel}, {target, ta}});
          }
        }
      }
    }
  }
  return {result.begin(), result.end()};
}

// Union-find oracle for the closure.
std::vector<SeedAlignment> oracle_closure(const MultiKgStore& store) {
  std::map<std::pair<uint32_t, uint32_t>, size_t> id_of;
  std::vector<EntityRef> nodes;
  auto node = [&](EntityRef e) {
    auto [it, fresh] = id_of.try_emplace({e.kg_id, e.local_id}, nodes.size());
    if (fresh) nodes.push_back(e);
    return it->second;
  };
  std::vector<size_t> parent;
  std::function<size_t(size_t)> find = [&](size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const SeedAlignment& a : store.alignments) {
    node(a.left);
    node(a.right);
  }
  parent.resize(nodes.size());
  for (size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  for (const SeedAlignment& a : store.alignments)
    parent[find(node(a.left))] = find(node(a.right));

  std::map<size_t, std::vector<EntityRef>> comps;
  for (size_t i = 0; i < nodes.size(); ++i) comps[find(i)].push_back(nodes[i]);
  std::set<SeedAlignment> existing(store.alignments.begin(), store.alignments.end());
  std::set<SeedAlignment> out;
  for (auto& [root, members] : comps) {
    for (size_t i = 0; i < members.size(); ++i)
      for (size_t j = i + 1; j < members.size(); ++j)
        if (members[i].kg_id != members[j].kg_id) {
          SeedAlignment a = make_alignment(members[i], members[j]);
          if (!existing.count(a)) out.insert(a);
        }
  }
  return {out.begin(), out.end()};
}

}  // namespace

TEST_CASE("make_alignment canonicalizes and rejects same-KG pairs") {
  SeedAlignment a = make_alignment({2, 5}, {0, 7});
  CHECK(a.left.kg_id == 0);
  CHECK(a.left.local_id == 7);
  CHECK(a.right.kg_id == 2);
  CHECK(a.right.local_id == 5);
  CHECK_THROWS_AS(make_alignment({1, 3}, {1, 4}), DataError);
}

TEST_CASE("validate_store rejects malformed stores") {
  MultiKgStore store;
  store.kgs.push_back(simple_kg("a", 3, 2));
  store.kgs.push_back(simple_kg("b", 4, 2));
  store.kgs[0].train = {{0, 0, 1}, {1, 1, 2}};
  store.kgs[1].train = {{0, 0, 3}};
  store.alignments = {make_alignment({0, 0}, {1, 0})};
  CHECK_NOTHROW(validate_store(store));

  SUBCASE("entity id out of range") {
    store.kgs[0].train.push_back({3, 0, 0});
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("relation id out of range") {
    store.kgs[0].valid.push_back({0, 2, 1});
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("train/valid overlap") {
    store.kgs[0].valid.push_back({0, 0, 1});
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("test overlapping valid") {
    store.kgs[0].valid.push_back({2, 0, 0});
    store.kgs[0].test.push_back({2, 0, 0});
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("duplicate alignment") {
    store.alignments.push_back(store.alignments.front());
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("non-canonical alignment order") {
    store.alignments[0] = {{1, 0}, {0, 0}};
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
  SUBCASE("alignment entity out of range") {
    store.alignments[0] = {{0, 0}, {1, 9}};
    CHECK_THROWS_AS(validate_store(store), DataError);
  }
}

TEST_CASE("build_fused_kg counts and re-indexing") {
  MultiKgStore store;
  store.kgs.push_back(simple_kg("a", 3, 2));
  store.kgs.push_back(simple_kg("b", 4, 3));
  store.kgs[0].train = {{0, 0, 1}, {1, 1, 2}, {2, 0, 0}, {0, 1, 2}, {1, 0, 0}};
  store.kgs[1].train = {{0, 0, 1}, {1, 1, 2}, {2, 2, 3}, {3, 0, 0}, {0, 2, 2}, {1, 2, 3}};
  store.kgs[0].valid = {{2, 1, 1}};  // held-out triples stay out of the fusion
  store.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({0, 2}, {1, 3})};

  FusedKg fused = build_fused_kg(store);
  CHECK(fused.n_entities == 7);
  CHECK(fused.triples.size() == 11);
  CHECK(fused.align_edges.size() == 2);
  // Reserved ALIGN relation on top of the per-KG relation spaces.
  CHECK(fused.n_relations == 2 + 3 + 1);
  CHECK(fused.align_rel_id == 5);

  SUBCASE("global ids round-trip") {
    for (uint32_t g = 0; g < fused.n_entities; ++g) {
      EntityRef e = fused.to_local(g);
      CHECK(fused.to_global(e) == g);
    }
    CHECK(fused.to_global({1, 2}) == 5);
  }
  SUBCASE("alignment edges use global ids") {
    CHECK(fused.align_edges[0] == std::make_pair(0u, 3u));
    CHECK(fused.align_edges[1] == std::make_pair(2u, 6u));
  }
  SUBCASE("single KG is rejected") {
    MultiKgStore one;
    one.kgs.push_back(simple_kg("solo", 3, 1));
    CHECK_THROWS_AS(build_fused_kg(one), DataError);
  }
  SUBCASE("disjoint schemas get identity parameter mapping") {
    CHECK_FALSE(store.shared_relation_schema);
    CHECK(fused.n_rel_param == fused.n_relations);
    for (uint32_t r = 0; r < fused.n_relations; ++r)
      CHECK(fused.rel_param_of_global[r] == r);
  }
  SUBCASE("shared schema collapses relation parameters") {
    MultiKgStore shared = store;
    shared.shared_relation_schema = true;
    shared.kgs[0].relation_names = shared.kgs[1].relation_names;  // both size 3
    FusedKg f2 = build_fused_kg(shared);
    CHECK(f2.n_rel_param == 3 + 1);
    CHECK(f2.rel_param_of_global[0] == f2.rel_param_of_global[3 + 0]);
    CHECK(f2.rel_param_of_global[1] == f2.rel_param_of_global[3 + 1]);
    CHECK(f2.rel_param_of_global[f2.align_rel_id] == 3);
  }
}

TEST_CASE("parameter swapping instantiates the meta-path") {
  MultiKgStore store;
  store.shared_relation_schema = true;
  store.kgs.push_back(simple_kg("kg1", 3, 1));
  store.kgs.push_back(simple_kg("kg2", 3, 1));
  const uint32_t a = 0, c = 1;  // kg1 entities
  const uint32_t b = 2, d = 0;  // kg2 entities
  store.kgs[0].train = {{a, 0, c}};
  store.alignments = {make_alignment({0, a}, {1, b}), make_alignment({0, c}, {1, d})};
  std::sort(store.alignments.begin(), store.alignments.end());

  std::vector<Triple> got = parameter_swap_triples(store);
  REQUIRE(got.size() == 1);
  CHECK(got[0] == Triple{{1, b}, RelationRef{1, 0}, {1, d}});

  SUBCASE("no alignments gives an empty set") {
    store.alignments.clear();
    CHECK(parameter_swap_triples(store).empty());
  }
  SUBCASE("already-present targets are excluded") {
    store.kgs[1].train = {{b, 0, d}};
    CHECK(parameter_swap_triples(store).empty());
  }
  SUBCASE("shared schema is required") {
    store.shared_relation_schema = false;
    CHECK_THROWS_AS(parameter_swap_triples(store), DataError);
  }
}

TEST_CASE("swap matches brute force on random instances") {
  for (int i = 0; i < 20; ++i) {
    MultiKgStore store = random_store(900 + i);
    std::vector<Triple> got = parameter_swap_triples(store);
    CHECK(got == oracle_swap(store));

    // New triples only: nothing already present in any training set.
    for (const Triple& t : got) {
      const auto& train = store.kgs[t.head.kg_id].train;
      const LocalTriple local{t.head.local_id, t.relation.local_id, t.tail.local_id};
      CHECK(std::find(train.begin(), train.end(), local) == train.end());
    }
  }
}

TEST_CASE("alignment closure fills in transitive pairs") {
  MultiKgStore store;
  store.kgs.push_back(simple_kg("a", 2, 1));
  store.kgs.push_back(simple_kg("b", 2, 1));
  store.kgs.push_back(simple_kg("c", 2, 1));
  store.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({1, 0}, {2, 0})};
  std::sort(store.alignments.begin(), store.alignments.end());

  std::vector<SeedAlignment> got = alignment_closure(store);
  REQUIRE(got.size() == 1);
  CHECK(got[0] == make_alignment({0, 0}, {2, 0}));

  SUBCASE("chain across four KGs yields the three missing pairs") {
    MultiKgStore chain;
    for (int k = 0; k < 4; ++k)
      chain.kgs.push_back(simple_kg("k" + std::to_string(k), 1, 1));
    chain.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({1, 0}, {2, 0}),
                        make_alignment({2, 0}, {3, 0})};
    std::vector<SeedAlignment> missing = alignment_closure(chain);
    CHECK(missing.size() == 3);
    CHECK(std::count(missing.begin(), missing.end(), make_alignment({0, 0}, {2, 0})) == 1);
    CHECK(std::count(missing.begin(), missing.end(), make_alignment({0, 0}, {3, 0})) == 1);
    CHECK(std::count(missing.begin(), missing.end(), make_alignment({1, 0}, {3, 0})) == 1);
  }
}

TEST_CASE("closure matches union-find oracle and is idempotent") {
  for (int i = 0; i < 20; ++i) {
    MultiKgStore store = random_store(1700 + i);
    std::vector<SeedAlignment> got = alignment_closure(store);
    CHECK(got == oracle_closure(store));

    MultiKgStore merged = store;
    merged.alignments.insert(merged.alignments.end(), got.begin(), got.end());
    std::sort(merged.alignments.begin(), merged.alignments.end());
    CHECK(alignment_closure(merged).empty());
  }
}

TEST_CASE("component report histogram and flagging") {
  MultiKgStore store;
  store.kgs.push_back(simple_kg("a", 10, 1));
  store.kgs.push_back(simple_kg("b", 10, 1));

  SUBCASE("three disjoint pairs") {
    store.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({0, 1}, {1, 1}),
                        make_alignment({0, 2}, {1, 2})};
    ComponentReport rep = alignment_component_report(store);
    CHECK(rep.histogram == std::map<size_t, size_t>{{2, 3}});
    CHECK(rep.flagged.empty());
  }
  SUBCASE("star of five entities") {
    store.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({0, 0}, {1, 1}),
                        make_alignment({0, 0}, {1, 2}), make_alignment({0, 0}, {1, 3})};
    ComponentReport rep = alignment_component_report(store);
    CHECK(rep.histogram == std::map<size_t, size_t>{{5, 1}});
  }
  SUBCASE("oversized component is flagged with sorted members") {
    // A path through 3 + 3 entities, threshold 4.
    store.alignments = {make_alignment({0, 0}, {1, 0}), make_alignment({0, 1}, {1, 0}),
                        make_alignment({0, 1}, {1, 1}), make_alignment({0, 2}, {1, 1}),
                        make_alignment({0, 2}, {1, 2}),
                        // plus one isolated pair
                        make_alignment({0, 5}, {1, 5})};
    std::sort(store.alignments.begin(), store.alignments.end());
    ComponentReport rep = alignment_component_report(store, 4);
    CHECK(rep.histogram == std::map<size_t, size_t>{{2, 1}, {6, 1}});
    REQUIRE(rep.flagged.size() == 1);
    CHECK(rep.flagged[0].members.size() == 6);
    CHECK(std::is_sorted(rep.flagged[0].members.begin(), rep.flagged[0].members.end()));
    CHECK(rep.threshold == 4);
  }
  SUBCASE("sizes sum to the number of aligned entities") {
    for (int i = 0; i < 10; ++i) {
      MultiKgStore rnd = random_store(2600 + i);
      std::set<std::pair<uint32_t, uint32_t>> mentioned;
      for (const SeedAlignment& al : rnd.alignments) {
        mentioned.insert({al.left.kg_id, al.left.local_id});
        mentioned.insert({al.right.kg_id, al.right.local_id});
      }
      ComponentReport rep = alignment_component_report(rnd);
      size_t total = 0;
      for (const auto& [size, count] : rep.histogram) total += size * count;
      CHECK(total == mentioned.size());
    }
  }
}
