#include "ckgc/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "ckgc/errors.hpp"

namespace ckgc {
namespace {

using nlohmann::json;

json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
  return j;
}

std::string require_string(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw DataError(where + ": missing string field \"" + key + "\"");
  }
  return j.at(key).get<std::string>();
}

// Splits one TSV line; returns false for blank lines.
bool split_tsv(const std::string& raw, std::vector<std::string>& cols) {
  std::string line = raw;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.empty()) return false;
  cols.clear();
  size_t start = 0;
  while (true) {
    size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return true;
}

struct Interner {
  std::unordered_map<std::string, uint32_t> ids;
  std::vector<std::string> names;

  uint32_t intern(const std::string& name) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    uint32_t id = static_cast<uint32_t>(names.size());
    ids.emplace(name, id);
    names.push_back(name);
    return id;
  }
};

void load_triple_file(const std::filesystem::path& path, Interner& entities,
                      Interner& relations, std::vector<LocalTriple>& out) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string raw;
  std::vector<std::string> cols;
  size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (!split_tsv(raw, cols)) continue;
    if (cols.size() != 3) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 3 tab-separated columns, got " +
                      std::to_string(cols.size()));
    }
    for (const auto& c : cols) {
      if (c.empty()) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": empty column");
      }
    }
    LocalTriple t;
    t.head = entities.intern(cols[0]);
    t.rel = relations.intern(cols[1]);
    t.tail = entities.intern(cols[2]);
    out.push_back(t);
  }
}

double frac_count(double fraction, size_t n) {
  return std::floor(fraction * static_cast<double>(n) + 0.5);
}

}  // namespace

DatasetManifest DatasetManifest::parse_file(const std::filesystem::path& path) {
  json j = parse_json_file(path);
  if (!j.is_object()) throw DataError(path.string() + ": manifest must be a JSON object");
  DatasetManifest m;
  m.base_dir = std::filesystem::absolute(path).parent_path();
  m.name = j.value("name", std::string("dataset"));
  m.shared_relation_schema = j.value("shared_relation_schema", false);
  if (!j.contains("kgs") || !j.at("kgs").is_array()) {
    throw DataError(path.string() + ": manifest needs a \"kgs\" array");
  }
  for (const auto& e : j.at("kgs")) {
    KgEntry kg;
    kg.name = require_string(e, "name", "kg entry");
    kg.train_path = require_string(e, "train", "kg entry \"" + kg.name + "\"");
    kg.valid_path = e.value("valid", std::string());
    kg.test_path = e.value("test", std::string());
    if (e.contains("entity_count_hint")) {
      kg.entity_count_hint = e.at("entity_count_hint").get<uint64_t>();
    }
    m.kgs.push_back(std::move(kg));
  }
  if (j.contains("alignments")) {
    if (!j.at("alignments").is_array()) {
      throw DataError(path.string() + ": \"alignments\" must be an array");
    }
    for (const auto& e : j.at("alignments")) {
      AlignmentEntry a;
      a.left_kg = require_string(e, "left", "alignment entry");
      a.right_kg = require_string(e, "right", "alignment entry");
      a.path = require_string(e, "path", "alignment entry");
      m.alignments.push_back(std::move(a));
    }
  }
  m.validate();
  return m;
}

void DatasetManifest::validate() const {
  if (kgs.empty()) throw DataError("manifest declares no KGs");
  std::unordered_set<std::string> seen;
  for (const auto& kg : kgs) {
    if (kg.name.empty()) throw DataError("manifest has a KG with an empty name");
    if (!seen.insert(kg.name).second) {
      throw DataError("duplicate KG name \"" + kg.name + "\" in manifest");
    }
    if (kg.train_path.empty()) {
      throw DataError("KG \"" + kg.name + "\" has no train file");
    }
  }
  for (const auto& a : alignments) {
    if (!seen.count(a.left_kg)) {
      throw DataError("alignment references unknown KG \"" + a.left_kg + "\"");
    }
    if (!seen.count(a.right_kg)) {
      throw DataError("alignment references unknown KG \"" + a.right_kg + "\"");
    }
    if (a.left_kg == a.right_kg) {
      throw DataError("alignment file " + a.path + " pairs KG \"" + a.left_kg +
                      "\" with itself");
    }
  }
}

MultiKgStore load_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  MultiKgStore store;
  store.name = manifest.name;
  store.shared_relation_schema = manifest.shared_relation_schema;

  std::vector<Interner> entity_interners(manifest.kgs.size());
  std::vector<Interner> relation_interners(manifest.kgs.size());

  for (size_t k = 0; k < manifest.kgs.size(); ++k) {
    const auto& entry = manifest.kgs[k];
    KgData kg;
    kg.name = entry.name;
    load_triple_file(manifest.resolve(entry.train_path), entity_interners[k],
                     relation_interners[k], kg.train);
    if (!entry.valid_path.empty()) {
      load_triple_file(manifest.resolve(entry.valid_path), entity_interners[k],
                       relation_interners[k], kg.valid);
    }
    if (!entry.test_path.empty()) {
      load_triple_file(manifest.resolve(entry.test_path), entity_interners[k],
                       relation_interners[k], kg.test);
    }
    store.kgs.push_back(std::move(kg));
  }

  for (const auto& a : manifest.alignments) {
    uint32_t li = store.kg_index(a.left_kg);
    uint32_t ri = store.kg_index(a.right_kg);
    std::ifstream in(manifest.resolve(a.path));
    if (!in) throw DataError("cannot open " + manifest.resolve(a.path).string());
    std::string raw;
    std::vector<std::string> cols;
    size_t line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      if (!split_tsv(raw, cols)) continue;
      if (cols.size() != 2) {
        throw DataError(manifest.resolve(a.path).string() + ":" +
                        std::to_string(line_no) +
                        ": expected 2 tab-separated columns, got " +
                        std::to_string(cols.size()));
      }
      if (cols[0].empty() || cols[1].empty()) {
        throw DataError(manifest.resolve(a.path).string() + ":" +
                        std::to_string(line_no) + ": empty column");
      }
      EntityRef left{li, entity_interners[li].intern(cols[0])};
      EntityRef right{ri, entity_interners[ri].intern(cols[1])};
      store.alignments.push_back(make_alignment(left, right));
    }
  }

  for (size_t k = 0; k < store.kgs.size(); ++k) {
    store.kgs[k].entity_names = std::move(entity_interners[k].names);
    store.kgs[k].relation_names = std::move(relation_interners[k].names);
  }

  // Entities that never occur in training cannot receive supervised updates;
  // they stay in the vocabulary but are worth flagging.
  for (const auto& kg : store.kgs) {
    std::vector<bool> in_train(kg.n_entities(), false);
    for (const auto& t : kg.train) {
      in_train[t.head] = true;
      in_train[t.tail] = true;
    }
    std::vector<bool> held_out(kg.n_entities(), false);
    for (const auto& t : kg.valid) {
      held_out[t.head] = true;
      held_out[t.tail] = true;
    }
    for (const auto& t : kg.test) {
      held_out[t.head] = true;
      held_out[t.tail] = true;
    }
    for (uint32_t e = 0; e < kg.n_entities(); ++e) {
      if (held_out[e] && !in_train[e]) {
        store.warnings.push_back("KG \"" + kg.name + "\": entity \"" +
                                 kg.entity_names[e] +
                                 "\" appears only in held-out splits");
      }
    }
  }

  // Duplicate alignment pairs in the input are collapsed.
  std::sort(store.alignments.begin(), store.alignments.end());
  store.alignments.erase(
      std::unique(store.alignments.begin(), store.alignments.end()),
      store.alignments.end());

  validate_store(store);
  return store;
}

MultiKgStore sample_dangling(const MultiKgStore& store, const SamplingSpec& spec) {
  if (store.alignments.empty()) {
    throw DataError("sample_dangling requires a store with alignments");
  }
  if (!(spec.alignment_keep_fraction > 0.0) || spec.alignment_keep_fraction > 1.0) {
    throw ConfigError("alignment_keep_fraction must be in (0, 1]");
  }

  const size_t n = store.alignments.size();
  const size_t n_keep = static_cast<size_t>(frac_count(spec.alignment_keep_fraction, n));

  Rng rng(spec.seed);
  std::vector<size_t> keep_idx = rng.sample_without_replacement(n, n_keep);
  std::sort(keep_idx.begin(), keep_idx.end());

  std::vector<bool> kept(n, false);
  for (size_t i : keep_idx) kept[i] = true;

  // An endpoint on the removal side is dropped once no surviving alignment
  // mentions it (on either side).
  std::set<EntityRef> survivors;
  for (size_t i = 0; i < n; ++i) {
    if (!kept[i]) continue;
    survivors.insert(store.alignments[i].left);
    survivors.insert(store.alignments[i].right);
  }
  std::set<EntityRef> removed_entities;
  for (size_t i = 0; i < n; ++i) {
    if (kept[i]) continue;
    EntityRef victim = spec.remove_side == SamplingSpec::Side::kLeft
                           ? store.alignments[i].left
                           : store.alignments[i].right;
    if (!survivors.count(victim)) removed_entities.insert(victim);
  }

  MultiKgStore out;
  out.name = store.name;
  out.shared_relation_schema = store.shared_relation_schema;
  out.kgs.reserve(store.kgs.size());
  size_t n_triples_removed = 0;
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    const KgData& kg = store.kgs[k];
    KgData copy;
    copy.name = kg.name;
    copy.entity_names = kg.entity_names;
    copy.relation_names = kg.relation_names;
    auto keep_triple = [&](const LocalTriple& t) {
      return !removed_entities.count(EntityRef{k, t.head}) &&
             !removed_entities.count(EntityRef{k, t.tail});
    };
    for (const auto& t : kg.train) {
      if (keep_triple(t)) copy.train.push_back(t); else ++n_triples_removed;
    }
    for (const auto& t : kg.valid) {
      if (keep_triple(t)) copy.valid.push_back(t); else ++n_triples_removed;
    }
    for (const auto& t : kg.test) {
      if (keep_triple(t)) copy.test.push_back(t); else ++n_triples_removed;
    }
    out.kgs.push_back(std::move(copy));
  }
  for (size_t i : keep_idx) out.alignments.push_back(store.alignments[i]);

  size_t n_dangling = 0;
  for (const auto& per_kg : dangling_entities(out)) n_dangling += per_kg.size();
  out.warnings = store.warnings;
  out.warnings.push_back(
      "sample_dangling: kept " + std::to_string(n_keep) + "/" + std::to_string(n) +
      " alignments, removed " + std::to_string(removed_entities.size()) +
      " entities (" + std::to_string(n_triples_removed) + " triples), " +
      std::to_string(n_dangling) + " entities now dangling");

  validate_store(out);
  return out;
}

std::vector<std::vector<uint32_t>> dangling_entities(const MultiKgStore& store) {
  std::vector<std::vector<bool>> aligned(store.n_kgs());
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    aligned[k].assign(store.kgs[k].n_entities(), false);
  }
  for (const auto& a : store.alignments) {
    aligned[a.left.kg_id][a.left.local_id] = true;
    aligned[a.right.kg_id][a.right.local_id] = true;
  }
  std::vector<std::vector<uint32_t>> out(store.n_kgs());
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    for (uint32_t e = 0; e < store.kgs[k].n_entities(); ++e) {
      if (!aligned[k][e]) out[k].push_back(e);
    }
  }
  return out;
}

MultiKgStore make_synthetic_complementary(uint32_t n_entities, uint32_t n_relations,
                                          uint32_t n_triples, uint32_t n_kgs,
                                          double overlap_fraction,
                                          double removal_fraction, uint64_t seed) {
  if (n_entities < 2 || n_relations == 0 || n_triples == 0 || n_kgs < 2) {
    throw ConfigError("synthetic generator needs >=2 entities, >=1 relation, >=1 triple, >=2 KGs");
  }
  if (!(overlap_fraction > 0.0) || !(overlap_fraction < 1.0)) {
    throw ConfigError("overlap_fraction must be in (0, 1)");
  }
  if (!(removal_fraction > 0.0) || !(removal_fraction < 1.0)) {
    throw ConfigError("removal_fraction must be in (0, 1)");
  }
  // Ground-truth tails come from the top of a planted bilinear model, so a
  // view's removed triples stay predictable from the remaining ones.
  constexpr uint32_t kLatentDim = 4;
  constexpr size_t kTopChoices = 5;
  const double capacity =
      std::min(static_cast<double>(n_entities) * static_cast<double>(n_entities - 1) *
                   static_cast<double>(n_relations),
               static_cast<double>(n_entities) * static_cast<double>(n_relations) *
                   static_cast<double>(kTopChoices));
  if (static_cast<double>(n_triples) > capacity) {
    throw ConfigError("n_triples exceeds the number of distinct triples");
  }
  const auto n_removed = static_cast<size_t>(frac_count(removal_fraction, n_triples));
  if (n_removed * static_cast<size_t>(n_kgs) > n_triples) {
    throw ConfigError("removal_fraction too large for disjoint per-view removal");
  }

  Rng rng(seed);

  std::vector<double> latent_e(static_cast<size_t>(n_entities) * kLatentDim);
  std::vector<double> latent_r(static_cast<size_t>(n_relations) * kLatentDim);
  for (auto& v : latent_e) v = rng.uniform_real(-1.0, 1.0);
  for (auto& v : latent_r) v = rng.uniform_real(-1.0, 1.0);

  // Ground-truth KG: distinct (head, relation, tail) with head != tail, the
  // tail drawn uniformly from the kTopChoices best-scoring candidates.
  std::vector<LocalTriple> truth;
  truth.reserve(n_triples);
  std::unordered_set<uint64_t> seen;
  std::vector<std::pair<double, uint32_t>> scored;
  scored.reserve(n_entities);
  size_t attempts = 0;
  const size_t max_attempts = 200 * static_cast<size_t>(n_triples) + 1000;
  while (truth.size() < n_triples) {
    if (++attempts > max_attempts) {
      throw ConfigError("synthetic generator could not place n_triples distinct "
                        "triples; lower n_triples");
    }
    LocalTriple t;
    t.head = static_cast<uint32_t>(rng.uniform(n_entities));
    t.rel = static_cast<uint32_t>(rng.uniform(n_relations));
    const double* zh = latent_e.data() + static_cast<size_t>(t.head) * kLatentDim;
    const double* wr = latent_r.data() + static_cast<size_t>(t.rel) * kLatentDim;
    scored.clear();
    for (uint32_t c = 0; c < n_entities; ++c) {
      if (c == t.head) continue;
      const double* zc = latent_e.data() + static_cast<size_t>(c) * kLatentDim;
      double s = 0.0;
      for (uint32_t j = 0; j < kLatentDim; ++j) s += zh[j] * wr[j] * zc[j];
      scored.emplace_back(s, c);
    }
    const size_t top = std::min(kTopChoices, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + top, scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first
                                                  : a.second < b.second;
                      });
    t.tail = scored[rng.uniform(top)].second;
    uint64_t key = (static_cast<uint64_t>(t.head) * n_entities + t.tail) * n_relations + t.rel;
    if (seen.insert(key).second) truth.push_back(t);
  }

  // Disjoint removal slices: one shuffle, consecutive windows per view.
  std::vector<size_t> order(n_triples);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<std::string> entity_names(n_entities);
  for (uint32_t e = 0; e < n_entities; ++e) entity_names[e] = "e" + std::to_string(e);
  std::vector<std::string> relation_names(n_relations);
  for (uint32_t r = 0; r < n_relations; ++r) relation_names[r] = "r" + std::to_string(r);

  MultiKgStore store;
  store.name = "synthetic";
  store.shared_relation_schema = true;
  for (uint32_t k = 0; k < n_kgs; ++k) {
    KgData kg;
    kg.name = "view" + std::to_string(k);
    kg.entity_names = entity_names;
    kg.relation_names = relation_names;
    std::vector<bool> removed(n_triples, false);
    const size_t begin = static_cast<size_t>(k) * n_removed;
    for (size_t i = begin; i < begin + n_removed; ++i) removed[order[i]] = true;
    for (size_t i = 0; i < n_triples; ++i) {
      if (!removed[i]) kg.train.push_back(truth[i]);
    }
    // Held-out halves of the removed slice: first half valid, rest test.
    const size_t n_valid = n_removed / 2;
    for (size_t i = 0; i < n_removed; ++i) {
      const LocalTriple& t = truth[order[begin + i]];
      if (i < n_valid) kg.valid.push_back(t); else kg.test.push_back(t);
    }
    store.kgs.push_back(std::move(kg));
  }

  const auto n_overlap = static_cast<size_t>(frac_count(overlap_fraction, n_entities));
  std::vector<size_t> overlap = rng.sample_without_replacement(n_entities, n_overlap);
  std::sort(overlap.begin(), overlap.end());
  for (size_t e : overlap) {
    for (uint32_t i = 0; i < n_kgs; ++i) {
      for (uint32_t j = i + 1; j < n_kgs; ++j) {
        store.alignments.push_back(make_alignment(
            EntityRef{i, static_cast<uint32_t>(e)}, EntityRef{j, static_cast<uint32_t>(e)}));
      }
    }
  }
  std::sort(store.alignments.begin(), store.alignments.end());

  validate_store(store);
  return store;
}

std::filesystem::path write_dataset(const MultiKgStore& store,
                                    const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["name"] = store.name;
  manifest["shared_relation_schema"] = store.shared_relation_schema;
  manifest["kgs"] = nlohmann::json::array();

  auto write_triples = [&](const std::string& file, const KgData& kg,
                           const std::vector<LocalTriple>& triples) {
    std::ofstream out(dir / file, std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / file).string());
    for (const auto& t : triples) {
      out << kg.entity_names[t.head] << '\t' << kg.relation_names[t.rel] << '\t'
          << kg.entity_names[t.tail] << '\n';
    }
  };

  for (const auto& kg : store.kgs) {
    nlohmann::json entry;
    entry["name"] = kg.name;
    entry["train"] = kg.name + "_train.tsv";
    write_triples(kg.name + "_train.tsv", kg, kg.train);
    entry["valid"] = kg.name + "_valid.tsv";
    write_triples(kg.name + "_valid.tsv", kg, kg.valid);
    entry["test"] = kg.name + "_test.tsv";
    write_triples(kg.name + "_test.tsv", kg, kg.test);
    manifest["kgs"].push_back(entry);
  }

  // One alignment file per KG pair that has any.
  std::map<std::pair<uint32_t, uint32_t>, std::vector<const SeedAlignment*>> by_pair;
  for (const auto& a : store.alignments) {
    by_pair[{a.left.kg_id, a.right.kg_id}].push_back(&a);
  }
  manifest["alignments"] = nlohmann::json::array();
  for (const auto& [pair, list] : by_pair) {
    const KgData& lk = store.kgs[pair.first];
    const KgData& rk = store.kgs[pair.second];
    std::string file = lk.name + "_" + rk.name + "_align.tsv";
    std::ofstream out(dir / file, std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / file).string());
    for (const SeedAlignment* a : list) {
      out << lk.entity_names[a->left.local_id] << '\t'
          << rk.entity_names[a->right.local_id] << '\n';
    }
    nlohmann::json entry;
    entry["left"] = lk.name;
    entry["right"] = rk.name;
    entry["path"] = file;
    manifest["alignments"].push_back(entry);
  }

  fs::path manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
  return manifest_path;
}

std::string canonical_text(const MultiKgStore& store) {
  std::ostringstream os;
  os << "store " << store.name << " shared=" << store.shared_relation_schema << '\n';
  std::vector<size_t> kg_order(store.kgs.size());
  std::iota(kg_order.begin(), kg_order.end(), size_t{0});
  std::sort(kg_order.begin(), kg_order.end(), [&store](size_t a, size_t b) {
    return store.kgs[a].name < store.kgs[b].name;
  });
  for (size_t k : kg_order) {
    const auto& kg = store.kgs[k];
    os << "kg " << kg.name << " entities=" << kg.n_entities()
       << " relations=" << kg.n_relations() << '\n';
    auto sorted = [](std::vector<std::string> names) {
      std::sort(names.begin(), names.end());
      return names;
    };
    for (const auto& n : sorted(kg.entity_names)) os << "e " << n << '\n';
    for (const auto& n : sorted(kg.relation_names)) os << "r " << n << '\n';
    auto dump = [&os, &kg](const char* tag, const std::vector<LocalTriple>& ts) {
      std::vector<std::string> lines;
      lines.reserve(ts.size());
      for (const auto& t : ts) {
        lines.push_back(kg.entity_names[t.head] + '\t' + kg.relation_names[t.rel] + '\t' +
                        kg.entity_names[t.tail]);
      }
      std::sort(lines.begin(), lines.end());
      for (const auto& l : lines) os << tag << ' ' << l << '\n';
    };
    dump("train", kg.train);
    dump("valid", kg.valid);
    dump("test", kg.test);
  }
  std::vector<std::string> align_lines;
  align_lines.reserve(store.alignments.size());
  for (const auto& a : store.alignments) {
    const auto& lk = store.kgs[a.left.kg_id];
    const auto& rk = store.kgs[a.right.kg_id];
    std::string lhs = lk.name + ':' + lk.entity_names[a.left.local_id];
    std::string rhs = rk.name + ':' + rk.entity_names[a.right.local_id];
    if (rhs < lhs) std::swap(lhs, rhs);
    align_lines.push_back(lhs + ' ' + rhs);
  }
  std::sort(align_lines.begin(), align_lines.end());
  for (const auto& l : align_lines) os << "align " << l << '\n';
  return os.str();
}

}  // namespace ckgc
