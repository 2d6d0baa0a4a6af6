#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ckgc/kg.hpp"
#include "ckgc/rng.hpp"

namespace ckgc {

// Dataset manifest: a JSON document listing the KGs, their triple files and
// the alignment files. Paths are resolved relative to the manifest location.
//
//   {
//     "name": "toy",
//     "shared_relation_schema": true,
//     "kgs": [
//       {"name": "en", "train": "en_train.tsv", "valid": "en_valid.tsv",
//        "test": "en_test.tsv"}
//     ],
//     "alignments": [
//       {"left": "en", "right": "fr", "path": "en_fr.tsv"}
//     ]
//   }
struct DatasetManifest {
  struct KgEntry {
    std::string name;
    std::string train_path;
    std::string valid_path;  // may be empty
    std::string test_path;   // may be empty
    std::optional<uint64_t> entity_count_hint;
  };
  struct AlignmentEntry {
    std::string left_kg;
    std::string right_kg;
    std::string path;
  };

  std::string name;
  bool shared_relation_schema = false;
  std::vector<KgEntry> kgs;
  std::vector<AlignmentEntry> alignments;
  std::filesystem::path base_dir;

  static DatasetManifest parse_file(const std::filesystem::path& path);

  // KG names unique, alignment entries reference declared KGs.
  void validate() const;

  std::filesystem::path resolve(const std::string& rel) const { return base_dir / rel; }
};

// Loads all triple and alignment files into an interned store. Entities and
// relations get dense local ids in first-appearance order (train, valid,
// test, then alignment files). Entities seen only in held-out splits are
// kept in the vocabulary and listed in store.warnings.
MultiKgStore load_dataset(const DatasetManifest& manifest);

// Dangling-entity sampling: keep a uniform fraction of the alignments; an
// entity on the removal side that loses all of its alignments is dropped
// from the graph (every triple incident to it is excluded from all splits).
// Its surviving counterparts become dangling but keep their triples.
struct SamplingSpec {
  double alignment_keep_fraction = 1.0;  // in (0, 1]
  uint64_t seed = 0;
  enum class Side { kLeft, kRight };
  Side remove_side = Side::kRight;
};

MultiKgStore sample_dangling(const MultiKgStore& store, const SamplingSpec& spec);

// Per-KG lists of entities with no alignment counterpart.
std::vector<std::vector<uint32_t>> dangling_entities(const MultiKgStore& store);

// Synthetic multi-KG benchmark: one ground-truth KG cloned into n_kgs views,
// a disjoint random slice removed from each view (held out as valid/test for
// that view), and an overlap_fraction of entities aligned across all views.
// Every removed triple is therefore present in the other views' training
// data, which makes the views complementary.
MultiKgStore make_synthetic_complementary(uint32_t n_entities, uint32_t n_relations,
                                          uint32_t n_triples, uint32_t n_kgs,
                                          double overlap_fraction,
                                          double removal_fraction, uint64_t seed);

// Writes the store back to disk as TSV files plus a manifest.json under dir.
// Returns the manifest path.
std::filesystem::path write_dataset(const MultiKgStore& store,
                                    const std::filesystem::path& dir);

// Canonical text form of a store: names only, sorted, so two stores compare
// equal exactly when they hold the same graphs regardless of id numbering.
std::string canonical_text(const MultiKgStore& store);

}  // namespace ckgc
