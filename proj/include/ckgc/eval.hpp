#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "ckgc/kg.hpp"
#include "ckgc/matrix.hpp"
#include "ckgc/model.hpp"

namespace ckgc {

// Candidate filtering for ranking: traditional filtering discards candidates
// forming a triple seen in any split (except the truth), train-only
// filtering discards only training triples, raw keeps everything.
enum class FilterMode { kTraditionalFiltered, kTrainOnlyFiltered, kRaw };

enum class TaskSet { kTailOnly, kHeadAndTail };

std::string to_string(FilterMode m);
std::string to_string(TaskSet t);
FilterMode filter_mode_from_string(const std::string& s);  // ConfigError on unknown
TaskSet task_set_from_string(const std::string& s);        // ConfigError on unknown

// Goodness provider over one KG's local query space. Implementations may be
// backed by an individual encoder, the fused encoder restricted to the KG,
// or a sum of the two.
class Scorer {
 public:
  virtual ~Scorer() = default;
  // Fills out[c] with the goodness of the query with candidate c substituted
  // into `slot`. out is resized to the KG's entity count.
  virtual void score_all(QuerySlot slot, const LocalTriple& query,
                         std::vector<double>& out) const = 0;
};

class IndividualScorer final : public Scorer {
 public:
  IndividualScorer(const EncodedGraph& enc, ScoreKind kind) : enc_(enc), kind_(kind) {}
  void score_all(QuerySlot slot, const LocalTriple& query,
                 std::vector<double>& out) const override;

 private:
  const EncodedGraph& enc_;
  ScoreKind kind_;
};

// Scores one KG's local queries with the fused model by translating entity
// ids into the fused id space and relations into parameter rows.
class FusedKgScorer final : public Scorer {
 public:
  FusedKgScorer(const EncodedGraph& enc, ScoreKind kind, const FusedKg& fused,
                uint32_t kg);
  void score_all(QuerySlot slot, const LocalTriple& query,
                 std::vector<double>& out) const override;

 private:
  const EncodedGraph& enc_;
  ScoreKind kind_;
  const FusedKg& fused_;
  uint32_t kg_;
  std::vector<uint32_t> global_ids_;  // local entity -> global entity
};

// Ensemble: elementwise sum of two scorers' goodness.
class SumScorer final : public Scorer {
 public:
  SumScorer(const Scorer& a, const Scorer& b) : a_(a), b_(b) {}
  void score_all(QuerySlot slot, const LocalTriple& query,
                 std::vector<double>& out) const override;

 private:
  const Scorer& a_;
  const Scorer& b_;
};

// Membership index over one KG's triples, used to filter known candidates.
class EvalFilterIndex {
 public:
  explicit EvalFilterIndex(const KgData& kg);
  // Is (h, r, t) a known positive under the filter mode?
  bool known(FilterMode mode, uint32_t h, uint32_t r, uint32_t t) const;
  bool entity_in_train(uint32_t e) const { return in_train_[e]; }

 private:
  uint64_t key(uint32_t h, uint32_t r, uint32_t t) const;
  std::unordered_set<uint64_t> train_;
  std::unordered_set<uint64_t> held_out_;
  std::vector<bool> in_train_;
  uint64_t n_entities_;
  uint64_t n_relations_;
};

// Rank of the truth among unfiltered candidates: 1 + the number of strictly
// better candidates + the number of equal-scored candidates with a lower id.
size_t rank_of_truth(const std::vector<double>& goodness, uint32_t truth,
                     const std::vector<bool>& filtered);

struct SplitEval {
  double mrr = 0.0;
  double hits_at_1 = 0.0;
  double hits_at_10 = 0.0;
  size_t n_queries = 0;
  size_t n_unseen_truth = 0;  // queries whose truth entity never occurs in train
};

struct RankRecord {
  QuerySlot slot;
  LocalTriple query;
  uint32_t truth = 0;
  size_t rank = 0;
};

// Ranks every query of the split (per triple: tail query, then the head
// query when tasks == kHeadAndTail) and aggregates MRR / Hits@1 / Hits@10 in
// query order. `threads` > 1 parallelizes the ranking; aggregation order is
// unchanged, so results do not depend on the thread count.
SplitEval evaluate_split(const Scorer& scorer, const std::vector<LocalTriple>& split,
                         const EvalFilterIndex& filter, FilterMode mode, TaskSet tasks,
                         std::vector<RankRecord>* dump_ranks = nullptr,
                         uint32_t threads = 1);

struct ReportRow {
  std::string model;
  std::string kg;
  FilterMode filter = FilterMode::kTraditionalFiltered;
  TaskSet tasks = TaskSet::kHeadAndTail;
  std::string split;
  SplitEval eval;
};

void write_report_tsv(const std::filesystem::path& path,
                      const std::vector<ReportRow>& rows);
void write_report_json(const std::filesystem::path& path,
                       const std::vector<ReportRow>& rows);
void write_ranks_tsv(const std::filesystem::path& path, const std::string& model,
                     const std::string& kg, const std::vector<RankRecord>& records);

// Pearson correlation between relation embedding rows. Rows with zero
// variance correlate 0 with everything (including themselves) and produce a
// warning.
struct CorrelationResult {
  std::vector<std::string> names;
  Matrix corr;  // n x n
  std::vector<std::string> warnings;
};

CorrelationResult relation_correlation(const Matrix& relation_rows,
                                       const std::vector<std::string>& names);

void write_correlation_csv(const std::filesystem::path& path,
                           const CorrelationResult& corr);

// Fixed-precision float formatting shared by every TSV/CSV writer.
std::string format_double(double v);

}  // namespace ckgc
