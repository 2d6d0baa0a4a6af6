#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ckgc/eval.hpp"
#include "ckgc/kg.hpp"
#include "ckgc/model.hpp"
#include "ckgc/rng.hpp"

namespace ckgc {

struct TrainConfig {
  double gamma = 1.0;      // ranking margin
  double alpha = 0.5;      // distillation weight
  double theta = 0.1;      // mutual-teaching gate threshold on validation MRR
  uint32_t top_k = 10;     // teacher candidates per distillation query
  uint32_t neg_samples = 16;
  double lr = 1e-3;
  uint32_t epochs_stage1 = 100;
  uint32_t epochs_stage2 = 50;
  uint32_t batch_size = 256;
  uint64_t seed = 42;
  uint32_t eval_every = 5;  // validation cadence, in epochs
  uint32_t patience = 10;   // stage-1 early stop, counted in evaluations
  bool hinge = true;        // false: raw-difference ranking objective
  ModelConfig model;
  std::map<std::string, double> alpha_per_kg;  // per-KG override of alpha

  static TrainConfig from_json_file(const std::filesystem::path& path);
  static TrainConfig from_json_string(const std::string& text);
  std::string to_json_string() const;

  void validate() const;  // ConfigError on out-of-range values
  double alpha_for(const std::string& kg_name) const;
};

// Membership oracle over one id space's known positive triples.
class PositiveSet {
 public:
  PositiveSet() = default;
  PositiveSet(uint32_t n_entities, uint32_t n_relations);
  void insert(const LocalTriple& t) { set_.insert(key(t)); }
  bool contains(const LocalTriple& t) const { return set_.count(key(t)) > 0; }

 private:
  uint64_t key(const LocalTriple& t) const {
    return (static_cast<uint64_t>(t.head) * n_entities_ + t.tail) * n_relations_ +
           t.rel;
  }
  std::unordered_set<uint64_t> set_;
  uint64_t n_entities_ = 1;
  uint64_t n_relations_ = 1;
};

constexpr uint32_t kNegativeResampleBudget = 100;

struct CorruptedTriple {
  LocalTriple triple;
  bool corrupted_tail = false;
};

// Per-slot entity ranges a corruption may be drawn from. For a plain KG both
// ranges are [0, n_entities); in the fused id space they are the spans of the
// endpoints' source KGs (which differ for alignment edges).
struct CorruptionRange {
  uint32_t head_lo = 0, head_hi = 0;
  uint32_t tail_lo = 0, tail_hi = 0;
};

// Draws n corruptions of `pos`: a fair coin picks head or tail, the
// replacement entity is uniform over that slot's range. Draws colliding
// with a known positive are rejected and redrawn up to
// kNegativeResampleBudget times; the final draw is kept either way and
// `budget_exhausted` (when given) counts such keeps.
std::vector<CorruptedTriple> sample_negatives(const LocalTriple& pos,
                                              const PositiveSet& positives,
                                              const CorruptionRange& range,
                                              uint32_t n, Rng& rng,
                                              size_t* budget_exhausted = nullptr);

// Margin ranking loss over positive/negative goodness pairs. neg holds
// neg.size()/pos.size() corruptions per positive, grouped by positive. With
// hinge: mean of max(0, g_neg - g_pos + gamma); without: mean of
// (g_neg - g_pos + gamma).
double margin_loss(const std::vector<double>& pos, const std::vector<double>& neg,
                   double gamma, bool hinge);

// Indices of the k largest scores, ties resolved toward the lower index.
std::vector<uint32_t> topk_candidates(const std::vector<double>& scores, uint32_t k);

constexpr double kStudentProbFloor = 1e-12;

// KL(teacher || student) over B groups of k candidate probabilities, averaged
// over the B groups. Student probabilities are floored at kStudentProbFloor
// inside the log; teacher zeros contribute exactly 0.
double kd_loss(const std::vector<double>& teacher_probs,
               const std::vector<double>& student_probs, uint32_t k);

// Tape node for one distillation task: the student re-scores the teacher's
// top-k candidate triples (h_idx/r_idx/t_idx hold B*k index triples into the
// student's encoded tables, grouped by query) and is pulled toward the
// teacher's softmax weights. teacher_probs is B x k and enters the graph as a
// constant. The node evaluates to the same quantity as kd_loss.
Tape::Id kd_loss_on_tape(Tape& tape, ScoreKind kind, Tape::Id entity, Tape::Id relation,
                         const std::vector<uint32_t>& h_idx,
                         const std::vector<uint32_t>& r_idx,
                         const std::vector<uint32_t>& t_idx, Matrix teacher_probs);

// Per-KG mutual-teaching gate: the better model always teaches; the worse one
// teaches only while the validation-MRR gap stays below theta. A tie lets
// both teach.
struct GateState {
  double mrr_individual = 0.0;
  double mrr_fused = 0.0;
  bool teach_individual_to_fused = true;
  bool teach_fused_to_individual = true;
};

GateState update_gate(double mrr_individual, double mrr_fused, double theta);

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

class Adam {
 public:
  Adam(ModelParams& params, double lr);
  // Applies one update from the accumulated grads (throws NumericError if any
  // gradient is non-finite), then clears them.
  void step();
  uint64_t steps_taken() const { return t_; }

 private:
  ModelParams* params_;
  double lr_;
  std::vector<Matrix> m_, v_;
  uint64_t t_ = 0;
};

struct MetricsRow {
  uint32_t epoch = 0;
  std::string model;
  double loss_task = 0.0;
  double loss_distill = 0.0;  // before scaling by alpha
  double val_mrr = 0.0;
};

struct GateRow {
  uint32_t epoch = 0;
  std::string kg;
  double mrr_individual = 0.0;
  double mrr_fused = 0.0;
  bool teach_individual_to_fused = false;
  bool teach_fused_to_individual = false;
};

void write_metrics_tsv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows);
void write_gates_tsv(const std::filesystem::path& path,
                     const std::vector<GateRow>& rows);

// Two-stage trainer. Stage 1 trains each individual encoder and the fused
// encoder independently on the ranking objective with early stopping on
// validation MRR (the best snapshot is restored). Stage 2 continues from the
// stage-1 snapshots with mutual distillation: per step, each individual
// model is updated with its ranking loss plus gated distillation from the
// fused model, and the fused model is then updated once with its ranking
// loss plus the gated distillation terms from every individual model. The
// best validation snapshot seen during stage 2 (including its start state)
// is restored at the end.
class Trainer {
 public:
  Trainer(const MultiKgStore& store, TrainConfig cfg, uint32_t eval_threads = 1);

  void run_stage1();
  void run_stage2();  // requires run_stage1() first

  const std::vector<ModelParams>& individual_stage1() const { return indiv_stage1_; }
  const ModelParams& fused_stage1() const { return fused_stage1_; }
  const std::vector<ModelParams>& individual_stage2() const { return indiv_stage2_; }
  const ModelParams& fused_stage2() const { return fused_stage2_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const std::vector<GateRow>& gates() const { return gates_; }
  size_t negative_budget_exhausted() const { return budget_exhausted_; }
  const FusedKg& fused_kg() const { return fused_; }
  const MultiKgStore& store() const { return store_; }
  const TrainConfig& config() const { return cfg_; }

  // Validation MRR protocol shared by early stopping and the gates:
  // tail-only ranking on the valid split, train-only filtering.
  double validation_mrr_individual(const ModelParams& params, uint32_t kg) const;
  double validation_mrr_fused(const ModelParams& params, uint32_t kg) const;

 private:
  struct ModelSlot {
    std::string name;
    ModelParams params;
    const GraphAdjacency* graph = nullptr;
    std::vector<LocalTriple> train;  // in the model's id space
    std::vector<CorruptionRange> ranges;  // per-triple corruption ranges
    PositiveSet positives;
    std::vector<size_t> order;
    size_t cursor = 0;
    Rng rng{0};
    std::unique_ptr<Adam> opt;
  };

  void init_slot_data(ModelSlot& slot, uint32_t kg_or_fused);
  std::vector<size_t> next_batch(ModelSlot& slot);
  // Appends the ranking loss for the given batch to the slot's tape.
  Tape::Id ranking_loss_node(Tape& tape, ModelSlot& slot, EncodeIds enc,
                             const std::vector<size_t>& batch);
  double slot_validation_mrr(size_t slot_idx, uint32_t kg) const;

  const MultiKgStore& store_;
  TrainConfig cfg_;
  uint32_t eval_threads_;
  FusedKg fused_;
  std::vector<GraphAdjacency> kg_graphs_;
  GraphAdjacency fused_graph_;
  std::vector<EvalFilterIndex> filters_;
  std::vector<std::vector<uint32_t>> relparam_of_local_;  // [kg][local rel] -> row

  std::vector<ModelSlot> slots_;  // one per KG, then the fused model last
  bool stage1_done_ = false;

  std::vector<ModelParams> indiv_stage1_;
  ModelParams fused_stage1_;
  std::vector<ModelParams> indiv_stage2_;
  ModelParams fused_stage2_;
  std::vector<MetricsRow> metrics_;
  std::vector<GateRow> gates_;
  size_t budget_exhausted_ = 0;
};

}  // namespace ckgc
