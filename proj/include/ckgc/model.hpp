#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ckgc/kg.hpp"
#include "ckgc/matrix.hpp"
#include "ckgc/rng.hpp"
#include "ckgc/tape.hpp"

namespace ckgc {

enum class ScoreKind { kTransEL1, kTransEL2, kDistMult };
enum class Composition { kSubtract, kMultiply };
enum class Activation { kTanh, kIdentity };

std::string to_string(ScoreKind k);
std::string to_string(Composition c);
std::string to_string(Activation a);
ScoreKind score_kind_from_string(const std::string& s);        // ConfigError on unknown
Composition composition_from_string(const std::string& s);     // ConfigError on unknown
Activation activation_from_string(const std::string& s);       // ConfigError on unknown

struct ModelConfig {
  uint32_t dim = 100;
  uint32_t layers = 1;
  ScoreKind score = ScoreKind::kTransEL1;
  Composition composition = Composition::kSubtract;
  Activation activation = Activation::kTanh;
};

// Learnable tensors of one encoder (single-KG or fused). The relation table
// stores forward rows [0, n_rel_param) followed by the inverse-direction rows
// [n_rel_param, 2*n_rel_param). One weight set is shared across layers.
// w_align exists only for fused models (has_align).
struct ModelParams {
  ModelConfig cfg;
  uint32_t n_entities = 0;
  uint32_t n_rel_param = 0;
  bool has_align = false;

  Matrix entity_emb;     // n_entities x d
  Matrix relation_emb;   // 2*n_rel_param x d
  Matrix w_out;          // d x d, forward-edge messages
  Matrix w_in;           // d x d, inverse-edge messages
  Matrix w_loop;         // d x d, self-loop messages
  Matrix w_rel;          // d x d, relation transform per layer
  Matrix self_loop_rel;  // 1 x d
  Matrix w_align;        // d x d, alignment messages (fused only)

  Matrix g_entity_emb, g_relation_emb, g_w_out, g_w_in, g_w_loop, g_w_rel,
      g_self_loop_rel, g_w_align;

  // All tensors drawn i.i.d. uniform from [-6/sqrt(d), 6/sqrt(d)].
  static ModelParams init(const ModelConfig& cfg, uint32_t n_entities,
                          uint32_t n_rel_param, bool has_align, Rng& rng);

  struct Group {
    std::string name;
    Matrix* value;
    Matrix* grad;
  };
  std::vector<Group> groups();  // skips absent tensors

  void zero_grads();
  bool values_finite() const;
};

// Message lists of one graph, bucketed by edge role. `rel` holds rows of the
// relation table (already offset for the inverse bucket); the align bucket
// composes with nothing, so its `rel` stays empty. `dst_norm[v]` is
// 1/(number of messages into v in this bucket), 0 when there are none.
struct MessageBucket {
  std::vector<uint32_t> src;
  std::vector<uint32_t> rel;
  std::vector<uint32_t> dst;
  std::vector<double> dst_norm;

  bool empty() const { return src.empty(); }
};

struct GraphAdjacency {
  uint32_t n_nodes = 0;
  uint32_t n_rel_param = 0;
  MessageBucket out;    // h --r--> t messages flowing to t
  MessageBucket in;     // inverse direction, rows n_rel_param + r
  MessageBucket align;  // both directions of each seed alignment (fused only)

  static GraphAdjacency from_kg(const KgData& kg);
  static GraphAdjacency from_fused(const FusedKg& fused);
};

struct EncodedGraph {
  Matrix entity_out;    // n_nodes x d
  Matrix relation_out;  // 2*n_rel_param x d
};

struct EncodeIds {
  Tape::Id entity;
  Tape::Id relation;
};

// Builds the encoder forward pass on the tape. Per layer, each bucket's
// composed messages are linearly transformed, mean-aggregated per
// destination, summed with the self-loop message and passed through the
// activation; the relation table is transformed by w_rel. Empty buckets are
// skipped, so a fused graph without alignment edges runs the exact same op
// sequence as the per-KG encoder.
EncodeIds encode_on_tape(Tape& tape, ModelParams& params, const GraphAdjacency& graph);

// Convenience no-grad forward pass. Throws NumericError if the result is not
// finite.
EncodedGraph encode(const ModelParams& params, const GraphAdjacency& graph);

// Goodness column (n x 1, higher = more plausible) for index triples over
// encoded tables H (entities) and R (relations; forward rows).
//   TransE-L1:  -|h + r - t|_1
//   TransE-L2:  -|h + r - t|_2
//   DistMult:   sum(h * r * t)
Tape::Id goodness_on_tape(Tape& tape, ScoreKind kind, Tape::Id H, Tape::Id R,
                          const std::vector<uint32_t>& h_idx,
                          const std::vector<uint32_t>& r_idx,
                          const std::vector<uint32_t>& t_idx);

double score_triple(ScoreKind kind, const double* h, const double* r, const double* t,
                    size_t d);

enum class QuerySlot { kHead, kTail, kRelation };

// Scores every candidate for one query. The two fixed ids of (head, rel_id,
// tail) are taken according to `slot`; candidates fill the remaining slot.
// `cand` may be nullptr, meaning candidates 0..n_cand-1. Entity slots draw
// candidates from `ent`, the relation slot from the forward rows of `rel`.
void score_query(ScoreKind kind, const Matrix& ent, const Matrix& rel, QuerySlot slot,
                 uint32_t head, uint32_t rel_id, uint32_t tail, const uint32_t* cand,
                 size_t n_cand, double* out);

// Checkpoint I/O: a small JSON header (metadata, shapes) followed by raw
// little-endian float64 tensor blocks.
void save_model(const std::filesystem::path& path, const ModelParams& params,
                const std::map<std::string, std::string>& meta);

struct LoadedModel {
  ModelParams params;
  std::map<std::string, std::string> meta;
};

LoadedModel load_model(const std::filesystem::path& path);

}  // namespace ckgc
