#include "ckgc/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ckgc/errors.hpp"
#include "ckgc/kernels.hpp"

namespace ckgc {

namespace {
const kernels::KernelTable& K() { return kernels::active(); }

void fill_uniform(Matrix& m, double bound, Rng& rng) {
  for (double& v : m.data) v = rng.uniform_real(-bound, bound);
}

std::vector<double> bucket_norm(const std::vector<uint32_t>& dst, uint32_t n_nodes) {
  std::vector<uint32_t> counts(n_nodes, 0);
  for (uint32_t v : dst) ++counts[v];
  std::vector<double> norm(n_nodes, 0.0);
  for (uint32_t v = 0; v < n_nodes; ++v) {
    if (counts[v] > 0) norm[v] = 1.0 / static_cast<double>(counts[v]);
  }
  return norm;
}
}  // namespace

std::string to_string(ScoreKind k) {
  switch (k) {
    case ScoreKind::kTransEL1: return "transe_l1";
    case ScoreKind::kTransEL2: return "transe_l2";
    case ScoreKind::kDistMult: return "distmult";
  }
  return "?";
}

std::string to_string(Composition c) {
  return c == Composition::kSubtract ? "sub" : "mult";
}

std::string to_string(Activation a) {
  return a == Activation::kTanh ? "tanh" : "identity";
}

ScoreKind score_kind_from_string(const std::string& s) {
  if (s == "transe_l1") return ScoreKind::kTransEL1;
  if (s == "transe_l2") return ScoreKind::kTransEL2;
  if (s == "distmult") return ScoreKind::kDistMult;
  throw ConfigError("unknown score function \"" + s +
                    "\" (expected transe_l1, transe_l2 or distmult)");
}

Composition composition_from_string(const std::string& s) {
  if (s == "sub") return Composition::kSubtract;
  if (s == "mult") return Composition::kMultiply;
  throw ConfigError("unknown composition \"" + s + "\" (expected sub or mult)");
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw ConfigError("unknown activation \"" + s + "\" (expected tanh or identity)");
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint32_t n_entities,
                              uint32_t n_rel_param, bool has_align, Rng& rng) {
  if (cfg.dim == 0) throw ConfigError("embedding dimension must be positive");
  if (n_entities == 0 || n_rel_param == 0) {
    throw DataError("cannot initialize a model over an empty vocabulary");
  }
  ModelParams p;
  p.cfg = cfg;
  p.n_entities = n_entities;
  p.n_rel_param = n_rel_param;
  p.has_align = has_align;

  const size_t d = cfg.dim;
  p.entity_emb = Matrix(n_entities, d);
  p.relation_emb = Matrix(2 * static_cast<size_t>(n_rel_param), d);
  p.w_out = Matrix(d, d);
  p.w_in = Matrix(d, d);
  p.w_loop = Matrix(d, d);
  p.w_rel = Matrix(d, d);
  p.self_loop_rel = Matrix(1, d);
  if (has_align) p.w_align = Matrix(d, d);

  const double bound = 6.0 / std::sqrt(static_cast<double>(d));
  fill_uniform(p.entity_emb, bound, rng);
  fill_uniform(p.relation_emb, bound, rng);
  fill_uniform(p.w_out, bound, rng);
  fill_uniform(p.w_in, bound, rng);
  fill_uniform(p.w_loop, bound, rng);
  fill_uniform(p.w_rel, bound, rng);
  fill_uniform(p.self_loop_rel, bound, rng);
  if (has_align) fill_uniform(p.w_align, bound, rng);

  p.g_entity_emb = Matrix(p.entity_emb.rows, d);
  p.g_relation_emb = Matrix(p.relation_emb.rows, d);
  p.g_w_out = Matrix(d, d);
  p.g_w_in = Matrix(d, d);
  p.g_w_loop = Matrix(d, d);
  p.g_w_rel = Matrix(d, d);
  p.g_self_loop_rel = Matrix(1, d);
  if (has_align) p.g_w_align = Matrix(d, d);
  return p;
}

std::vector<ModelParams::Group> ModelParams::groups() {
  std::vector<Group> g = {
      {"entity_emb", &entity_emb, &g_entity_emb},
      {"relation_emb", &relation_emb, &g_relation_emb},
      {"w_out", &w_out, &g_w_out},
      {"w_in", &w_in, &g_w_in},
      {"w_loop", &w_loop, &g_w_loop},
      {"w_rel", &w_rel, &g_w_rel},
      {"self_loop_rel", &self_loop_rel, &g_self_loop_rel},
  };
  if (has_align) g.push_back({"w_align", &w_align, &g_w_align});
  return g;
}

void ModelParams::zero_grads() {
  for (auto& g : groups()) g.grad->zero();
}

bool ModelParams::values_finite() const {
  auto& self = const_cast<ModelParams&>(*this);
  for (auto& g : self.groups()) {
    if (!g.value->all_finite()) return false;
  }
  return true;
}

GraphAdjacency GraphAdjacency::from_kg(const KgData& kg) {
  GraphAdjacency g;
  g.n_nodes = kg.n_entities();
  g.n_rel_param = kg.n_relations();
  g.out.src.reserve(kg.train.size());
  for (const auto& t : kg.train) {
    g.out.src.push_back(t.head);
    g.out.rel.push_back(t.rel);
    g.out.dst.push_back(t.tail);
    g.in.src.push_back(t.tail);
    g.in.rel.push_back(g.n_rel_param + t.rel);
    g.in.dst.push_back(t.head);
  }
  g.out.dst_norm = bucket_norm(g.out.dst, g.n_nodes);
  g.in.dst_norm = bucket_norm(g.in.dst, g.n_nodes);
  return g;
}

GraphAdjacency GraphAdjacency::from_fused(const FusedKg& fused) {
  GraphAdjacency g;
  g.n_nodes = fused.n_entities;
  g.n_rel_param = fused.n_rel_param;
  for (const auto& t : fused.triples) {
    const uint32_t row = fused.rel_param_of_global[t.rel];
    g.out.src.push_back(t.head);
    g.out.rel.push_back(row);
    g.out.dst.push_back(t.tail);
    g.in.src.push_back(t.tail);
    g.in.rel.push_back(g.n_rel_param + row);
    g.in.dst.push_back(t.head);
  }
  // Each seed alignment exchanges messages in both directions.
  for (const auto& [u, v] : fused.align_edges) {
    g.align.src.push_back(u);
    g.align.dst.push_back(v);
    g.align.src.push_back(v);
    g.align.dst.push_back(u);
  }
  g.out.dst_norm = bucket_norm(g.out.dst, g.n_nodes);
  g.in.dst_norm = bucket_norm(g.in.dst, g.n_nodes);
  g.align.dst_norm = bucket_norm(g.align.dst, g.n_nodes);
  return g;
}

EncodeIds encode_on_tape(Tape& tape, ModelParams& p, const GraphAdjacency& graph) {
  if (graph.n_nodes != p.n_entities || graph.n_rel_param != p.n_rel_param) {
    throw DataError("graph and model vocabulary sizes do not match");
  }
  if (!graph.align.empty() && !p.has_align) {
    throw ConfigError("graph has alignment edges but the model has no w_align");
  }

  Tape::Id H = tape.leaf(&p.entity_emb, &p.g_entity_emb);
  Tape::Id R = tape.leaf(&p.relation_emb, &p.g_relation_emb);
  Tape::Id w_out = tape.leaf(&p.w_out, &p.g_w_out);
  Tape::Id w_in = tape.leaf(&p.w_in, &p.g_w_in);
  Tape::Id w_loop = tape.leaf(&p.w_loop, &p.g_w_loop);
  Tape::Id w_rel = tape.leaf(&p.w_rel, &p.g_w_rel);
  Tape::Id loop_rel = tape.leaf(&p.self_loop_rel, &p.g_self_loop_rel);
  Tape::Id w_align = 0;
  if (p.has_align) w_align = tape.leaf(&p.w_align, &p.g_w_align);

  const bool subtract = p.cfg.composition == Composition::kSubtract;

  for (uint32_t layer = 0; layer < p.cfg.layers; ++layer) {
    // Relational buckets: compose source entity with relation, transform,
    // mean-aggregate per destination.
    auto bucket_term = [&](const MessageBucket& b, Tape::Id w, bool composed) {
      Tape::Id hs = tape.gather_rows(H, b.src);
      Tape::Id msg = hs;
      if (composed) {
        Tape::Id rs = tape.gather_rows(R, b.rel);
        msg = subtract ? tape.sub(hs, rs) : tape.mul(hs, rs);
      }
      Tape::Id transformed = tape.linear(msg, w);
      Tape::Id pooled = tape.scatter_sum(transformed, b.dst, graph.n_nodes);
      return tape.scale_rows(pooled, b.dst_norm);
    };

    Tape::Id composed_loop = subtract ? tape.sub_brow(H, loop_rel) : tape.mul_brow(H, loop_rel);
    Tape::Id z = tape.linear(composed_loop, w_loop);
    if (!graph.out.empty()) z = tape.add(z, bucket_term(graph.out, w_out, true));
    if (!graph.in.empty()) z = tape.add(z, bucket_term(graph.in, w_in, true));
    if (!graph.align.empty()) z = tape.add(z, bucket_term(graph.align, w_align, false));

    H = p.cfg.activation == Activation::kTanh ? tape.tanh(z) : z;
    R = tape.linear(R, w_rel);
  }
  return EncodeIds{H, R};
}

EncodedGraph encode(const ModelParams& params, const GraphAdjacency& graph) {
  // backward() is never called here, so the grad buffers stay untouched.
  auto& p = const_cast<ModelParams&>(params);
  Tape tape;
  EncodeIds ids = encode_on_tape(tape, p, graph);
  EncodedGraph out;
  out.entity_out = tape.value(ids.entity);
  out.relation_out = tape.value(ids.relation);
  if (!out.entity_out.all_finite() || !out.relation_out.all_finite()) {
    throw NumericError("encoder produced non-finite embeddings");
  }
  return out;
}

Tape::Id goodness_on_tape(Tape& tape, ScoreKind kind, Tape::Id H, Tape::Id R,
                          const std::vector<uint32_t>& h_idx,
                          const std::vector<uint32_t>& r_idx,
                          const std::vector<uint32_t>& t_idx) {
  Tape::Id h = tape.gather_rows(H, h_idx);
  Tape::Id r = tape.gather_rows(R, r_idx);
  Tape::Id t = tape.gather_rows(H, t_idx);
  switch (kind) {
    case ScoreKind::kTransEL1: {
      Tape::Id diff = tape.sub(tape.add(h, r), t);
      return tape.scale(tape.row_sum(tape.abs(diff)), -1.0);
    }
    case ScoreKind::kTransEL2: {
      Tape::Id diff = tape.sub(tape.add(h, r), t);
      Tape::Id sq = tape.mul(diff, diff);
      return tape.scale(tape.sqrt(tape.row_sum(sq)), -1.0);
    }
    case ScoreKind::kDistMult: {
      return tape.row_sum(tape.mul(tape.mul(h, r), t));
    }
  }
  throw ConfigError("unknown score function");
}

double score_triple(ScoreKind kind, const double* h, const double* r, const double* t,
                    size_t d) {
  switch (kind) {
    case ScoreKind::kTransEL1: {
      std::vector<double> q(h, h + d);
      K().axpy(1.0, r, q.data(), d);
      return -K().l1_dist(q.data(), t, d);
    }
    case ScoreKind::kTransEL2: {
      std::vector<double> q(h, h + d);
      K().axpy(1.0, r, q.data(), d);
      return -std::sqrt(K().l2_dist_sq(q.data(), t, d));
    }
    case ScoreKind::kDistMult:
      return K().dot3(h, r, t, d);
  }
  throw ConfigError("unknown score function");
}

void score_query(ScoreKind kind, const Matrix& ent, const Matrix& rel, QuerySlot slot,
                 uint32_t head, uint32_t rel_id, uint32_t tail, const uint32_t* cand,
                 size_t n_cand, double* out) {
  const size_t d = ent.cols;
  const Matrix& ctab = slot == QuerySlot::kRelation ? rel : ent;
  std::vector<double> q(d);

  const bool transe = kind != ScoreKind::kDistMult;
  if (transe) {
    // Fold the fixed slots into one query point so each candidate costs one
    // distance evaluation: tail slot compares h+r with t', head slot t-r
    // with h', relation slot t-h with r'.
    switch (slot) {
      case QuerySlot::kTail:
        K().vadd(ent.row(head), rel.row(rel_id), q.data(), d);
        break;
      case QuerySlot::kHead:
        K().vsub(ent.row(tail), rel.row(rel_id), q.data(), d);
        break;
      case QuerySlot::kRelation:
        K().vsub(ent.row(tail), ent.row(head), q.data(), d);
        break;
    }
  } else {
    switch (slot) {
      case QuerySlot::kTail:
        K().vmul(ent.row(head), rel.row(rel_id), q.data(), d);
        break;
      case QuerySlot::kHead:
        K().vmul(rel.row(rel_id), ent.row(tail), q.data(), d);
        break;
      case QuerySlot::kRelation:
        K().vmul(ent.row(head), ent.row(tail), q.data(), d);
        break;
    }
  }

  for (size_t i = 0; i < n_cand; ++i) {
    const uint32_t id = cand ? cand[i] : static_cast<uint32_t>(i);
    assert(id < ctab.rows);
    const double* c = ctab.row(id);
    switch (kind) {
      case ScoreKind::kTransEL1:
        out[i] = -K().l1_dist(q.data(), c, d);
        break;
      case ScoreKind::kTransEL2:
        out[i] = -std::sqrt(K().l2_dist_sq(q.data(), c, d));
        break;
      case ScoreKind::kDistMult:
        out[i] = K().dot(q.data(), c, d);
        break;
    }
  }
}

namespace {
constexpr char kMagic[8] = {'C', 'K', 'G', 'C', 'M', 'D', 'L', '1'};

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw DataError(path + ": truncated checkpoint");
  }
  return v;
}
}  // namespace

void save_model(const std::filesystem::path& path, const ModelParams& params,
                const std::map<std::string, std::string>& meta) {
  auto& p = const_cast<ModelParams&>(params);
  nlohmann::json header;
  header["version"] = 1;
  header["meta"] = meta;
  header["config"] = {
      {"dim", params.cfg.dim},
      {"layers", params.cfg.layers},
      {"score", to_string(params.cfg.score)},
      {"composition", to_string(params.cfg.composition)},
      {"activation", to_string(params.cfg.activation)},
  };
  header["n_entities"] = params.n_entities;
  header["n_rel_param"] = params.n_rel_param;
  header["has_align"] = params.has_align;
  nlohmann::json tensors = nlohmann::json::array();
  for (auto& g : p.groups()) {
    tensors.push_back({{"name", g.name}, {"rows", g.value->rows}, {"cols", g.value->cols}});
  }
  header["tensors"] = tensors;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::string hs = header.dump();
  write_u32(out, static_cast<uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (auto& g : p.groups()) {
    out.write(reinterpret_cast<const char*>(g.value->data.data()),
              static_cast<std::streamsize>(g.value->size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing " + path.string());
}

LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + ": not a model checkpoint");
  }
  const uint32_t header_len = read_u32(in, path.string());
  std::string hs(header_len, '\0');
  if (!in.read(hs.data(), header_len)) {
    throw DataError(path.string() + ": truncated checkpoint header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (header.value("version", 0) != 1) {
    throw DataError(path.string() + ": unsupported checkpoint version");
  }

  LoadedModel lm;
  for (auto& [k, v] : header.at("meta").items()) {
    lm.meta[k] = v.get<std::string>();
  }
  ModelConfig cfg;
  const auto& jc = header.at("config");
  cfg.dim = jc.at("dim").get<uint32_t>();
  cfg.layers = jc.at("layers").get<uint32_t>();
  cfg.score = score_kind_from_string(jc.at("score").get<std::string>());
  cfg.composition = composition_from_string(jc.at("composition").get<std::string>());
  cfg.activation = activation_from_string(jc.at("activation").get<std::string>());

  Rng scratch(0);
  lm.params = ModelParams::init(cfg, header.at("n_entities").get<uint32_t>(),
                                header.at("n_rel_param").get<uint32_t>(),
                                header.at("has_align").get<bool>(), scratch);

  auto groups = lm.params.groups();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != groups.size()) {
    throw DataError(path.string() + ": checkpoint tensor list does not match model");
  }
  for (size_t i = 0; i < groups.size(); ++i) {
    const auto& t = tensors.at(i);
    if (t.at("name").get<std::string>() != groups[i].name ||
        t.at("rows").get<size_t>() != groups[i].value->rows ||
        t.at("cols").get<size_t>() != groups[i].value->cols) {
      throw DataError(path.string() + ": tensor \"" + groups[i].name +
                      "\" has unexpected shape");
    }
    if (!in.read(reinterpret_cast<char*>(groups[i].value->data.data()),
                 static_cast<std::streamsize>(groups[i].value->size() * sizeof(double)))) {
      throw DataError(path.string() + ": truncated tensor \"" + groups[i].name + "\"");
    }
  }
  lm.params.zero_grads();
  return lm;
}

}  // namespace ckgc
