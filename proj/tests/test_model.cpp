#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <ckgc/errors.hpp>
#include <ckgc/kg.hpp>
#include <ckgc/matrix.hpp>
#include <ckgc/model.hpp>
#include <ckgc/rng.hpp>
#include <ckgc/tape.hpp>

using namespace ckgc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("ckgc_model_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

void fill_random(Matrix& m, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (double& v : m.data) v = rng.uniform_real(lo, hi);
}

KgData tiny_kg(uint32_t n_ent, uint32_t n_rel, std::vector<LocalTriple> train) {
  KgData kg;
  kg.name = "kg";
  for (uint32_t i = 0; i < n_ent; ++i) kg.entity_names.push_back("e" + std::to_string(i));
  for (uint32_t i = 0; i < n_rel; ++i) kg.relation_names.push_back("r" + std::to_string(i));
  kg.train = std::move(train);
  return kg;
}

// Plain-loop scoring, independent of the kernel-backed implementation.
double loop_score(ScoreKind kind, const double* h, const double* r, const double* t,
                  size_t d) {
  double acc = 0.0;
  switch (kind) {
    case ScoreKind::kTransEL1:
      for (size_t i = 0; i < d; ++i) acc += std::abs(h[i] + r[i] - t[i]);
      return -acc;
    case ScoreKind::kTransEL2:
      for (size_t i = 0; i < d; ++i) {
        const double e = h[i] + r[i] - t[i];
        acc += e * e;
      }
      return -std::sqrt(acc);
    case ScoreKind::kDistMult:
      for (size_t i = 0; i < d; ++i) acc += h[i] * r[i] * t[i];
      return acc;
  }
  return 0.0;
}

}  // namespace

TEST_CASE("model labels round-trip and reject unknown names") {
  for (ScoreKind k : {ScoreKind::kTransEL1, ScoreKind::kTransEL2, ScoreKind::kDistMult}) {
    CHECK(score_kind_from_string(to_string(k)) == k);
  }
  for (Composition c : {Composition::kSubtract, Composition::kMultiply}) {
    CHECK(composition_from_string(to_string(c)) == c);
  }
  for (Activation a : {Activation::kTanh, Activation::kIdentity}) {
    CHECK(activation_from_string(to_string(a)) == a);
  }
  CHECK(to_string(ScoreKind::kDistMult) == "distmult");
  CHECK(to_string(Composition::kSubtract) == "sub");
  CHECK(to_string(Activation::kIdentity) == "identity");
  CHECK_THROWS_WITH_AS(score_kind_from_string("transe"), doctest::Contains("transe"),
                       ConfigError);
  CHECK_THROWS_AS(composition_from_string("add"), ConfigError);
  CHECK_THROWS_AS(activation_from_string("relu"), ConfigError);
}

TEST_CASE("parameter initialization") {
  ModelConfig cfg;
  cfg.dim = 4;

  SUBCASE("shapes, bounds and group list") {
    Rng rng(1);
    ModelParams p = ModelParams::init(cfg, 5, 3, /*has_align=*/false, rng);
    CHECK(p.entity_emb.rows == 5);
    CHECK(p.entity_emb.cols == 4);
    CHECK(p.relation_emb.rows == 6);  // forward rows then inverse rows
    CHECK(p.w_out.rows == 4);
    CHECK(p.w_out.cols == 4);
    CHECK(p.self_loop_rel.rows == 1);
    CHECK(p.w_align.empty());
    CHECK(p.groups().size() == 7);

    Rng rng2(2);
    ModelParams q = ModelParams::init(cfg, 5, 3, /*has_align=*/true, rng2);
    CHECK(q.w_align.rows == 4);
    CHECK(q.groups().size() == 8);
    CHECK(q.groups().back().name == "w_align");

    const double bound = 6.0 / std::sqrt(4.0);
    double lo = 1e9, hi = -1e9;
    for (auto& g : p.groups()) {
      for (double v : g.value->data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      CHECK(g.grad->same_shape(*g.value));
    }
    CHECK(lo >= -bound);
    CHECK(hi <= bound);
    CHECK(lo < hi);  // actually randomized, not constant
  }

  SUBCASE("same seed gives identical tensors") {
    Rng a(7), b(7);
    ModelParams pa = ModelParams::init(cfg, 6, 2, true, a);
    ModelParams pb = ModelParams::init(cfg, 6, 2, true, b);
    for (size_t i = 0; i < pa.groups().size(); ++i) {
      CHECK(pa.groups()[i].value->data == pb.groups()[i].value->data);
    }
  }

  SUBCASE("zero_grads and values_finite") {
    Rng rng(3);
    ModelParams p = ModelParams::init(cfg, 4, 2, true, rng);
    for (auto& g : p.groups()) std::fill(g.grad->data.begin(), g.grad->data.end(), 1.0);
    p.zero_grads();
    for (auto& g : p.groups()) {
      for (double v : g.grad->data) CHECK(v == 0.0);
    }
    CHECK(p.values_finite());
    p.w_in.at(1, 1) = std::nan("");
    CHECK_FALSE(p.values_finite());
  }

  SUBCASE("rejects empty configurations") {
    Rng rng(4);
    ModelConfig zero = cfg;
    zero.dim = 0;
    CHECK_THROWS_AS(ModelParams::init(zero, 3, 1, false, rng), ConfigError);
    CHECK_THROWS_AS(ModelParams::init(cfg, 0, 1, false, rng), DataError);
    CHECK_THROWS_AS(ModelParams::init(cfg, 3, 0, false, rng), DataError);
  }
}

TEST_CASE("score_triple closed-form examples") {
  const double h1[] = {1.0, 0.0};
  const double r1[] = {0.0, 1.0};
  const double t1[] = {0.0, 0.0};
  CHECK(score_triple(ScoreKind::kTransEL1, h1, r1, t1, 2) == doctest::Approx(-2.0));
  CHECK(score_triple(ScoreKind::kTransEL2, h1, r1, t1, 2) ==
        doctest::Approx(-std::sqrt(2.0)));

  const double h2[] = {1.0, 2.0};
  const double r2[] = {2.0, 1.0};
  const double t2[] = {1.0, 1.0};
  CHECK(score_triple(ScoreKind::kDistMult, h2, r2, t2, 2) == doctest::Approx(4.0));

  SUBCASE("random vectors match a plain-loop evaluation") {
    Rng rng(11);
    const size_t d = 7;
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> h(d), r(d), t(d);
      for (size_t i = 0; i < d; ++i) {
        h[i] = rng.uniform_real(-2, 2);
        r[i] = rng.uniform_real(-2, 2);
        t[i] = rng.uniform_real(-2, 2);
      }
      for (ScoreKind k :
           {ScoreKind::kTransEL1, ScoreKind::kTransEL2, ScoreKind::kDistMult}) {
        CHECK(score_triple(k, h.data(), r.data(), t.data(), d) ==
              doctest::Approx(loop_score(k, h.data(), r.data(), t.data(), d))
                  .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("goodness_on_tape agrees with score_triple") {
  Rng rng(5);
  Matrix ents(6, 5), rels(4, 5);
  fill_random(ents, rng);
  fill_random(rels, rng);
  const std::vector<uint32_t> h_idx = {0, 1, 5, 2};
  const std::vector<uint32_t> r_idx = {0, 3, 1, 2};
  const std::vector<uint32_t> t_idx = {1, 0, 2, 2};

  for (ScoreKind k : {ScoreKind::kTransEL1, ScoreKind::kTransEL2, ScoreKind::kDistMult}) {
    CAPTURE(to_string(k));
    Tape tape;
    Tape::Id H = tape.constant(ents);
    Tape::Id R = tape.constant(rels);
    Tape::Id g = goodness_on_tape(tape, k, H, R, h_idx, r_idx, t_idx);
    Matrix got = tape.value(g);
    REQUIRE(got.rows == 4);
    REQUIRE(got.cols == 1);
    for (size_t b = 0; b < 4; ++b) {
      const double want = score_triple(k, ents.row(h_idx[b]), rels.row(r_idx[b]),
                                       ents.row(t_idx[b]), 5);
      CHECK(got.at(b, 0) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("score_query fills each slot consistently with score_triple") {
  Rng rng(17);
  const size_t d = 6;
  Matrix ent(8, d), rel(3, d);
  fill_random(ent, rng);
  fill_random(rel, rng);
  const uint32_t head = 2, rel_id = 1, tail = 5;

  for (ScoreKind k : {ScoreKind::kTransEL1, ScoreKind::kTransEL2, ScoreKind::kDistMult}) {
    CAPTURE(to_string(k));
    for (QuerySlot slot : {QuerySlot::kHead, QuerySlot::kTail, QuerySlot::kRelation}) {
      const size_t n_cand = slot == QuerySlot::kRelation ? rel.rows : ent.rows;
      std::vector<double> out(n_cand);
      score_query(k, ent, rel, slot, head, rel_id, tail, nullptr, n_cand, out.data());
      for (uint32_t c = 0; c < n_cand; ++c) {
        double want = 0;
        switch (slot) {
          case QuerySlot::kHead:
            want = score_triple(k, ent.row(c), rel.row(rel_id), ent.row(tail), d);
            break;
          case QuerySlot::kTail:
            want = score_triple(k, ent.row(head), rel.row(rel_id), ent.row(c), d);
            break;
          case QuerySlot::kRelation:
            want = score_triple(k, ent.row(head), rel.row(c), ent.row(tail), d);
            break;
        }
        CHECK(out[c] == doctest::Approx(want).epsilon(1e-12));
      }

      // An explicit candidate list picks out the same values.
      const std::vector<uint32_t> cand = {1, 0, 2};
      std::vector<double> picked(cand.size());
      score_query(k, ent, rel, slot, head, rel_id, tail, cand.data(), cand.size(),
                  picked.data());
      for (size_t i = 0; i < cand.size(); ++i) CHECK(picked[i] == out[cand[i]]);
    }
  }
}

TEST_CASE("encoder forward pass matches a hand-computed example") {
  // 3 entities, 1 relation, train = {(0,r,2), (1,r,2)}. Node 2 receives two
  // forward messages (mean-pooled), nodes 0 and 1 one inverse message each.
  KgData kg = tiny_kg(3, 1, {{0, 0, 2}, {1, 0, 2}});
  GraphAdjacency graph = GraphAdjacency::from_kg(kg);

  CHECK(graph.out.src == std::vector<uint32_t>{0, 1});
  CHECK(graph.out.dst == std::vector<uint32_t>{2, 2});
  CHECK(graph.out.rel == std::vector<uint32_t>{0, 0});
  CHECK(graph.in.src == std::vector<uint32_t>{2, 2});
  CHECK(graph.in.dst == std::vector<uint32_t>{0, 1});
  CHECK(graph.in.rel == std::vector<uint32_t>{1, 1});  // inverse rows offset by 1
  CHECK(graph.out.dst_norm == std::vector<double>{0.0, 0.0, 0.5});
  CHECK(graph.in.dst_norm == std::vector<double>{1.0, 1.0, 0.0});
  CHECK(graph.align.empty());

  ModelConfig cfg;
  cfg.dim = 2;
  cfg.layers = 1;
  cfg.composition = Composition::kSubtract;
  cfg.activation = Activation::kIdentity;
  Rng rng(1);
  ModelParams p = ModelParams::init(cfg, 3, 1, false, rng);

  p.entity_emb.data = {0.5, -1.0, 2.0, 0.25, -1.0, 1.0};
  p.relation_emb.data = {1.0, -0.5, -0.25, 0.75};  // forward row, inverse row
  p.self_loop_rel.data = {0.2, -0.3};
  p.w_loop.data = {1, 2, 3, 4};
  p.w_out.data = {0.5, -1, 1, 0.5};
  p.w_in.data = {2, 0, 0, -1};
  p.w_rel.data = {1, 1, -1, 2};

  // Per node: w_loop (e_v - s) + mean over incoming buckets of w (e_src - e_rel),
  // where linear() applies the transposed weight (out = x w^T).
  //   z0 = w_loop(e0-s) + w_in(e2-r_inv)          = (-1.1,-1.9) + (-1.5,-0.25)
  //   z1 = w_loop(e1-s) + w_in(e2-r_inv)          = ( 2.9, 7.6) + (-1.5,-0.25)
  //   z2 = w_loop(e2-s) + 0.5*sum w_out(e_h-r)    = ( 1.4, 1.6) + ( 0.0, 0.3125)
  const std::vector<std::vector<double>> want_h = {
      {-2.6, -2.15}, {1.4, 7.35}, {1.4, 1.9125}};
  // Relation table passes through w_rel: row' = row w_rel^T.
  const std::vector<std::vector<double>> want_r = {{0.5, -2.0}, {0.5, 1.75}};

  SUBCASE("identity activation") {
    EncodedGraph enc = encode(p, graph);
    REQUIRE(enc.entity_out.rows == 3);
    REQUIRE(enc.relation_out.rows == 2);
    for (size_t v = 0; v < 3; ++v)
      for (size_t j = 0; j < 2; ++j)
        CHECK(enc.entity_out.at(v, j) == doctest::Approx(want_h[v][j]).epsilon(1e-12));
    for (size_t r = 0; r < 2; ++r)
      for (size_t j = 0; j < 2; ++j)
        CHECK(enc.relation_out.at(r, j) == doctest::Approx(want_r[r][j]).epsilon(1e-12));
  }

  SUBCASE("tanh applies elementwise to the same pre-activation") {
    p.cfg.activation = Activation::kTanh;
    EncodedGraph enc = encode(p, graph);
    for (size_t v = 0; v < 3; ++v)
      for (size_t j = 0; j < 2; ++j)
        CHECK(enc.entity_out.at(v, j) ==
              doctest::Approx(std::tanh(want_h[v][j])).epsilon(1e-12));
    // The relation transform has no activation.
    CHECK(enc.relation_out.at(0, 1) == doctest::Approx(-2.0).epsilon(1e-12));
  }

  SUBCASE("multiply composition swaps the sub for a product") {
    p.cfg.composition = Composition::kMultiply;
    EncodedGraph enc = encode(p, graph);
    // z0 = w_loop(e0*s) + w_in(e2*r_inv) = (0.7, 1.5) + (0.5, -0.75)
    CHECK(enc.entity_out.at(0, 0) == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(enc.entity_out.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  }
}

TEST_CASE("two layers reuse one weight set") {
  KgData kg = tiny_kg(3, 1, {{0, 0, 2}, {1, 0, 2}});
  GraphAdjacency graph = GraphAdjacency::from_kg(kg);
  ModelConfig cfg;
  cfg.dim = 4;
  cfg.layers = 2;
  cfg.activation = Activation::kTanh;
  Rng rng(9);
  ModelParams p = ModelParams::init(cfg, 3, 1, false, rng);

  // Running the 1-layer encoder twice by hand, feeding layer-1 outputs back in
  // as the embedding tables, must equal the 2-layer pass.
  ModelParams one = p;
  one.cfg.layers = 1;
  EncodedGraph first = encode(one, graph);
  ModelParams second = p;
  second.cfg.layers = 1;
  second.entity_emb = first.entity_out;
  second.relation_emb = first.relation_out;
  EncodedGraph manual = encode(second, graph);

  EncodedGraph full = encode(p, graph);
  for (size_t i = 0; i < full.entity_out.size(); ++i)
    CHECK(full.entity_out.data[i] == doctest::Approx(manual.entity_out.data[i]).epsilon(1e-12));
  for (size_t i = 0; i < full.relation_out.size(); ++i)
    CHECK(full.relation_out.data[i] ==
          doctest::Approx(manual.relation_out.data[i]).epsilon(1e-12));
}

TEST_CASE("encoder is equivariant to entity renumbering") {
  const uint32_t n = 5;
  std::vector<LocalTriple> triples = {{0, 0, 1}, {1, 1, 2}, {3, 0, 4}, {2, 1, 0}, {4, 0, 1}};
  KgData kg1 = tiny_kg(n, 2, triples);

  const std::vector<uint32_t> perm = {3, 0, 4, 2, 1};  // new id of old entity i
  std::vector<LocalTriple> permuted;
  for (const auto& t : triples) permuted.push_back({perm[t.head], t.rel, perm[t.tail]});
  KgData kg2 = tiny_kg(n, 2, permuted);

  ModelConfig cfg;
  cfg.dim = 3;
  cfg.layers = 2;
  Rng rng(21);
  ModelParams p1 = ModelParams::init(cfg, n, 2, false, rng);
  ModelParams p2 = p1;
  for (uint32_t i = 0; i < n; ++i)
    for (size_t j = 0; j < cfg.dim; ++j)
      p2.entity_emb.at(perm[i], j) = p1.entity_emb.at(i, j);

  EncodedGraph e1 = encode(p1, GraphAdjacency::from_kg(kg1));
  EncodedGraph e2 = encode(p2, GraphAdjacency::from_kg(kg2));
  for (uint32_t i = 0; i < n; ++i)
    for (size_t j = 0; j < cfg.dim; ++j)
      CHECK(e2.entity_out.at(perm[i], j) == e1.entity_out.at(i, j));
  CHECK(e2.relation_out.data == e1.relation_out.data);
}

TEST_CASE("fused adjacency carries alignment edges both ways") {
  MultiKgStore store;
  store.name = "s";
  store.kgs.push_back(tiny_kg(2, 1, {{0, 0, 1}}));
  store.kgs[0].name = "a";
  store.kgs.push_back(tiny_kg(2, 1, {{0, 0, 1}}));
  store.kgs[1].name = "b";
  store.alignments.push_back(make_alignment({0, 1}, {1, 0}));
  FusedKg fused = build_fused_kg(store);

  GraphAdjacency g = GraphAdjacency::from_fused(fused);
  CHECK(g.n_nodes == 4);
  CHECK(g.align.src == std::vector<uint32_t>{1, 2});
  CHECK(g.align.dst == std::vector<uint32_t>{2, 1});
  CHECK(g.align.rel.empty());  // alignment messages compose with no relation
  CHECK(g.align.dst_norm == std::vector<double>{0.0, 1.0, 1.0, 0.0});
  CHECK(g.out.src.size() == 2);
  CHECK(g.in.src.size() == 2);

  SUBCASE("encoding an aligned graph requires w_align") {
    ModelConfig cfg;
    cfg.dim = 2;
    Rng rng(2);
    ModelParams no_align = ModelParams::init(cfg, 4, fused.n_rel_param, false, rng);
    CHECK_THROWS_AS(encode(no_align, g), ConfigError);
    ModelParams with_align = ModelParams::init(cfg, 4, fused.n_rel_param, true, rng);
    CHECK_NOTHROW(encode(with_align, g));
  }
}

TEST_CASE("encode validates shapes and rejects non-finite output") {
  KgData kg = tiny_kg(3, 1, {{0, 0, 1}});
  GraphAdjacency graph = GraphAdjacency::from_kg(kg);
  ModelConfig cfg;
  cfg.dim = 2;
  Rng rng(3);

  ModelParams wrong = ModelParams::init(cfg, 4, 1, false, rng);  // 4 != 3 entities
  CHECK_THROWS_AS(encode(wrong, graph), DataError);

  ModelParams p = ModelParams::init(cfg, 3, 1, false, rng);
  p.entity_emb.at(0, 0) = std::nan("");
  CHECK_THROWS_AS(encode(p, graph), NumericError);
}

TEST_CASE("checkpoint save/load round-trip") {
  TempDir tmp;
  ModelConfig cfg;
  cfg.dim = 5;
  cfg.layers = 2;
  cfg.score = ScoreKind::kDistMult;
  cfg.composition = Composition::kMultiply;
  cfg.activation = Activation::kIdentity;
  Rng rng(31);
  ModelParams p = ModelParams::init(cfg, 7, 3, true, rng);
  const std::map<std::string, std::string> meta = {{"kg", "alpha"}, {"stage", "2"}};

  const fs::path file = tmp.path / "model.ckpt";
  save_model(file, p, meta);
  LoadedModel lm = load_model(file);

  CHECK(lm.meta == meta);
  CHECK(lm.params.cfg.dim == 5);
  CHECK(lm.params.cfg.layers == 2);
  CHECK(lm.params.cfg.score == ScoreKind::kDistMult);
  CHECK(lm.params.cfg.composition == Composition::kMultiply);
  CHECK(lm.params.cfg.activation == Activation::kIdentity);
  CHECK(lm.params.n_entities == 7);
  CHECK(lm.params.n_rel_param == 3);
  CHECK(lm.params.has_align);
  auto got = lm.params.groups();
  auto want = p.groups();
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].name == want[i].name);
    CHECK(got[i].value->data == want[i].value->data);  // bit-exact tensors
    for (double v : got[i].grad->data) CHECK(v == 0.0);
  }

  SUBCASE("missing, truncated and foreign files are DataErrors") {
    CHECK_THROWS_AS(load_model(tmp.path / "absent.ckpt"), DataError);

    std::ofstream(tmp.path / "junk.ckpt", std::ios::binary) << "not a checkpoint at all";
    CHECK_THROWS_AS(load_model(tmp.path / "junk.ckpt"), DataError);

    std::ifstream in(file, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(tmp.path / "cut.ckpt", std::ios::binary)
        << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_model(tmp.path / "cut.ckpt"), DataError);
  }
}
