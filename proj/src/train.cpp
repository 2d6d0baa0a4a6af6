#include "ckgc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ckgc/errors.hpp"
#include "ckgc/kernels.hpp"

namespace ckgc {

using nlohmann::json;

TrainConfig TrainConfig::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "gamma") cfg.gamma = value.get<double>();
      else if (key == "alpha") cfg.alpha = value.get<double>();
      else if (key == "theta") cfg.theta = value.get<double>();
      else if (key == "top_k") cfg.top_k = value.get<uint32_t>();
      else if (key == "neg_samples") cfg.neg_samples = value.get<uint32_t>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "epochs_stage1") cfg.epochs_stage1 = value.get<uint32_t>();
      else if (key == "epochs_stage2") cfg.epochs_stage2 = value.get<uint32_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<uint32_t>();
      else if (key == "seed") cfg.seed = value.get<uint64_t>();
      else if (key == "eval_every") cfg.eval_every = value.get<uint32_t>();
      else if (key == "patience") cfg.patience = value.get<uint32_t>();
      else if (key == "hinge") cfg.hinge = value.get<bool>();
      else if (key == "dim") cfg.model.dim = value.get<uint32_t>();
      else if (key == "layers") cfg.model.layers = value.get<uint32_t>();
      else if (key == "score") cfg.model.score = score_kind_from_string(value.get<std::string>());
      else if (key == "composition")
        cfg.model.composition = composition_from_string(value.get<std::string>());
      else if (key == "activation")
        cfg.model.activation = activation_from_string(value.get<std::string>());
      else if (key == "alpha_per_kg") {
        if (!value.is_object()) throw ConfigError("alpha_per_kg must be an object");
        for (const auto& [kg, a] : value.items()) cfg.alpha_per_kg[kg] = a.get<double>();
      } else {
        throw ConfigError("unknown config key \"" + key + "\"");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string TrainConfig::to_json_string() const {
  json j;
  j["gamma"] = gamma;
  j["alpha"] = alpha;
  j["theta"] = theta;
  j["top_k"] = top_k;
  j["neg_samples"] = neg_samples;
  j["lr"] = lr;
  j["epochs_stage1"] = epochs_stage1;
  j["epochs_stage2"] = epochs_stage2;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["patience"] = patience;
  j["hinge"] = hinge;
  j["dim"] = model.dim;
  j["layers"] = model.layers;
  j["score"] = to_string(model.score);
  j["composition"] = to_string(model.composition);
  j["activation"] = to_string(model.activation);
  j["alpha_per_kg"] = json::object();
  for (const auto& [kg, a] : alpha_per_kg) j["alpha_per_kg"][kg] = a;
  return j.dump(2);
}

void TrainConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
  if (theta < 0.0) throw ConfigError("theta must be non-negative");
  if (top_k == 0) throw ConfigError("top_k must be positive");
  if (neg_samples == 0) throw ConfigError("neg_samples must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
  if (model.dim == 0) throw ConfigError("dim must be positive");
  if (model.layers == 0) throw ConfigError("layers must be positive");
  for (const auto& [kg, a] : alpha_per_kg) {
    if (a < 0.0) throw ConfigError("alpha_per_kg[\"" + kg + "\"] must be non-negative");
  }
}

double TrainConfig::alpha_for(const std::string& kg_name) const {
  auto it = alpha_per_kg.find(kg_name);
  return it == alpha_per_kg.end() ? alpha : it->second;
}

PositiveSet::PositiveSet(uint32_t n_entities, uint32_t n_relations)
    : n_entities_(n_entities), n_relations_(n_relations) {}

std::vector<CorruptedTriple> sample_negatives(const LocalTriple& pos,
                                              const PositiveSet& positives,
                                              const CorruptionRange& range,
                                              uint32_t n, Rng& rng,
                                              size_t* budget_exhausted) {
  if (range.head_hi <= range.head_lo || range.tail_hi <= range.tail_lo) {
    throw DataError("empty corruption range");
  }
  std::vector<CorruptedTriple> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    const bool corrupt_tail = rng.coin();
    const uint32_t lo = corrupt_tail ? range.tail_lo : range.head_lo;
    const uint64_t span = corrupt_tail ? range.tail_hi - range.tail_lo
                                       : range.head_hi - range.head_lo;
    LocalTriple cand = pos;
    bool clean = false;
    for (uint32_t attempt = 0; attempt < kNegativeResampleBudget; ++attempt) {
      const uint32_t e = lo + static_cast<uint32_t>(rng.uniform(span));
      if (corrupt_tail) cand.tail = e; else cand.head = e;
      if (!positives.contains(cand)) {
        clean = true;
        break;
      }
    }
    if (!clean && budget_exhausted) ++(*budget_exhausted);
    out.push_back({cand, corrupt_tail});
  }
  return out;
}

double margin_loss(const std::vector<double>& pos, const std::vector<double>& neg,
                   double gamma, bool hinge) {
  if (pos.empty() || neg.size() % pos.size() != 0) {
    throw DataError("negative count must be a positive multiple of the positive count");
  }
  const size_t per_pos = neg.size() / pos.size();
  double total = 0.0;
  for (size_t i = 0; i < pos.size(); ++i) {
    for (size_t j = 0; j < per_pos; ++j) {
      const double v = neg[i * per_pos + j] - pos[i] + gamma;
      total += hinge ? std::max(0.0, v) : v;
    }
  }
  return total / static_cast<double>(neg.size());
}

std::vector<uint32_t> topk_candidates(const std::vector<double>& scores, uint32_t k) {
  if (k == 0 || k > scores.size()) {
    throw ConfigError("top-k must be in [1, candidate count]");
  }
  std::vector<uint32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](uint32_t a, uint32_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

double kd_loss(const std::vector<double>& teacher_probs,
               const std::vector<double>& student_probs, uint32_t k) {
  if (k == 0 || teacher_probs.size() != student_probs.size() ||
      teacher_probs.size() % k != 0) {
    throw DataError("teacher/student probability shapes disagree");
  }
  const size_t groups = teacher_probs.size() / k;
  double total = 0.0;
  for (size_t i = 0; i < teacher_probs.size(); ++i) {
    const double p = teacher_probs[i];
    if (p > 0.0) {
      total += p * (std::log(p) - std::log(std::max(student_probs[i], kStudentProbFloor)));
    }
  }
  return total / static_cast<double>(groups);
}

GateState update_gate(double mrr_individual, double mrr_fused, double theta) {
  GateState g;
  g.mrr_individual = mrr_individual;
  g.mrr_fused = mrr_fused;
  if (mrr_individual == mrr_fused) {
    g.teach_individual_to_fused = true;
    g.teach_fused_to_individual = true;
  } else if (mrr_individual > mrr_fused) {
    g.teach_individual_to_fused = true;
    g.teach_fused_to_individual = (mrr_individual - mrr_fused) < theta;
  } else {
    g.teach_fused_to_individual = true;
    g.teach_individual_to_fused = (mrr_fused - mrr_individual) < theta;
  }
  return g;
}

Adam::Adam(ModelParams& params, double lr) : params_(&params), lr_(lr) {
  auto groups = params.groups();
  m_.reserve(groups.size());
  v_.reserve(groups.size());
  for (auto& g : groups) {
    m_.emplace_back(g.value->rows, g.value->cols);
    v_.emplace_back(g.value->rows, g.value->cols);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
  auto groups = params_->groups();
  for (size_t i = 0; i < groups.size(); ++i) {
    if (!groups[i].grad->all_finite()) {
      throw NumericError("non-finite gradient in parameter group \"" +
                         groups[i].name + "\"");
    }
    kernels::active().adam_step(groups[i].value->data.data(),
                                groups[i].grad->data.data(), m_[i].data.data(),
                                v_[i].data.data(), groups[i].value->size(), lr_,
                                kAdamBeta1, kAdamBeta2, kAdamEps, bc1, bc2);
    groups[i].grad->zero();
  }
}

void write_metrics_tsv(const std::filesystem::path& path,
                       const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch\tmodel\tloss_T\tloss_D\tval_mrr\n";
  for (const auto& r : rows) {
    out << r.epoch << '\t' << r.model << '\t' << format_double(r.loss_task) << '\t'
        << format_double(r.loss_distill) << '\t' << format_double(r.val_mrr) << '\n';
  }
}

void write_gates_tsv(const std::filesystem::path& path,
                     const std::vector<GateRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch\tkg\tmrr_indiv\tmrr_fused\tteach_indiv_to_fused\tteach_fused_to_indiv\n";
  for (const auto& r : rows) {
    out << r.epoch << '\t' << r.kg << '\t' << format_double(r.mrr_individual) << '\t'
        << format_double(r.mrr_fused) << '\t' << (r.teach_individual_to_fused ? 1 : 0)
        << '\t' << (r.teach_fused_to_individual ? 1 : 0) << '\n';
  }
}

Trainer::Trainer(const MultiKgStore& store, TrainConfig cfg, uint32_t eval_threads)
    : store_(store), cfg_(std::move(cfg)), eval_threads_(std::max(1u, eval_threads)) {
  cfg_.validate();
  if (store.n_kgs() < 2) throw DataError("training requires at least two KGs");
  for (const auto& [kg, a] : cfg_.alpha_per_kg) {
    if (store.kg_index(kg) < 0) {
      throw ConfigError("alpha_per_kg references unknown KG \"" + kg + "\"");
    }
  }
  fused_ = store.fused ? *store.fused : build_fused_kg(store);

  const uint32_t m = store.n_kgs();
  kg_graphs_.reserve(m);
  for (uint32_t k = 0; k < m; ++k) {
    const KgData& kg = store.kgs[k];
    if (kg.train.empty()) {
      throw DataError("KG \"" + kg.name + "\" has no training triples");
    }
    if (cfg_.top_k > kg.n_entities()) {
      throw ConfigError("top_k exceeds the entity count of KG \"" + kg.name + "\"");
    }
    kg_graphs_.push_back(GraphAdjacency::from_kg(kg));
    filters_.emplace_back(kg);
    std::vector<uint32_t> rl(kg.n_relations());
    for (uint32_t r = 0; r < kg.n_relations(); ++r) {
      rl[r] = fused_.rel_param_of_global[fused_.relation_offset[k] + r];
    }
    relparam_of_local_.push_back(std::move(rl));
  }
  fused_graph_ = GraphAdjacency::from_fused(fused_);

  slots_.resize(m + 1);
  for (uint32_t k = 0; k < m; ++k) {
    ModelSlot& s = slots_[k];
    s.name = "indiv:" + store.kgs[k].name;
    Rng init_rng(substream_seed(cfg_.seed, k));
    s.params = ModelParams::init(cfg_.model, store.kgs[k].n_entities(),
                                 store.kgs[k].n_relations(), false, init_rng);
    s.graph = &kg_graphs_[k];
    init_slot_data(s, k);
    s.rng = Rng(substream_seed(cfg_.seed, 1000 + k));
  }
  ModelSlot& f = slots_[m];
  f.name = "fused";
  Rng init_rng(substream_seed(cfg_.seed, m));
  f.params = ModelParams::init(cfg_.model, fused_.n_entities, fused_.n_rel_param,
                               /*has_align=*/true, init_rng);
  f.graph = &fused_graph_;
  init_slot_data(f, m);
  f.rng = Rng(substream_seed(cfg_.seed, 1000 + m));
}

void Trainer::init_slot_data(ModelSlot& slot, uint32_t kg_or_fused) {
  const uint32_t m = store_.n_kgs();
  if (kg_or_fused < m) {
    const KgData& kg = store_.kgs[kg_or_fused];
    slot.train = kg.train;
    slot.positives = PositiveSet(kg.n_entities(), kg.n_relations());
    for (const auto& t : kg.train) slot.positives.insert(t);
    slot.ranges.assign(slot.train.size(),
                       {0, kg.n_entities(), 0, kg.n_entities()});
  } else {
    slot.positives = PositiveSet(fused_.n_entities, fused_.n_rel_param);
    slot.train.reserve(fused_.triples.size() + fused_.align_edges.size());
    for (const auto& gt : fused_.triples) {
      LocalTriple t{gt.head, fused_.rel_param_of_global[gt.rel], gt.tail};
      slot.train.push_back(t);
      slot.positives.insert(t);
      // Corruptions stay inside the source KG's entity range.
      const uint32_t lo = fused_.entity_offset[gt.kg];
      const uint32_t hi = fused_.entity_offset[gt.kg + 1];
      slot.ranges.push_back({lo, hi, lo, hi});
    }
    // Alignment edges are training triples of the fused graph too; ranking a
    // counterpart above the other entities of its own KG pulls aligned pairs
    // toward a shared representation. Each endpoint is corrupted within its
    // source KG so the contrast stays a "which counterpart" question.
    const uint32_t align_row = fused_.rel_param_of_global[fused_.align_rel_id];
    auto kg_span = [&](uint32_t global_entity) {
      const auto it = std::upper_bound(fused_.entity_offset.begin(),
                                       fused_.entity_offset.end(), global_entity);
      const auto kg = static_cast<uint32_t>(it - fused_.entity_offset.begin()) - 1;
      return std::pair<uint32_t, uint32_t>{fused_.entity_offset[kg],
                                           fused_.entity_offset[kg + 1]};
    };
    for (const auto& [u, v] : fused_.align_edges) {
      LocalTriple t{u, align_row, v};
      slot.train.push_back(t);
      slot.positives.insert(t);
      slot.positives.insert(LocalTriple{v, align_row, u});
      const auto [hlo, hhi] = kg_span(u);
      const auto [tlo, thi] = kg_span(v);
      slot.ranges.push_back({hlo, hhi, tlo, thi});
    }
  }
  slot.order.resize(slot.train.size());
  std::iota(slot.order.begin(), slot.order.end(), size_t{0});
  slot.cursor = slot.order.size();  // force a shuffle on first wrap-around use
}

std::vector<size_t> Trainer::next_batch(ModelSlot& slot) {
  const size_t n = slot.train.size();
  const size_t b = std::min<size_t>(cfg_.batch_size, n);
  std::vector<size_t> out;
  out.reserve(b);
  for (size_t i = 0; i < b; ++i) {
    if (slot.cursor >= slot.order.size()) {
      slot.rng.shuffle(slot.order);
      slot.cursor = 0;
    }
    out.push_back(slot.order[slot.cursor++]);
  }
  return out;
}

Tape::Id kd_loss_on_tape(Tape& tape, ScoreKind kind, Tape::Id entity, Tape::Id relation,
                         const std::vector<uint32_t>& h_idx,
                         const std::vector<uint32_t>& r_idx,
                         const std::vector<uint32_t>& t_idx, Matrix teacher_probs) {
  const size_t rows = teacher_probs.rows;
  const size_t k = teacher_probs.cols;
  double plogp = 0.0;
  for (size_t b = 0; b < rows; ++b) {
    for (size_t j = 0; j < k; ++j) {
      const double p = teacher_probs.at(b, j);
      if (p > 0.0) plogp += p * std::log(p);
    }
  }
  Tape::Id g = goodness_on_tape(tape, kind, entity, relation, h_idx, r_idx, t_idx);
  Tape::Id q_rows = tape.softmax_rows(tape.reshape(g, rows, k));
  Tape::Id log_q = tape.log(tape.clamp_min(q_rows, kStudentProbFloor));
  Tape::Id p_const = tape.constant(std::move(teacher_probs));
  Tape::Id cross = tape.mean_all(tape.row_sum(tape.mul(p_const, log_q)));
  // KL = E_b[sum_j p log p] - E_b[sum_j p log q]; mean_all over the B rows.
  return tape.add_scalar(tape.scale(cross, -1.0), plogp / static_cast<double>(rows));
}

Tape::Id Trainer::ranking_loss_node(Tape& tape, ModelSlot& slot, EncodeIds enc,
                                    const std::vector<size_t>& batch) {
  const uint32_t n_neg = cfg_.neg_samples;
  std::vector<uint32_t> ph, pr, pt, nh, nr, nt;
  ph.reserve(batch.size());
  nh.reserve(batch.size() * n_neg);
  for (size_t idx : batch) {
    const LocalTriple& t = slot.train[idx];
    ph.push_back(t.head);
    pr.push_back(t.rel);
    pt.push_back(t.tail);
    auto negs = sample_negatives(t, slot.positives, slot.ranges[idx], n_neg,
                                 slot.rng, &budget_exhausted_);
    for (const auto& neg : negs) {
      nh.push_back(neg.triple.head);
      nr.push_back(neg.triple.rel);
      nt.push_back(neg.triple.tail);
    }
  }
  const ScoreKind kind = cfg_.model.score;
  Tape::Id g_pos = goodness_on_tape(tape, kind, enc.entity, enc.relation, ph, pr, pt);
  Tape::Id g_neg = goodness_on_tape(tape, kind, enc.entity, enc.relation, nh, nr, nt);
  // Pair each positive with its corruptions.
  std::vector<uint32_t> repeat(batch.size() * n_neg);
  for (size_t i = 0; i < batch.size(); ++i) {
    for (uint32_t j = 0; j < n_neg; ++j) repeat[i * n_neg + j] = static_cast<uint32_t>(i);
  }
  Tape::Id g_pos_rep = tape.gather_rows(g_pos, repeat);
  Tape::Id diff = tape.add_scalar(tape.sub(g_neg, g_pos_rep), cfg_.gamma);
  Tape::Id per_pair = cfg_.hinge ? tape.clamp_min(diff, 0.0) : diff;
  return tape.mean_all(per_pair);
}

double Trainer::validation_mrr_individual(const ModelParams& params, uint32_t kg) const {
  EncodedGraph enc = encode(params, kg_graphs_[kg]);
  IndividualScorer scorer(enc, cfg_.model.score);
  SplitEval ev = evaluate_split(scorer, store_.kgs[kg].valid,
                                filters_[kg], FilterMode::kTrainOnlyFiltered,
                                TaskSet::kTailOnly, nullptr, eval_threads_);
  return ev.mrr;
}

double Trainer::validation_mrr_fused(const ModelParams& params, uint32_t kg) const {
  EncodedGraph enc = encode(params, fused_graph_);
  FusedKgScorer scorer(enc, cfg_.model.score, fused_, kg);
  SplitEval ev = evaluate_split(scorer, store_.kgs[kg].valid,
                                filters_[kg], FilterMode::kTrainOnlyFiltered,
                                TaskSet::kTailOnly, nullptr, eval_threads_);
  return ev.mrr;
}

double Trainer::slot_validation_mrr(size_t slot_idx, uint32_t) const {
  const uint32_t m = store_.n_kgs();
  if (slot_idx < m) {
    return validation_mrr_individual(slots_[slot_idx].params,
                                     static_cast<uint32_t>(slot_idx));
  }
  // Pooled over every KG's validation queries.
  EncodedGraph enc = encode(slots_[m].params, fused_graph_);
  double weighted = 0.0;
  size_t n_queries = 0;
  for (uint32_t kg = 0; kg < m; ++kg) {
    FusedKgScorer scorer(enc, cfg_.model.score, fused_, kg);
    SplitEval ev = evaluate_split(scorer, store_.kgs[kg].valid,
                                  filters_[kg], FilterMode::kTrainOnlyFiltered,
                                  TaskSet::kTailOnly, nullptr, eval_threads_);
    weighted += ev.mrr * static_cast<double>(ev.n_queries);
    n_queries += ev.n_queries;
  }
  return n_queries > 0 ? weighted / static_cast<double>(n_queries) : 0.0;
}

void Trainer::run_stage1() {
  for (size_t si = 0; si < slots_.size(); ++si) {
    ModelSlot& s = slots_[si];
    s.opt = std::make_unique<Adam>(s.params, cfg_.lr);

    double best_mrr = slot_validation_mrr(si, 0);
    ModelParams best = s.params;
    double last_val = best_mrr;
    uint32_t evals_since_best = 0;

    for (uint32_t epoch = 1; epoch <= cfg_.epochs_stage1; ++epoch) {
      s.rng.shuffle(s.order);
      double loss_weighted = 0.0;
      size_t n_pairs = 0;
      for (size_t start = 0; start < s.order.size(); start += cfg_.batch_size) {
        const size_t end = std::min(s.order.size(), start + cfg_.batch_size);
        std::vector<size_t> batch(s.order.begin() + start, s.order.begin() + end);
        Tape tape;
        EncodeIds enc = encode_on_tape(tape, s.params, *s.graph);
        Tape::Id loss = ranking_loss_node(tape, s, enc, batch);
        const double lv = tape.scalar_value(loss);
        if (!std::isfinite(lv)) {
          throw NumericError("non-finite ranking loss while training " + s.name);
        }
        s.params.zero_grads();
        tape.backward(loss);
        s.opt->step();
        const size_t pairs = batch.size() * cfg_.neg_samples;
        loss_weighted += lv * static_cast<double>(pairs);
        n_pairs += pairs;
      }

      bool evaluated = false;
      if (epoch % cfg_.eval_every == 0 || epoch == cfg_.epochs_stage1) {
        last_val = slot_validation_mrr(si, 0);
        evaluated = true;
      }
      metrics_.push_back({epoch, s.name,
                          n_pairs ? loss_weighted / static_cast<double>(n_pairs) : 0.0,
                          0.0, last_val});
      if (evaluated) {
        if (last_val > best_mrr) {
          best_mrr = last_val;
          best = s.params;
          evals_since_best = 0;
        } else if (++evals_since_best >= cfg_.patience) {
          break;
        }
      }
    }
    s.params = std::move(best);
  }

  const uint32_t m = store_.n_kgs();
  indiv_stage1_.clear();
  for (uint32_t k = 0; k < m; ++k) indiv_stage1_.push_back(slots_[k].params);
  fused_stage1_ = slots_[m].params;
  stage1_done_ = true;
}

namespace {

// Stable softmax over n scores.
void softmax_into(const double* scores, size_t n, double* out) {
  double mx = scores[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, scores[i]);
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scores[i] - mx);
    z += out[i];
  }
  const double inv = 1.0 / z;
  for (size_t i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace

void Trainer::run_stage2() {
  if (!stage1_done_) throw ConfigError("run_stage1 must be called before run_stage2");

  const uint32_t m = store_.n_kgs();
  ModelSlot& fs = slots_[m];
  const ScoreKind kind = cfg_.model.score;

  for (auto& s : slots_) s.opt = std::make_unique<Adam>(s.params, cfg_.lr);
  for (uint32_t i = 0; i < m; ++i) slots_[i].cursor = slots_[i].order.size();

  // Per-KG entity ids in the fused space and relation parameter rows, used
  // as teacher candidate lists when the teacher is the fused model.
  std::vector<std::vector<uint32_t>> global_ents(m);
  for (uint32_t i = 0; i < m; ++i) {
    const uint32_t lo = fused_.entity_offset[i];
    const uint32_t hi = fused_.entity_offset[i + 1];
    global_ents[i].resize(hi - lo);
    std::iota(global_ents[i].begin(), global_ents[i].end(), lo);
  }

  std::vector<double> indiv_val(m, 0.0), fused_val_on_kg(m, 0.0);
  double fused_val_pooled = 0.0;
  auto refresh_vals = [&]() {
    EncodedGraph enc_f = encode(fs.params, fused_graph_);
    double weighted = 0.0;
    size_t n_queries = 0;
    for (uint32_t i = 0; i < m; ++i) {
      indiv_val[i] = validation_mrr_individual(slots_[i].params, i);
      FusedKgScorer scorer(enc_f, kind, fused_, i);
      SplitEval ev = evaluate_split(scorer, store_.kgs[i].valid,
                                    filters_[i], FilterMode::kTrainOnlyFiltered,
                                    TaskSet::kTailOnly, nullptr, eval_threads_);
      fused_val_on_kg[i] = ev.mrr;
      weighted += ev.mrr * static_cast<double>(ev.n_queries);
      n_queries += ev.n_queries;
    }
    fused_val_pooled = n_queries > 0 ? weighted / static_cast<double>(n_queries) : 0.0;
  };

  std::vector<GateState> gate(m);
  auto update_gates = [&](uint32_t log_epoch) {
    for (uint32_t i = 0; i < m; ++i) {
      gate[i] = update_gate(indiv_val[i], fused_val_on_kg[i], cfg_.theta);
      gates_.push_back({log_epoch, store_.kgs[i].name, indiv_val[i], fused_val_on_kg[i],
                        gate[i].teach_individual_to_fused,
                        gate[i].teach_fused_to_individual});
    }
  };

  refresh_vals();
  update_gates(cfg_.epochs_stage1 + 1);

  // Snapshot tracking includes the stage-2 start state.
  std::vector<ModelParams> best_indiv;
  std::vector<double> best_indiv_mrr(m);
  for (uint32_t i = 0; i < m; ++i) {
    best_indiv.push_back(slots_[i].params);
    best_indiv_mrr[i] = indiv_val[i];
  }
  ModelParams best_fused = fs.params;
  double best_fused_mrr = fused_val_pooled;

  // One distillation term: teacher ranks every candidate of `task` for each
  // batch triple, keeps its top-k as the candidate set, and the student is
  // pulled toward the teacher's softmax over that set.
  auto distill_node = [&](Tape& tape, EncodeIds student_enc, bool student_is_fused,
                          uint32_t kg, const std::vector<LocalTriple>& batch,
                          const Matrix& teacher_ent, const Matrix& teacher_rel,
                          bool teacher_is_fused) -> Tape::Id {
    const uint32_t n_ent = store_.kgs[kg].n_entities();
    const uint32_t n_rel = store_.kgs[kg].n_relations();
    const uint32_t ent_off = fused_.entity_offset[kg];
    const auto& rel_rows = relparam_of_local_[kg];
    const size_t B = batch.size();

    auto ent_t = [&](uint32_t e) { return teacher_is_fused ? ent_off + e : e; };
    auto rel_t = [&](uint32_t r) { return teacher_is_fused ? rel_rows[r] : r; };
    auto ent_s = [&](uint32_t e) { return student_is_fused ? ent_off + e : e; };
    auto rel_s = [&](uint32_t r) { return student_is_fused ? rel_rows[r] : r; };

    Tape::Id total = 0;
    bool have_total = false;
    const QuerySlot tasks[3] = {QuerySlot::kHead, QuerySlot::kTail, QuerySlot::kRelation};
    for (QuerySlot task : tasks) {
      const bool rel_task = task == QuerySlot::kRelation;
      const uint32_t n_cand = rel_task ? n_rel : n_ent;
      const uint32_t k = std::min(cfg_.top_k, n_cand);
      const uint32_t* cand_teacher = nullptr;
      if (teacher_is_fused) {
        cand_teacher = rel_task ? rel_rows.data() : global_ents[kg].data();
      }

      std::vector<double> scores(n_cand);
      std::vector<uint32_t> h_idx, r_idx, t_idx;
      h_idx.reserve(B * k);
      r_idx.reserve(B * k);
      t_idx.reserve(B * k);
      Matrix teacher_probs(B, k);

      for (size_t b = 0; b < B; ++b) {
        const LocalTriple& q = batch[b];
        score_query(kind, teacher_ent, teacher_rel, task, ent_t(q.head), rel_t(q.rel),
                    ent_t(q.tail), cand_teacher, n_cand, scores.data());
        std::vector<uint32_t> top = topk_candidates(scores, k);
        std::vector<double> sel(k);
        for (uint32_t j = 0; j < k; ++j) sel[j] = scores[top[j]];
        softmax_into(sel.data(), k, teacher_probs.row(b));
        for (uint32_t j = 0; j < k; ++j) {
          const uint32_t c = top[j];  // positions are local candidate ids
          switch (task) {
            case QuerySlot::kHead:
              h_idx.push_back(ent_s(c));
              r_idx.push_back(rel_s(q.rel));
              t_idx.push_back(ent_s(q.tail));
              break;
            case QuerySlot::kTail:
              h_idx.push_back(ent_s(q.head));
              r_idx.push_back(rel_s(q.rel));
              t_idx.push_back(ent_s(c));
              break;
            case QuerySlot::kRelation:
              h_idx.push_back(ent_s(q.head));
              r_idx.push_back(rel_s(c));
              t_idx.push_back(ent_s(q.tail));
              break;
          }
        }
      }

      Tape::Id task_kl = kd_loss_on_tape(tape, kind, student_enc.entity,
                                         student_enc.relation, h_idx, r_idx, t_idx,
                                         std::move(teacher_probs));
      total = have_total ? tape.add(total, task_kl) : task_kl;
      have_total = true;
    }
    return total;
  };

  const size_t nf = fs.train.size();
  for (uint32_t t = 1; t <= cfg_.epochs_stage2; ++t) {
    const uint32_t log_epoch = cfg_.epochs_stage1 + t;
    if (t > 1 && (t - 1) % cfg_.eval_every == 0) update_gates(log_epoch);

    fs.rng.shuffle(fs.order);
    std::vector<double> loss_t(m + 1, 0.0), loss_d(m + 1, 0.0);
    std::vector<size_t> pairs_t(m + 1, 0), steps_d(m + 1, 0);

    for (size_t start = 0; start < nf; start += cfg_.batch_size) {
      const size_t end = std::min(nf, start + cfg_.batch_size);
      std::vector<size_t> batch_f(fs.order.begin() + start, fs.order.begin() + end);

      Tape tape_f;
      EncodeIds enc_f = encode_on_tape(tape_f, fs.params, fused_graph_);
      Tape::Id loss_task_f = ranking_loss_node(tape_f, fs, enc_f, batch_f);
      Tape::Id total_f = loss_task_f;
      double step_d_f = 0.0;

      for (uint32_t i = 0; i < m; ++i) {
        ModelSlot& s = slots_[i];
        std::vector<size_t> batch_idx = next_batch(s);
        std::vector<LocalTriple> batch_local;
        batch_local.reserve(batch_idx.size());
        for (size_t idx : batch_idx) batch_local.push_back(s.train[idx]);

        Tape tape_i;
        EncodeIds enc_i = encode_on_tape(tape_i, s.params, *s.graph);
        Tape::Id loss_task_i = ranking_loss_node(tape_i, s, enc_i, batch_idx);
        Tape::Id total_i = loss_task_i;
        const double alpha_i = cfg_.alpha_for(store_.kgs[i].name);
        double step_d_i = 0.0;

        if (gate[i].teach_fused_to_individual) {
          Tape::Id kd = distill_node(tape_i, enc_i, /*student_is_fused=*/false, i,
                                     batch_local, tape_f.value(enc_f.entity),
                                     tape_f.value(enc_f.relation),
                                     /*teacher_is_fused=*/true);
          step_d_i = tape_i.scalar_value(kd);
          total_i = tape_i.add(total_i, tape_i.scale(kd, alpha_i));
        }
        if (gate[i].teach_individual_to_fused) {
          Tape::Id kd = distill_node(tape_f, enc_f, /*student_is_fused=*/true, i,
                                     batch_local, tape_i.value(enc_i.entity),
                                     tape_i.value(enc_i.relation),
                                     /*teacher_is_fused=*/false);
          step_d_f += tape_f.scalar_value(kd);
          total_f = tape_f.add(total_f, tape_f.scale(kd, alpha_i));
        }

        const double ltv = tape_i.scalar_value(loss_task_i);
        const double ttv = tape_i.scalar_value(total_i);
        if (!std::isfinite(ttv)) {
          throw NumericError("non-finite loss while training " + s.name);
        }
        s.params.zero_grads();
        tape_i.backward(total_i);
        s.opt->step();

        const size_t pairs = batch_idx.size() * cfg_.neg_samples;
        loss_t[i] += ltv * static_cast<double>(pairs);
        pairs_t[i] += pairs;
        loss_d[i] += step_d_i;
        steps_d[i] += 1;
      }

      const double ltf = tape_f.scalar_value(loss_task_f);
      if (!std::isfinite(tape_f.scalar_value(total_f))) {
        throw NumericError("non-finite loss while training the fused model");
      }
      fs.params.zero_grads();
      tape_f.backward(total_f);
      fs.opt->step();

      const size_t pairs_f = batch_f.size() * cfg_.neg_samples;
      loss_t[m] += ltf * static_cast<double>(pairs_f);
      pairs_t[m] += pairs_f;
      loss_d[m] += step_d_f;
      steps_d[m] += 1;
    }

    const bool evaluated = (t % cfg_.eval_every == 0) || t == cfg_.epochs_stage2;
    if (evaluated) {
      refresh_vals();
      for (uint32_t i = 0; i < m; ++i) {
        if (indiv_val[i] > best_indiv_mrr[i]) {
          best_indiv_mrr[i] = indiv_val[i];
          best_indiv[i] = slots_[i].params;
        }
      }
      if (fused_val_pooled > best_fused_mrr) {
        best_fused_mrr = fused_val_pooled;
        best_fused = fs.params;
      }
    }

    for (uint32_t i = 0; i < m; ++i) {
      metrics_.push_back(
          {log_epoch, slots_[i].name,
           pairs_t[i] ? loss_t[i] / static_cast<double>(pairs_t[i]) : 0.0,
           steps_d[i] ? loss_d[i] / static_cast<double>(steps_d[i]) : 0.0,
           indiv_val[i]});
    }
    metrics_.push_back({log_epoch, fs.name,
                        pairs_t[m] ? loss_t[m] / static_cast<double>(pairs_t[m]) : 0.0,
                        steps_d[m] ? loss_d[m] / static_cast<double>(steps_d[m]) : 0.0,
                        fused_val_pooled});
  }

  indiv_stage2_.clear();
  for (uint32_t i = 0; i < m; ++i) {
    slots_[i].params = best_indiv[i];
    indiv_stage2_.push_back(slots_[i].params);
  }
  fs.params = std::move(best_fused);
  fused_stage2_ = fs.params;
}

}  // namespace ckgc
