#include "ckgc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "ckgc/errors.hpp"
#include "ckgc/kernels.hpp"

namespace ckgc {

std::string to_string(FilterMode m) {
  switch (m) {
    case FilterMode::kTraditionalFiltered: return "traditional";
    case FilterMode::kTrainOnlyFiltered: return "train-only";
    case FilterMode::kRaw: return "raw";
  }
  return "?";
}

std::string to_string(TaskSet t) {
  return t == TaskSet::kTailOnly ? "tail" : "head-tail";
}

FilterMode filter_mode_from_string(const std::string& s) {
  if (s == "traditional") return FilterMode::kTraditionalFiltered;
  if (s == "train-only") return FilterMode::kTrainOnlyFiltered;
  if (s == "raw") return FilterMode::kRaw;
  throw ConfigError("unknown filter mode \"" + s +
                    "\" (expected traditional, train-only or raw)");
}

TaskSet task_set_from_string(const std::string& s) {
  if (s == "tail") return TaskSet::kTailOnly;
  if (s == "head-tail") return TaskSet::kHeadAndTail;
  throw ConfigError("unknown task set \"" + s + "\" (expected tail or head-tail)");
}

void IndividualScorer::score_all(QuerySlot slot, const LocalTriple& q,
                                 std::vector<double>& out) const {
  out.resize(enc_.entity_out.rows);
  score_query(kind_, enc_.entity_out, enc_.relation_out, slot, q.head, q.rel, q.tail,
              nullptr, out.size(), out.data());
}

FusedKgScorer::FusedKgScorer(const EncodedGraph& enc, ScoreKind kind,
                             const FusedKg& fused, uint32_t kg)
    : enc_(enc), kind_(kind), fused_(fused), kg_(kg) {
  const uint32_t lo = fused.entity_offset[kg];
  const uint32_t hi = fused.entity_offset[kg + 1];
  global_ids_.resize(hi - lo);
  for (uint32_t g = lo; g < hi; ++g) global_ids_[g - lo] = g;
}

void FusedKgScorer::score_all(QuerySlot slot, const LocalTriple& q,
                              std::vector<double>& out) const {
  out.resize(global_ids_.size());
  const uint32_t off = fused_.entity_offset[kg_];
  const uint32_t rel_row =
      fused_.rel_param_of_global[fused_.relation_offset[kg_] + q.rel];
  score_query(kind_, enc_.entity_out, enc_.relation_out, slot, off + q.head, rel_row,
              off + q.tail, global_ids_.data(), global_ids_.size(), out.data());
}

void SumScorer::score_all(QuerySlot slot, const LocalTriple& q,
                          std::vector<double>& out) const {
  a_.score_all(slot, q, out);
  std::vector<double> other;
  b_.score_all(slot, q, other);
  if (other.size() != out.size()) {
    throw DataError("ensemble scorers disagree on the candidate count");
  }
  for (size_t i = 0; i < out.size(); ++i) out[i] += other[i];
}

EvalFilterIndex::EvalFilterIndex(const KgData& kg)
    : n_entities_(kg.n_entities()), n_relations_(kg.n_relations()) {
  in_train_.assign(kg.n_entities(), false);
  for (const auto& t : kg.train) {
    train_.insert(key(t.head, t.rel, t.tail));
    in_train_[t.head] = true;
    in_train_[t.tail] = true;
  }
  for (const auto& t : kg.valid) held_out_.insert(key(t.head, t.rel, t.tail));
  for (const auto& t : kg.test) held_out_.insert(key(t.head, t.rel, t.tail));
}

uint64_t EvalFilterIndex::key(uint32_t h, uint32_t r, uint32_t t) const {
  return (static_cast<uint64_t>(h) * n_entities_ + t) * n_relations_ + r;
}

bool EvalFilterIndex::known(FilterMode mode, uint32_t h, uint32_t r, uint32_t t) const {
  switch (mode) {
    case FilterMode::kRaw:
      return false;
    case FilterMode::kTrainOnlyFiltered:
      return train_.count(key(h, r, t)) > 0;
    case FilterMode::kTraditionalFiltered:
      return train_.count(key(h, r, t)) > 0 || held_out_.count(key(h, r, t)) > 0;
  }
  return false;
}

size_t rank_of_truth(const std::vector<double>& goodness, uint32_t truth,
                     const std::vector<bool>& filtered) {
  const double g_truth = goodness[truth];
  size_t rank = 1;
  for (size_t c = 0; c < goodness.size(); ++c) {
    if (c == truth || filtered[c]) continue;
    if (goodness[c] > g_truth || (goodness[c] == g_truth && c < truth)) ++rank;
  }
  return rank;
}

namespace {

struct PendingQuery {
  QuerySlot slot;
  LocalTriple query;
  uint32_t truth;
};

size_t run_query(const Scorer& scorer, const EvalFilterIndex& filter, FilterMode mode,
                 const PendingQuery& pq, std::vector<double>& goodness,
                 std::vector<bool>& filtered) {
  scorer.score_all(pq.slot, pq.query, goodness);
  filtered.assign(goodness.size(), false);
  if (mode != FilterMode::kRaw) {
    for (uint32_t c = 0; c < goodness.size(); ++c) {
      if (c == pq.truth) continue;
      const bool known = pq.slot == QuerySlot::kTail
                             ? filter.known(mode, pq.query.head, pq.query.rel, c)
                             : filter.known(mode, c, pq.query.rel, pq.query.tail);
      if (known) filtered[c] = true;
    }
  }
  return rank_of_truth(goodness, pq.truth, filtered);
}

}  // namespace

SplitEval evaluate_split(const Scorer& scorer, const std::vector<LocalTriple>& split,
                         const EvalFilterIndex& filter, FilterMode mode, TaskSet tasks,
                         std::vector<RankRecord>* dump_ranks, uint32_t threads) {
  std::vector<PendingQuery> queries;
  queries.reserve(split.size() * (tasks == TaskSet::kHeadAndTail ? 2 : 1));
  for (const auto& t : split) {
    queries.push_back({QuerySlot::kTail, t, t.tail});
    if (tasks == TaskSet::kHeadAndTail) queries.push_back({QuerySlot::kHead, t, t.head});
  }

  std::vector<size_t> ranks(queries.size(), 0);
  if (threads <= 1 || queries.size() < 2) {
    std::vector<double> goodness;
    std::vector<bool> filtered;
    for (size_t i = 0; i < queries.size(); ++i) {
      ranks[i] = run_query(scorer, filter, mode, queries[i], goodness, filtered);
    }
  } else {
    const uint32_t n_workers =
        static_cast<uint32_t>(std::min<size_t>(threads, queries.size()));
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (uint32_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w] {
        std::vector<double> goodness;
        std::vector<bool> filtered;
        for (size_t i = w; i < queries.size(); i += n_workers) {
          ranks[i] = run_query(scorer, filter, mode, queries[i], goodness, filtered);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  SplitEval ev;
  ev.n_queries = queries.size();
  if (queries.empty()) return ev;
  double sum_rr = 0.0;
  size_t h1 = 0, h10 = 0, unseen = 0;
  for (size_t i = 0; i < queries.size(); ++i) {
    sum_rr += 1.0 / static_cast<double>(ranks[i]);
    if (ranks[i] <= 1) ++h1;
    if (ranks[i] <= 10) ++h10;
    if (!filter.entity_in_train(queries[i].truth)) ++unseen;
    if (dump_ranks) {
      dump_ranks->push_back({queries[i].slot, queries[i].query, queries[i].truth, ranks[i]});
    }
  }
  ev.mrr = sum_rr / static_cast<double>(queries.size());
  ev.hits_at_1 = static_cast<double>(h1) / static_cast<double>(queries.size());
  ev.hits_at_10 = static_cast<double>(h10) / static_cast<double>(queries.size());
  ev.n_unseen_truth = unseen;
  return ev;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_report_tsv(const std::filesystem::path& path,
                      const std::vector<ReportRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "model\tkg\tfilter\ttasks\tsplit\tn_queries\tmrr\thits_at_1\thits_at_10\t"
         "n_unseen_truth\n";
  for (const auto& r : rows) {
    out << r.model << '\t' << r.kg << '\t' << to_string(r.filter) << '\t'
        << to_string(r.tasks) << '\t' << r.split << '\t' << r.eval.n_queries << '\t'
        << format_double(r.eval.mrr) << '\t' << format_double(r.eval.hits_at_1) << '\t'
        << format_double(r.eval.hits_at_10) << '\t' << r.eval.n_unseen_truth << '\n';
  }
}

void write_report_json(const std::filesystem::path& path,
                       const std::vector<ReportRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"model", r.model},
                 {"kg", r.kg},
                 {"filter", to_string(r.filter)},
                 {"tasks", to_string(r.tasks)},
                 {"split", r.split},
                 {"n_queries", r.eval.n_queries},
                 {"mrr", r.eval.mrr},
                 {"hits_at_1", r.eval.hits_at_1},
                 {"hits_at_10", r.eval.hits_at_10},
                 {"n_unseen_truth", r.eval.n_unseen_truth}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_ranks_tsv(const std::filesystem::path& path, const std::string& model,
                     const std::string& kg, const std::vector<RankRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "model\tkg\tslot\thead\trel\ttail\ttruth\trank\n";
  for (const auto& r : records) {
    out << model << '\t' << kg << '\t'
        << (r.slot == QuerySlot::kTail ? "tail" : "head") << '\t' << r.query.head
        << '\t' << r.query.rel << '\t' << r.query.tail << '\t' << r.truth << '\t'
        << r.rank << '\n';
  }
}

CorrelationResult relation_correlation(const Matrix& rows,
                                       const std::vector<std::string>& names) {
  if (names.size() != rows.rows) {
    throw DataError("relation name count does not match embedding rows");
  }
  const size_t n = rows.rows;
  const size_t d = rows.cols;
  CorrelationResult res;
  res.names = names;
  res.corr = Matrix(n, n);

  std::vector<double> mean(n, 0.0), sd(n, 0.0);
  std::vector<bool> degenerate(n, false);
  for (size_t i = 0; i < n; ++i) {
    mean[i] = kernels::active().vsum(rows.row(i), d) / static_cast<double>(d);
    double ss = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double c = rows.at(i, j) - mean[i];
      ss += c * c;
    }
    sd[i] = std::sqrt(ss);
    if (sd[i] == 0.0) {
      degenerate[i] = true;
      res.warnings.push_back("relation \"" + names[i] +
                             "\" has a zero-variance embedding; its correlations are "
                             "reported as 0");
    }
  }

  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      if (degenerate[i] || degenerate[j]) {
        res.corr.at(i, j) = 0.0;
        continue;
      }
      if (i == j) {
        res.corr.at(i, j) = 1.0;
        continue;
      }
      double cov = 0.0;
      for (size_t c = 0; c < d; ++c) {
        cov += (rows.at(i, c) - mean[i]) * (rows.at(j, c) - mean[j]);
      }
      res.corr.at(i, j) = cov / (sd[i] * sd[j]);
    }
  }
  return res;
}

void write_correlation_csv(const std::filesystem::path& path,
                           const CorrelationResult& corr) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "relation";
  for (const auto& n : corr.names) out << ',' << n;
  out << '\n';
  for (size_t i = 0; i < corr.corr.rows; ++i) {
    out << corr.names[i];
    for (size_t j = 0; j < corr.corr.cols; ++j) {
      out << ',' << format_double(corr.corr.at(i, j));
    }
    out << '\n';
  }
}

}  // namespace ckgc
