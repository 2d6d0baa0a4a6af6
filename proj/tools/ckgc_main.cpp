#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ckgc/errors.hpp"
#include "ckgc/eval.hpp"
#include "ckgc/ingest.hpp"
#include "ckgc/kernels.hpp"
#include "ckgc/kg.hpp"
#include "ckgc/model.hpp"
#include "ckgc/train.hpp"

namespace fs = std::filesystem;
using namespace ckgc;

namespace {

uint32_t default_threads() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

MultiKgStore load_store(const std::string& manifest_path) {
  DatasetManifest manifest = DatasetManifest::parse_file(manifest_path);
  MultiKgStore store = load_dataset(manifest);
  if (!store.warnings.empty()) {
    std::cerr << store.warnings.size() << " warning(s) while loading \"" << store.name
              << "\"";
    const size_t show = std::min<size_t>(store.warnings.size(), 5);
    for (size_t i = 0; i < show; ++i) std::cerr << "\n  " << store.warnings[i];
    if (store.warnings.size() > show) {
      std::cerr << "\n  ... " << (store.warnings.size() - show) << " more";
    }
    std::cerr << '\n';
  }
  return store;
}

void save_trained_model(const fs::path& dir, const std::string& file,
                        const ModelParams& params, const std::string& model,
                        const std::string& kg, const std::string& dataset,
                        const std::string& stage) {
  fs::create_directories(dir);
  save_model(dir / file, params,
             {{"model", model}, {"kg", kg}, {"dataset", dataset}, {"stage", stage}});
}

struct TrainOpts {
  std::string manifest;
  std::string config;
  std::string out;
  bool stage1_only = false;
  uint32_t threads = default_threads();
};

std::vector<ReportRow> final_report_rows(const MultiKgStore& store, Trainer& trainer,
                                         bool stage1_only, uint32_t threads) {
  const FilterMode mode = FilterMode::kTraditionalFiltered;
  const TaskSet tasks = TaskSet::kHeadAndTail;
  const ScoreKind kind = trainer.config().model.score;
  const uint32_t m = store.n_kgs();

  std::vector<GraphAdjacency> kg_graphs;
  std::vector<EvalFilterIndex> filters;
  for (uint32_t k = 0; k < m; ++k) {
    kg_graphs.push_back(GraphAdjacency::from_kg(store.kgs[k]));
    filters.emplace_back(store.kgs[k]);
  }
  GraphAdjacency fused_graph = GraphAdjacency::from_fused(trainer.fused_kg());

  auto eval_rows = [&](const std::string& label, auto&& scorer_for_kg,
                       std::vector<ReportRow>& rows) {
    for (uint32_t k = 0; k < m; ++k) {
      auto scorer = scorer_for_kg(k);
      SplitEval ev = evaluate_split(*scorer, store.kgs[k].test,
                                    filters[k], mode, tasks, nullptr, threads);
      rows.push_back({label, store.kgs[k].name, mode, tasks, "test", ev});
    }
  };

  std::vector<ReportRow> rows;

  std::vector<EncodedGraph> enc_i1(m);
  for (uint32_t k = 0; k < m; ++k) {
    enc_i1[k] = encode(trainer.individual_stage1()[k], kg_graphs[k]);
  }
  EncodedGraph enc_f1 = encode(trainer.fused_stage1(), fused_graph);

  eval_rows("indiv", [&](uint32_t k) {
    return std::make_unique<IndividualScorer>(enc_i1[k], kind);
  }, rows);
  eval_rows("fused", [&](uint32_t k) {
    return std::make_unique<FusedKgScorer>(enc_f1, kind, trainer.fused_kg(), k);
  }, rows);

  if (!stage1_only) {
    std::vector<EncodedGraph> enc_i2(m);
    for (uint32_t k = 0; k < m; ++k) {
      enc_i2[k] = encode(trainer.individual_stage2()[k], kg_graphs[k]);
    }
    EncodedGraph enc_f2 = encode(trainer.fused_stage2(), fused_graph);

    eval_rows("indiv_distilled", [&](uint32_t k) {
      return std::make_unique<IndividualScorer>(enc_i2[k], kind);
    }, rows);
    eval_rows("fused_distilled", [&](uint32_t k) {
      return std::make_unique<FusedKgScorer>(enc_f2, kind, trainer.fused_kg(), k);
    }, rows);
    for (uint32_t k = 0; k < m; ++k) {
      IndividualScorer a(enc_i2[k], kind);
      FusedKgScorer b(enc_f2, kind, trainer.fused_kg(), k);
      SumScorer ens(a, b);
      SplitEval ev = evaluate_split(ens, store.kgs[k].test, filters[k],
                                    mode, tasks, nullptr, threads);
      rows.push_back({"ensemble", store.kgs[k].name, mode, tasks, "test", ev});
    }
  }
  return rows;
}

void print_report(const std::vector<ReportRow>& rows) {
  std::cout << "model\tkg\tsplit\tn\tmrr\thits@1\thits@10\n";
  for (const auto& r : rows) {
    std::cout << r.model << '\t' << r.kg << '\t' << r.split << '\t' << r.eval.n_queries
              << '\t' << format_double(r.eval.mrr) << '\t'
              << format_double(r.eval.hits_at_1) << '\t'
              << format_double(r.eval.hits_at_10) << '\n';
  }
}

int cmd_train(const TrainOpts& o) {
  MultiKgStore store = load_store(o.manifest);
  TrainConfig cfg =
      o.config.empty() ? TrainConfig{} : TrainConfig::from_json_file(o.config);

  fs::create_directories(o.out);
  Trainer trainer(store, cfg, o.threads);

  {
    nlohmann::json run;
    run["manifest"] = fs::absolute(o.manifest).string();
    run["dataset"] = store.name;
    run["stage1_only"] = o.stage1_only;
    run["threads"] = o.threads;
    run["kernels"] = kernels::active_isa();
    run["train_config"] = nlohmann::json::parse(cfg.to_json_string());
    std::ofstream out(fs::path(o.out) / "run_config.json", std::ios::trunc);
    if (!out) throw DataError("cannot write run_config.json under " + o.out);
    out << run.dump(2) << '\n';
  }

  std::cout << "training on \"" << store.name << "\": " << store.n_kgs()
            << " KGs, " << store.alignments.size() << " alignments, kernels="
            << kernels::active_isa() << "\n";

  trainer.run_stage1();
  const fs::path ckpt1 = fs::path(o.out) / "checkpoints" / "stage1";
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    save_trained_model(ckpt1, "indiv_" + store.kgs[k].name + ".ckpt",
                       trainer.individual_stage1()[k], "indiv:" + store.kgs[k].name,
                       store.kgs[k].name, store.name, "1");
  }
  save_trained_model(ckpt1, "fused.ckpt", trainer.fused_stage1(), "fused", "",
                     store.name, "1");

  if (!o.stage1_only) {
    trainer.run_stage2();
    const fs::path ckpt2 = fs::path(o.out) / "checkpoints" / "stage2";
    for (uint32_t k = 0; k < store.n_kgs(); ++k) {
      save_trained_model(ckpt2, "indiv_" + store.kgs[k].name + ".ckpt",
                         trainer.individual_stage2()[k],
                         "indiv:" + store.kgs[k].name, store.kgs[k].name, store.name,
                         "2");
    }
    save_trained_model(ckpt2, "fused.ckpt", trainer.fused_stage2(), "fused", "",
                       store.name, "2");
  }

  write_metrics_tsv(fs::path(o.out) / "metrics.tsv", trainer.metrics());
  write_gates_tsv(fs::path(o.out) / "gates.tsv", trainer.gates());
  if (trainer.negative_budget_exhausted() > 0) {
    std::cerr << "negative sampling kept " << trainer.negative_budget_exhausted()
              << " draw(s) that collide with known positives (resample budget"
                 " exhausted)\n";
  }

  std::vector<ReportRow> rows = final_report_rows(store, trainer, o.stage1_only, o.threads);
  write_report_tsv(fs::path(o.out) / "report.tsv", rows);
  write_report_json(fs::path(o.out) / "report.json", rows);
  print_report(rows);
  return 0;
}

struct EvaluateOpts {
  std::string manifest;
  std::vector<std::string> checkpoints;
  std::string filter = "traditional";
  std::string tasks = "head-tail";
  std::string split = "test";
  std::string out = ".";
  bool dump_ranks = false;
  bool ensemble = false;
  uint32_t threads = default_threads();
};

int cmd_evaluate(const EvaluateOpts& o) {
  MultiKgStore store = load_store(o.manifest);
  const FilterMode mode = filter_mode_from_string(o.filter);
  const TaskSet tasks = task_set_from_string(o.tasks);
  if (o.split != "test" && o.split != "valid") {
    throw ConfigError("--split must be test or valid");
  }

  struct IndivEntry {
    LoadedModel model;
    uint32_t kg;
    EncodedGraph enc;
  };
  std::vector<IndivEntry> indiv;
  std::optional<LoadedModel> fused_model;

  FusedKg fused = build_fused_kg(store);
  GraphAdjacency fused_graph = GraphAdjacency::from_fused(fused);
  std::vector<GraphAdjacency> kg_graphs;
  std::vector<EvalFilterIndex> filters;
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    kg_graphs.push_back(GraphAdjacency::from_kg(store.kgs[k]));
    filters.emplace_back(store.kgs[k]);
  }

  for (const auto& path : o.checkpoints) {
    LoadedModel lm = load_model(path);
    if (lm.params.has_align) {
      if (lm.params.n_entities != fused.n_entities ||
          lm.params.n_rel_param != fused.n_rel_param) {
        throw DataError(path + ": fused checkpoint does not match the dataset "
                               "vocabulary");
      }
      if (fused_model) throw ConfigError("more than one fused checkpoint given");
      fused_model = std::move(lm);
    } else {
      const std::string kg_name =
          lm.meta.count("kg") ? lm.meta.at("kg") : std::string();
      const int kg = store.kg_index(kg_name);
      if (kg < 0) {
        throw DataError(path + ": checkpoint KG \"" + kg_name +
                        "\" is not part of the dataset");
      }
      const KgData& kgd = store.kgs[kg];
      if (lm.params.n_entities != kgd.n_entities() ||
          lm.params.n_rel_param != kgd.n_relations()) {
        throw DataError(path + ": checkpoint does not match the vocabulary of KG \"" +
                        kg_name + "\"");
      }
      IndivEntry e{std::move(lm), static_cast<uint32_t>(kg), {}};
      indiv.push_back(std::move(e));
    }
  }
  if (indiv.empty() && !fused_model) throw ConfigError("no checkpoints given");
  if (o.ensemble && (!fused_model || indiv.empty())) {
    throw ConfigError("--ensemble needs one fused and at least one individual "
                      "checkpoint");
  }

  for (auto& e : indiv) e.enc = encode(e.model.params, kg_graphs[e.kg]);
  EncodedGraph fused_enc;
  if (fused_model) fused_enc = encode(fused_model->params, fused_graph);

  auto split_of = [&](const KgData& kg) -> const std::vector<LocalTriple>& {
    return o.split == "test" ? kg.test : kg.valid;
  };
  auto label_of = [](const LoadedModel& lm, const char* fallback) {
    return lm.meta.count("model") ? lm.meta.at("model") : std::string(fallback);
  };

  fs::create_directories(o.out);
  std::ofstream ranks_out;
  if (o.dump_ranks) {
    ranks_out.open(fs::path(o.out) / "ranks.tsv", std::ios::trunc);
    if (!ranks_out) throw DataError("cannot write ranks.tsv under " + o.out);
    ranks_out << "model\tkg\tslot\thead\trel\ttail\ttruth\trank\n";
  }
  auto dump_records = [&](const std::string& model, const std::string& kg,
                          const std::vector<RankRecord>& records) {
    for (const auto& r : records) {
      ranks_out << model << '\t' << kg << '\t'
                << (r.slot == QuerySlot::kTail ? "tail" : "head") << '\t'
                << r.query.head << '\t' << r.query.rel << '\t' << r.query.tail << '\t'
                << r.truth << '\t' << r.rank << '\n';
    }
  };

  std::vector<ReportRow> rows;
  auto run_eval = [&](const Scorer& scorer, const std::string& label, uint32_t kg) {
    std::vector<RankRecord> records;
    SplitEval ev = evaluate_split(scorer, split_of(store.kgs[kg]),
                                  filters[kg], mode, tasks,
                                  o.dump_ranks ? &records : nullptr, o.threads);
    rows.push_back({label, store.kgs[kg].name, mode, tasks, o.split, ev});
    if (o.dump_ranks) dump_records(label, store.kgs[kg].name, records);
  };

  for (const auto& e : indiv) {
    IndividualScorer scorer(e.enc, e.model.params.cfg.score);
    run_eval(scorer, label_of(e.model, "indiv"), e.kg);
  }
  if (fused_model) {
    for (uint32_t k = 0; k < store.n_kgs(); ++k) {
      FusedKgScorer scorer(fused_enc, fused_model->params.cfg.score, fused, k);
      run_eval(scorer, label_of(*fused_model, "fused"), k);
    }
  }
  if (o.ensemble) {
    for (const auto& e : indiv) {
      IndividualScorer a(e.enc, e.model.params.cfg.score);
      FusedKgScorer b(fused_enc, fused_model->params.cfg.score, fused, e.kg);
      SumScorer ens(a, b);
      run_eval(ens, "ensemble:" + store.kgs[e.kg].name, e.kg);
    }
  }

  write_report_tsv(fs::path(o.out) / "report.tsv", rows);
  write_report_json(fs::path(o.out) / "report.json", rows);
  print_report(rows);
  return 0;
}

struct AugmentOpts {
  std::string manifest;
  std::string out;
};

int cmd_augment(const AugmentOpts& o) {
  MultiKgStore store = load_store(o.manifest);
  if (!store.shared_relation_schema) {
    throw DataError("parameter swapping requires a shared relation schema");
  }
  std::vector<Triple> swaps = parameter_swap_triples(store);
  std::vector<SeedAlignment> closure = alignment_closure(store);

  // Held-out membership per KG, to keep augmented train splits disjoint from
  // valid/test.
  std::vector<std::set<LocalTriple>> held_out(store.n_kgs());
  for (uint32_t k = 0; k < store.n_kgs(); ++k) {
    held_out[k].insert(store.kgs[k].valid.begin(), store.kgs[k].valid.end());
    held_out[k].insert(store.kgs[k].test.begin(), store.kgs[k].test.end());
  }

  MultiKgStore merged = store;
  size_t swap_added = 0, swap_skipped = 0;
  for (const Triple& t : swaps) {
    const uint32_t kg = t.head.kg_id;
    const LocalTriple lt{t.head.local_id, t.relation.local_id, t.tail.local_id};
    if (held_out[kg].count(lt)) {
      ++swap_skipped;
      continue;
    }
    merged.kgs[kg].train.push_back(lt);
    ++swap_added;
  }
  for (const SeedAlignment& a : closure) merged.alignments.push_back(a);
  std::sort(merged.alignments.begin(), merged.alignments.end());
  merged.alignments.erase(
      std::unique(merged.alignments.begin(), merged.alignments.end()),
      merged.alignments.end());
  validate_store(merged);

  fs::path manifest_path = write_dataset(merged, o.out);

  nlohmann::json summary;
  summary["swap_added"] = swap_added;
  summary["swap_skipped_held_out"] = swap_skipped;
  summary["closure_added"] = closure.size();
  summary["output_manifest"] = manifest_path.string();
  {
    std::ofstream out(fs::path(o.out) / "augment_summary.json", std::ios::trunc);
    if (!out) throw DataError("cannot write augment_summary.json under " + o.out);
    out << summary.dump(2) << '\n';
  }
  std::cout << "added " << swap_added << " swapped triple(s) (" << swap_skipped
            << " skipped as held-out), " << closure.size()
            << " transitive alignment(s)\nwrote " << manifest_path.string() << "\n";
  return 0;
}

struct DiagnoseOpts {
  std::string manifest;
  size_t threshold = kDefaultComponentFlagThreshold;
  std::string out;
};

int cmd_diagnose(const DiagnoseOpts& o) {
  MultiKgStore store = load_store(o.manifest);
  ComponentReport report = alignment_component_report(store, o.threshold);

  std::cout << "component_size\tcount\n";
  for (const auto& [size, count] : report.histogram) {
    std::cout << size << '\t' << count << '\n';
  }
  std::cout << report.flagged.size() << " component(s) larger than "
            << report.threshold << "\n";

  if (!o.out.empty()) {
    fs::create_directories(o.out);
    const fs::path path = fs::path(o.out) / "flagged_components.csv";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "component,kg,entity\n";
    for (size_t c = 0; c < report.flagged.size(); ++c) {
      for (const EntityRef& e : report.flagged[c].members) {
        out << c << ',' << store.kgs[e.kg_id].name << ','
            << store.kgs[e.kg_id].entity_names[e.local_id] << '\n';
      }
    }
    std::cout << "wrote " << path.string() << "\n";
  }
  return 0;
}

struct ExportCorrOpts {
  std::string manifest;
  std::string checkpoint;
  std::string out;
};

int cmd_export_corr(const ExportCorrOpts& o) {
  MultiKgStore store = load_store(o.manifest);
  LoadedModel lm = load_model(o.checkpoint);

  std::vector<std::string> names;
  Matrix rows;
  if (lm.params.has_align) {
    FusedKg fused = build_fused_kg(store);
    if (lm.params.n_entities != fused.n_entities ||
        lm.params.n_rel_param != fused.n_rel_param) {
      throw DataError(o.checkpoint + ": fused checkpoint does not match the dataset "
                                     "vocabulary");
    }
    // Name each parameter row from the first KG that uses it; the reserved
    // alignment row is not a dataset relation and is left out.
    const uint32_t align_row = fused.rel_param_of_global[fused.align_rel_id];
    std::vector<std::string> row_name(fused.n_rel_param);
    std::vector<bool> named(fused.n_rel_param, false);
    for (uint32_t k = 0; k < store.n_kgs(); ++k) {
      for (uint32_t r = 0; r < store.kgs[k].n_relations(); ++r) {
        const uint32_t row = fused.rel_param_of_global[fused.relation_offset[k] + r];
        if (!named[row]) {
          named[row] = true;
          row_name[row] = store.shared_relation_schema
                              ? store.kgs[k].relation_names[r]
                              : store.kgs[k].name + "/" + store.kgs[k].relation_names[r];
        }
      }
    }
    size_t kept = 0;
    for (uint32_t row = 0; row < fused.n_rel_param; ++row) {
      if (row != align_row && named[row]) ++kept;
    }
    rows = Matrix(kept, lm.params.cfg.dim);
    size_t i = 0;
    for (uint32_t row = 0; row < fused.n_rel_param; ++row) {
      if (row == align_row || !named[row]) continue;
      std::copy(lm.params.relation_emb.row(row),
                lm.params.relation_emb.row(row) + lm.params.cfg.dim, rows.row(i));
      names.push_back(row_name[row]);
      ++i;
    }
  } else {
    const std::string kg_name = lm.meta.count("kg") ? lm.meta.at("kg") : std::string();
    const int kg = store.kg_index(kg_name);
    if (kg < 0) {
      throw DataError(o.checkpoint + ": checkpoint KG \"" + kg_name +
                      "\" is not part of the dataset");
    }
    if (lm.params.n_rel_param != store.kgs[kg].n_relations()) {
      throw DataError(o.checkpoint + ": checkpoint does not match the vocabulary of "
                                     "KG \"" + kg_name + "\"");
    }
    names = store.kgs[kg].relation_names;
    rows = Matrix(lm.params.n_rel_param, lm.params.cfg.dim);
    std::copy(lm.params.relation_emb.data.begin(),
              lm.params.relation_emb.data.begin() + rows.size(), rows.data.begin());
  }

  CorrelationResult corr = relation_correlation(rows, names);
  for (const auto& w : corr.warnings) std::cerr << w << '\n';
  write_correlation_csv(o.out, corr);
  std::cout << "wrote " << o.out << " (" << names.size() << " relations)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-KG link-prediction toolkit: per-KG and fused graph encoders "
               "with mutual distillation"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "Train per-KG and fused models");
  train->add_option("--manifest", train_opts.manifest, "dataset manifest JSON")
      ->required();
  train->add_option("--config", train_opts.config, "training config JSON");
  train->add_option("--out", train_opts.out, "output run directory")->required();
  train->add_flag("--stage1-only", train_opts.stage1_only,
                  "skip the mutual-distillation stage");
  train->add_option("--threads", train_opts.threads, "evaluation worker threads");

  EvaluateOpts eval_opts;
  CLI::App* evaluate = app.add_subcommand("evaluate", "Rank held-out triples");
  evaluate->add_option("--manifest", eval_opts.manifest, "dataset manifest JSON")
      ->required();
  evaluate->add_option("--checkpoint", eval_opts.checkpoints, "model checkpoint(s)")
      ->required();
  evaluate->add_option("--filter", eval_opts.filter,
                       "candidate filter: traditional, train-only or raw");
  evaluate->add_option("--tasks", eval_opts.tasks, "query tasks: tail or head-tail");
  evaluate->add_option("--split", eval_opts.split, "split to rank: test or valid");
  evaluate->add_option("--out", eval_opts.out, "output directory");
  evaluate->add_flag("--dump-ranks", eval_opts.dump_ranks, "write per-query ranks");
  evaluate->add_flag("--ensemble", eval_opts.ensemble,
                     "also score the sum of individual and fused goodness");
  evaluate->add_option("--threads", eval_opts.threads, "evaluation worker threads");

  AugmentOpts augment_opts;
  CLI::App* augment = app.add_subcommand(
      "augment", "Apply parameter swapping and alignment closure to a dataset");
  augment->add_option("--manifest", augment_opts.manifest, "dataset manifest JSON")
      ->required();
  augment->add_option("--out", augment_opts.out, "output dataset directory")
      ->required();

  DiagnoseOpts diagnose_opts;
  CLI::App* diagnose = app.add_subcommand(
      "diagnose", "Report alignment connected-component sizes");
  diagnose->add_option("--manifest", diagnose_opts.manifest, "dataset manifest JSON")
      ->required();
  diagnose->add_option("--threshold", diagnose_opts.threshold,
                       "flag components larger than this");
  diagnose->add_option("--out", diagnose_opts.out, "directory for flagged CSV");

  ExportCorrOpts corr_opts;
  CLI::App* export_corr = app.add_subcommand(
      "export-corr", "Export the relation-embedding correlation matrix as CSV");
  export_corr->add_option("--manifest", corr_opts.manifest, "dataset manifest JSON")
      ->required();
  export_corr->add_option("--checkpoint", corr_opts.checkpoint, "model checkpoint")
      ->required();
  export_corr->add_option("--out", corr_opts.out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(train_opts);
    if (evaluate->parsed()) return cmd_evaluate(eval_opts);
    if (augment->parsed()) return cmd_augment(augment_opts);
    if (diagnose->parsed()) return cmd_diagnose(diagnose_opts);
    if (export_corr->parsed()) return cmd_export_corr(corr_opts);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
