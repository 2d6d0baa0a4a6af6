#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <ckgc/ingest.hpp>
#include <ckgc/kg.hpp>
#include <ckgc/train.hpp>

using namespace ckgc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("ckgc_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string binary() {
  const char* bin = std::getenv("CKGC_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "CKGC_BIN must point at the CLI binary");
  return bin;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_lines(const std::string& text) {
  size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

RunResult run_cli(const TempDir& tmp, const std::string& args) {
  static int call = 0;
  const fs::path out_file = tmp.path / ("stdout." + std::to_string(call));
  const fs::path err_file = tmp.path / ("stderr." + std::to_string(call));
  ++call;
  const std::string cmd = binary() + " " + args + " >" + out_file.string() + " 2>" +
                          err_file.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

fs::path write_small_dataset(const TempDir& tmp) {
  MultiKgStore store = make_synthetic_complementary(30, 4, 150, 2, 0.6, 0.3, 21);
  return write_dataset(store, tmp.path / "ds");
}

fs::path write_small_config(const TempDir& tmp) {
  TrainConfig cfg;
  cfg.model.dim = 6;
  cfg.model.score = ScoreKind::kDistMult;
  cfg.model.composition = Composition::kMultiply;
  cfg.epochs_stage1 = 4;
  cfg.epochs_stage2 = 2;
  cfg.eval_every = 2;
  cfg.patience = 5;
  cfg.batch_size = 64;
  cfg.neg_samples = 4;
  cfg.top_k = 5;
  cfg.lr = 5e-3;
  cfg.seed = 9;
  const fs::path path = tmp.path / "config.json";
  std::ofstream(path) << cfg.to_json_string();
  return path;
}

}  // namespace

TEST_CASE("train then evaluate end to end") {
  TempDir tmp;
  const fs::path manifest = write_small_dataset(tmp);
  const fs::path config = write_small_config(tmp);
  const fs::path run_dir = tmp.path / "run";

  RunResult train = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                     config.string() + " --out " + run_dir.string() +
                                     " --threads 2");
  CAPTURE(train.err);
  REQUIRE(train.exit_code == 0);
  CHECK(train.out.find("training on \"synthetic\"") != std::string::npos);

  SUBCASE("the run directory holds every documented artifact") {
    for (const char* name : {"run_config.json", "metrics.tsv", "gates.tsv", "report.tsv",
                             "report.json"}) {
      CAPTURE(name);
      CHECK(fs::exists(run_dir / name));
    }
    for (const char* stage : {"stage1", "stage2"}) {
      for (const char* ckpt : {"indiv_view0.ckpt", "indiv_view1.ckpt", "fused.ckpt"}) {
        CAPTURE(stage);
        CAPTURE(ckpt);
        CHECK(fs::exists(run_dir / "checkpoints" / stage / ckpt));
      }
    }

    nlohmann::json run_cfg = nlohmann::json::parse(slurp(run_dir / "run_config.json"));
    CHECK(run_cfg["dataset"] == "synthetic");
    CHECK(run_cfg["train_config"]["seed"] == 9);
    CHECK(run_cfg["stage1_only"] == false);

    // One metrics row per model per epoch: 3 models x (4 + 2) epochs.
    CHECK(count_lines(slurp(run_dir / "metrics.tsv")) == 1 + 3 * 6);

    // Five model families x two KGs on the test split.
    const std::string report = slurp(run_dir / "report.tsv");
    CHECK(count_lines(report) == 1 + 10);
    for (const char* label :
         {"indiv", "fused", "indiv_distilled", "fused_distilled", "ensemble"}) {
      CAPTURE(label);
      CHECK(report.find(std::string(label) + "\tview0") != std::string::npos);
      CHECK(report.find(std::string(label) + "\tview1") != std::string::npos);
    }

    nlohmann::json report_json = nlohmann::json::parse(slurp(run_dir / "report.json"));
    REQUIRE(report_json.is_array());
    CHECK(report_json.size() == 10);
    for (const auto& row : report_json) {
      CHECK(row["split"] == "test");
      CHECK(row["filter"] == "traditional");
      const double mrr = row["mrr"].get<double>();
      CHECK(mrr >= 0.0);
      CHECK(mrr <= 1.0);
    }
  }

  SUBCASE("evaluate reuses the checkpoints") {
    const fs::path stage2 = run_dir / "checkpoints" / "stage2";
    const fs::path eval_dir = tmp.path / "eval";
    RunResult ev = run_cli(
        tmp, "evaluate --manifest " + manifest.string() + " --checkpoint " +
                 (stage2 / "indiv_view0.ckpt").string() + " --checkpoint " +
                 (stage2 / "fused.ckpt").string() +
                 " --ensemble --dump-ranks --split valid --tasks tail --filter "
                 "train-only --threads 2 --out " +
                 eval_dir.string());
    CAPTURE(ev.err);
    REQUIRE(ev.exit_code == 0);

    // indiv:view0, fused on both KGs, ensemble:view0.
    const std::string report = slurp(eval_dir / "report.tsv");
    CHECK(count_lines(report) == 1 + 4);
    CHECK(report.find("indiv:view0\tview0\ttrain-only\ttail\tvalid") != std::string::npos);
    CHECK(report.find("fused\tview1") != std::string::npos);
    CHECK(report.find("ensemble:view0\tview0") != std::string::npos);

    // ranks.tsv carries one line per query: 8 columns each, as many lines as
    // the report's query counts sum to.
    const std::string ranks = slurp(eval_dir / "ranks.tsv");
    size_t n_queries = 0;
    nlohmann::json rj = nlohmann::json::parse(slurp(eval_dir / "report.json"));
    for (const auto& row : rj) n_queries += row["n_queries"].get<size_t>();
    CHECK(count_lines(ranks) == 1 + n_queries);
    CHECK(ranks.rfind("model\tkg\tslot\thead\trel\ttail\ttruth\trank\n", 0) == 0);
  }

  SUBCASE("export-corr writes one row per relation") {
    const fs::path csv = tmp.path / "corr.csv";
    RunResult corr = run_cli(tmp, "export-corr --manifest " + manifest.string() +
                                      " --checkpoint " +
                                      (run_dir / "checkpoints" / "stage2" /
                                       "indiv_view0.ckpt")
                                          .string() +
                                      " --out " + csv.string());
    CAPTURE(corr.err);
    REQUIRE(corr.exit_code == 0);
    const std::string text = slurp(csv);
    // Column order follows the KG's interning order, so compare as a set.
    std::string header = text.substr(0, text.find('\n'));
    CHECK(header.rfind("relation,", 0) == 0);
    std::set<std::string> cols;
    std::stringstream hs(header.substr(9));
    for (std::string col; std::getline(hs, col, ',');) cols.insert(col);
    CHECK(cols == std::set<std::string>{"r0", "r1", "r2", "r3"});
    CHECK(count_lines(text) == 1 + 4);

    // The fused checkpoint's table drops the reserved alignment row, so the
    // shared schema again yields the dataset's four relations.
    RunResult fused = run_cli(tmp, "export-corr --manifest " + manifest.string() +
                                       " --checkpoint " +
                                       (run_dir / "checkpoints" / "stage2" / "fused.ckpt")
                                           .string() +
                                       " --out " + csv.string());
    REQUIRE(fused.exit_code == 0);
    CHECK(count_lines(slurp(csv)) == 1 + 4);
  }
}

TEST_CASE("train --stage1-only skips distillation outputs") {
  TempDir tmp;
  const fs::path manifest = write_small_dataset(tmp);
  const fs::path config = write_small_config(tmp);
  const fs::path run_dir = tmp.path / "run1";

  RunResult r = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                 config.string() + " --out " + run_dir.string() +
                                 " --stage1-only --threads 2");
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(run_dir / "checkpoints" / "stage1" / "fused.ckpt"));
  CHECK_FALSE(fs::exists(run_dir / "checkpoints" / "stage2"));
  CHECK(count_lines(slurp(run_dir / "report.tsv")) == 1 + 4);
  CHECK(count_lines(slurp(run_dir / "metrics.tsv")) == 1 + 3 * 4);
  CHECK(slurp(run_dir / "gates.tsv").find("\n") != std::string::npos);  // header only
}

TEST_CASE("augment applies swaps and closure and reaches a fixed point") {
  TempDir tmp;
  const fs::path manifest = write_small_dataset(tmp);

  const fs::path aug1 = tmp.path / "aug1";
  RunResult first = run_cli(tmp, "augment --manifest " + manifest.string() + " --out " +
                                     aug1.string());
  CAPTURE(first.err);
  REQUIRE(first.exit_code == 0);
  CHECK(fs::exists(aug1 / "manifest.json"));
  nlohmann::json s1 = nlohmann::json::parse(slurp(aug1 / "augment_summary.json"));
  CHECK(s1["swap_added"].get<size_t>() > 0);
  CHECK(first.out.find("added") != std::string::npos);

  const fs::path aug2 = tmp.path / "aug2";
  RunResult second = run_cli(tmp, "augment --manifest " + (aug1 / "manifest.json").string() +
                                      " --out " + aug2.string());
  CAPTURE(second.err);
  REQUIRE(second.exit_code == 0);
  nlohmann::json s2 = nlohmann::json::parse(slurp(aug2 / "augment_summary.json"));
  CHECK(s2["swap_added"] == 0);
  CHECK(s2["closure_added"] == 0);

  SUBCASE("a dataset without a shared relation schema is rejected") {
    MultiKgStore store;
    store.name = "disjoint";
    store.shared_relation_schema = false;
    for (int k = 0; k < 2; ++k) {
      KgData kg;
      kg.name = k == 0 ? "a" : "b";
      kg.entity_names = {"x", "y", "z"};
      kg.relation_names = {"rel"};
      kg.train = {{0, 0, 1}, {1, 0, 2}};
      store.kgs.push_back(kg);
    }
    store.alignments.push_back(make_alignment({0, 0}, {1, 0}));
    const fs::path m2 = write_dataset(store, tmp.path / "disjoint");
    RunResult r = run_cli(tmp, "augment --manifest " + m2.string() + " --out " +
                                   (tmp.path / "aug3").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("data error") != std::string::npos);
  }
}

TEST_CASE("diagnose prints the component histogram") {
  TempDir tmp;
  const fs::path manifest = write_small_dataset(tmp);

  RunResult r = run_cli(tmp, "diagnose --manifest " + manifest.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.rfind("component_size\tcount\n", 0) == 0);
  CHECK(r.out.find("\n2\t") != std::string::npos);  // seed pairs are 2-components
  CHECK(r.out.find("0 component(s) larger than 50") != std::string::npos);

  SUBCASE("a low threshold flags components and writes the CSV") {
    const fs::path diag = tmp.path / "diag";
    RunResult f = run_cli(tmp, "diagnose --manifest " + manifest.string() +
                                   " --threshold 1 --out " + diag.string());
    REQUIRE(f.exit_code == 0);
    const std::string csv = slurp(diag / "flagged_components.csv");
    CHECK(csv.rfind("component,kg,entity\n", 0) == 0);
    CHECK(count_lines(csv) > 1);
  }
}

TEST_CASE("error reporting maps exception kinds to exit codes") {
  TempDir tmp;
  const fs::path manifest = write_small_dataset(tmp);
  const fs::path config = write_small_config(tmp);

  SUBCASE("configuration problems exit 1") {
    RunResult r = run_cli(tmp, "evaluate --manifest " + manifest.string() +
                                   " --checkpoint missing.ckpt --filter nonsense");
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("config error") != std::string::npos);

    std::ofstream(tmp.path / "bad.json") << "{\"lr\": 0}";
    RunResult t = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                   (tmp.path / "bad.json").string() + " --out " +
                                   (tmp.path / "r").string());
    CHECK(t.exit_code == 1);
    CHECK(t.err.find("lr") != std::string::npos);
  }

  SUBCASE("missing files and vocabulary mismatches exit 2") {
    RunResult r = run_cli(tmp, "train --manifest " + (tmp.path / "no_such.json").string() +
                                   " --out " + (tmp.path / "r").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("data error") != std::string::npos);

    RunResult miss = run_cli(tmp, "evaluate --manifest " + manifest.string() +
                                      " --checkpoint " +
                                      (tmp.path / "absent.ckpt").string());
    CHECK(miss.exit_code == 2);
  }

  SUBCASE("numeric blow-ups exit 3") {
    TrainConfig cfg;
    cfg.model.dim = 4;
    cfg.model.score = ScoreKind::kDistMult;
    cfg.model.composition = Composition::kMultiply;
    cfg.model.activation = Activation::kIdentity;
    cfg.epochs_stage1 = 2;
    cfg.epochs_stage2 = 1;
    cfg.eval_every = 1;
    cfg.batch_size = 32;
    cfg.neg_samples = 2;
    cfg.top_k = 3;
    cfg.lr = 1e300;  // the first optimizer step catapults every tensor to ~1e300
    const fs::path bad = tmp.path / "explode.json";
    std::ofstream(bad) << cfg.to_json_string();
    RunResult r = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                   bad.string() + " --out " + (tmp.path / "r3").string());
    CHECK(r.exit_code == 3);
    CHECK(r.err.find("numeric error") != std::string::npos);
  }

  SUBCASE("usage errors from the argument parser exit 1") {
    RunResult r = run_cli(tmp, "train");  // missing required options
    CHECK(r.exit_code == 1);
    RunResult u = run_cli(tmp, "frobnicate");
    CHECK(u.exit_code == 1);
  }

  SUBCASE("--ensemble without a fused checkpoint exits 1") {
    const fs::path run_dir = tmp.path / "run_s1";
    RunResult tr = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                    config.string() + " --out " + run_dir.string() +
                                    " --stage1-only");
    REQUIRE(tr.exit_code == 0);
    RunResult r = run_cli(
        tmp, "evaluate --manifest " + manifest.string() + " --checkpoint " +
                 (run_dir / "checkpoints" / "stage1" / "indiv_view0.ckpt").string() +
                 " --ensemble");
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("ensemble") != std::string::npos);
  }

  SUBCASE("a checkpoint from another dataset is a vocabulary mismatch") {
    const fs::path run_dir = tmp.path / "run_m";
    RunResult tr = run_cli(tmp, "train --manifest " + manifest.string() + " --config " +
                                    config.string() + " --out " + run_dir.string() +
                                    " --stage1-only");
    REQUIRE(tr.exit_code == 0);

    MultiKgStore other = make_synthetic_complementary(10, 2, 30, 2, 0.5, 0.2, 4);
    const fs::path m2 = write_dataset(other, tmp.path / "other");
    RunResult r = run_cli(
        tmp, "evaluate --manifest " + m2.string() + " --checkpoint " +
                 (run_dir / "checkpoints" / "stage1" / "fused.ckpt").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("vocabulary") != std::string::npos);
  }
}
