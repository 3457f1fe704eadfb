#include <sys/wait.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hwids/runtime.hpp"
#include "json.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = HWIDS_CLI;
const std::string kFixtures = HWIDS_FIXTURE_DIR;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Workdir {
 public:
  Workdir() : dir_(fs::temp_directory_path() / ("hwids_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_dataset();
  }
  ~Workdir() { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  Run run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = kCli + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string data() const { return path("data.csv").string(); }

 private:
  // 4 classes from a hidden depth-2 tree; names are strings so the CSV looks
  // like a labelled capture export.
  void write_dataset() const {
    const auto s = oracle::tree_dataset(600, 5, 4, 2, 0.0, 3);
    std::ofstream f(dir_ / "data.csv");
    f << "f0,f1,f2,f3,f4,Attack_type\n";
    const char* names[] = {"DDoS_UDP", "Normal", "Port_Scanning", "XSS"};
    for (std::size_t r = 0; r < s.data.rows(); ++r) {
      for (std::size_t c = 0; c < 5; ++c) f << s.data.features(r, c) * 10.0 << ',';
      f << names[s.data.labels[r]] << '\n';
    }
  }

  fs::path dir_;
};

const std::string kSmallGrid = R"({"grid": {"n_trees": [2, 10], "max_depth": [5], "min_child_size": [5],
                                            "colsample": [1.0], "subsample": [1.0], "num_leaves": [8, 16]}})";

}  // namespace

TEST_CASE("usage errors exit with 1") {
  Workdir w;
  CHECK(w.run("").code == 1);
  CHECK(w.run("frobnicate").code == 1);
  CHECK(w.run("gridsearch --data /nonexistent.csv").code == 1);
  CHECK(w.run("eval --model " + w.path("missing.hams").string()).code == 1);
  CHECK(w.run("--version").code == 0);
  const auto help = w.run("--help");
  CHECK(help.code == 0);
  CHECK(help.out.find("gridsearch") != std::string::npos);
}

TEST_CASE("grid search: feasible run writes events, summary and model") {
  Workdir w;
  std::ofstream(w.path("grid.json")) << kSmallGrid;
  const auto r = w.run("--config " + w.path("grid.json").string() + " gridsearch --data " + w.data() +
                       " --label-column Attack_type --out-dir " + w.path("out").string());
  REQUIRE(r.code == 0);
  const auto summary = json::parse(slurp(w.path("out/summary.json")));
  CHECK(summary.at("feasible") == true);
  CHECK(summary.at("candidates") == 4);
  CHECK(summary.at("best").at("val_accuracy").get<double>() >= 0.9);
  std::istringstream events(slurp(w.path("out/events.ndjson")));
  std::string line;
  int lines = 0;
  while (std::getline(events, line)) {
    CHECK(json::accept(line));
    ++lines;
  }
  CHECK(lines == 4);
  const auto model = hwids::runtime::load_model(w.path("out/model.hams"));
  CHECK(model.kind == hwids::runtime::ModelKind::GbdtLeafwise);
  CHECK(model.class_names.size() == 4);

  SUBCASE("the saved model evaluates under 5-fold cross-validation") {
    const auto e = w.run("eval --model " + w.path("out/model.hams").string() + " --data " + w.data() +
                         " --label-column Attack_type --folds 5");
    REQUIRE(e.code == 0);
    const auto j = json::parse(e.out);
    CHECK(j.at("per_fold").size() == 5);
    CHECK(j.at("accuracy").at("mean").get<double>() >= 0.9);
    CHECK(j.at("accuracy").at("std").get<double>() >= 0.0);
  }
  SUBCASE("bench enforces the minimum run count") {
    CHECK(w.run("bench --model " + w.path("out/model.hams").string() + " --runs 29").code == 1);
    const auto b = w.run("bench --model " + w.path("out/model.hams").string() + " --runs 30 --current-ma 50");
    REQUIRE(b.code == 0);
    const auto j = json::parse(b.out);
    CHECK(j.at("runs") == 30);
    CHECK(j.at("power_mW").get<double>() == doctest::Approx(250.0));
  }
  SUBCASE("profile reports the stored profile") {
    const auto p = w.run("profile --model " + w.path("out/model.hams").string());
    REQUIRE(p.code == 0);
    CHECK(json::parse(p.out).at("profile").at("compute_unit") == "Ops");
  }
}

TEST_CASE("grid search: zero flash budget exits with 3") {
  Workdir w;
  std::ofstream(w.path("grid.json")) << kSmallGrid;
  const auto r = w.run("--config " + w.path("grid.json").string() + " gridsearch --data " + w.data() +
                       " --label-column Attack_type --budget-flash-kb 0 --out-dir " + w.path("out").string());
  CHECK(r.code == 3);
  const auto summary = json::parse(slurp(w.path("out/summary.json")));
  CHECK(summary.at("feasible") == false);
  CHECK(summary.contains("best_infeasible"));
  CHECK_FALSE(fs::exists(w.path("out/model.hams")));
}

TEST_CASE("class mapping to two classes") {
  Workdir w;
  std::ofstream(w.path("grid.json")) << kSmallGrid;
  const auto r = w.run("--config " + w.path("grid.json").string() + " gridsearch --family rf --task 2 --data " +
                       w.data() + " --label-column Attack_type --out-dir " + w.path("out").string());
  REQUIRE(r.code == 0);
  CHECK(hwids::runtime::load_model(w.path("out/model.hams")).class_names ==
        std::vector<std::string>{"Attack", "Normal"});
}

TEST_CASE("train a CNN from a descriptor and profile it") {
  Workdir w;
  const std::string params =
      R"('{"blocks":[{"filters":8,"kernel":3,"stride":1,"padding":"same","dropout":0.1,"pool":"max","pool_size":2}],"train":{"max_epochs":3,"batch_size":64}}')";
  const auto t = w.run("train --model-type cnn --params " + params + " --data " + w.data() +
                       " --label-column Attack_type --out " + w.path("cnn.hams").string());
  REQUIRE(t.code == 0);
  const auto j = json::parse(t.out);
  CHECK(j.at("kind") == "cnn");
  const auto p = w.run("profile --descriptor " + params + " --input-len 5 --n-classes 4");
  REQUIRE(p.code == 0);
  CHECK(json::parse(p.out).at("profile") == j.at("profile"));
}

TEST_CASE("damaged model files exit with 2") {
  Workdir w;
  std::ofstream(w.path("bad.hams")) << "HAMS not really a model";
  CHECK(w.run("profile --model " + w.path("bad.hams").string()).code == 2);
}

TEST_CASE("extract reproduces the golden CSV") {
  Workdir w;
  const auto r = w.run("extract --pcap " + kFixtures + "/flows.pcap --out " + w.path("flows.csv").string());
  REQUIRE(r.code == 0);
  CHECK(slurp(w.path("flows.csv")) == slurp(kFixtures + "/flows_golden.csv"));
  const auto to_stdout = w.run("extract --pcap " + kFixtures + "/flows_be.pcap");
  CHECK(to_stdout.out == slurp(kFixtures + "/flows_golden.csv"));
}

TEST_CASE("classify without timings is deterministic") {
  Workdir w;
  // A model over the default flow schema, trained on the golden rows.
  const auto golden = kFixtures + "/flows_golden.csv";
  const auto t = w.run("train --model-type rf --params '{\"n_trees\":3,\"max_depth\":3,\"min_child_size\":1}' --data " +
                       golden + " --out " + w.path("flow.hams").string());
  REQUIRE(t.code == 0);
  const std::string cmd = "classify --no-timing --model " + w.path("flow.hams").string() + " --pcap " + kFixtures +
                          "/flows.pcap";
  const auto a = w.run(cmd);
  const auto b = w.run(cmd);
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  std::istringstream lines(a.out);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    CHECK(j.at("class") == "unlabeled");
    CHECK_FALSE(j.contains("total_ms"));
    ++n;
  }
  CHECK(n == 6);

  std::ofstream(w.path("schema.json")) << R"({"features": ["duration", "pkt_count"]})";
  CHECK(w.run(cmd + " --schema " + w.path("schema.json").string()).code == 1);
}
