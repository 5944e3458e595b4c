#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "test_helpers.hpp"

using subsel::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunResult run(const TempDir& scratch, const std::string& args) {
  const fs::path err_file = scratch / "stderr.txt";
  const std::string cmd = std::string(SUBSEL_CLI_PATH) + " " + args + " > /dev/null 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_file);
  return r;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("cli: synth, validate and pipeline") {
  TempDir dir;
  const std::string dump = (dir / "dump").string();
  REQUIRE(run(dir, "synth --kind dump --n 100 --seed 4 --out " + dump).code == 0);
  CHECK(run(dir, "validate " + dump + " --out " + (dir / "val").string()).code == 0);
  CHECK(fs::exists(dir / "val" / "report.json"));

  const auto r = run(dir, "pipeline " + dump + " --budget 16 --out " + (dir / "out").string());
  REQUIRE(r.code == 0);
  CHECK(lines(dir / "out" / "selection" / "selected.ids").size() == 16);
  const auto manifest = nlohmann::json::parse(std::ifstream(dir / "out" / "run_manifest.json"));
  CHECK(manifest.at("command") == "pipeline");
  CHECK(manifest.at("k_used").get<int>() >= 1);
  CHECK(manifest.contains("energy_ratio"));
  CHECK(manifest.contains("wall_time_seconds"));
  CHECK(manifest.at("config").at("budget") == 16);
}

TEST_CASE("cli: usage errors exit 2 with an error prefix") {
  TempDir dir;
  const std::string dump = (dir / "dump").string();
  REQUIRE(run(dir, "synth --kind dump --n 20 --out " + dump).code == 0);
  for (const std::string& args : {"pipeline " + dump + " --budget 0 --out " + (dir / "o").string(),
                                  "pipeline " + dump + " --mode best --out " + (dir / "o").string(),
                                  std::string("select"), std::string("frobnicate")}) {
    const auto r = run(dir, args);
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error:", 0) == 0);
  }
}

TEST_CASE("cli: data errors exit 1") {
  TempDir dir;
  const auto r = run(dir, "validate " + (dir / "missing").string());
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error:", 0) == 0);

  REQUIRE(run(dir, "synth --kind dump --n 20 --out " + (dir / "d").string()).code == 0);
  const fs::path shard = dir / "d" / "shard-00000.ssdp";
  fs::resize_file(shard, fs::file_size(shard) - 3);
  const auto broken = run(dir, "pipeline " + (dir / "d").string() + " --out " + (dir / "o").string());
  CHECK(broken.code == 1);
  CHECK(broken.err.find("offset") != std::string::npos);
}

TEST_CASE("cli: outputs are identical across runs and worker counts") {
  TempDir dir;
  const std::string dump = (dir / "dump").string();
  REQUIRE(run(dir, "synth --kind dump --n 1500 --shard-size 500 --seed 2 --out " + dump).code == 0);
  REQUIRE(run(dir, "--workers 1 pipeline " + dump + " --out " + (dir / "a").string()).code == 0);
  REQUIRE(run(dir, "--workers 1 pipeline " + dump + " --out " + (dir / "b").string()).code == 0);
  REQUIRE(run(dir, "--workers 4 pipeline " + dump + " --out " + (dir / "c").string()).code == 0);
  for (const char* f : {"repr/repr.f64", "repr/repr.ids", "repr/repr.json", "selection/selected.ids",
                        "selection/scores.jsonl", "selection/selection.json"}) {
    const std::string a = slurp(dir / "a" / f);
    CHECK(!a.empty());
    CHECK(a == slurp(dir / "b" / f));
    CHECK(a == slurp(dir / "c" / f));
  }
}

TEST_CASE("cli: a run manifest reproduces its selection") {
  TempDir dir;
  const std::string dump = (dir / "dump").string();
  REQUIRE(run(dir, "synth --kind dump --n 300 --seed 8 --out " + dump).code == 0);
  REQUIRE(run(dir, "pipeline " + dump + " --mode leverage-sample --seed 19 --budget 10% --out " +
                       (dir / "first").string())
              .code == 0);
  REQUIRE(run(dir, "pipeline " + dump + " --config " + (dir / "first" / "run_manifest.json").string() +
                       " --out " + (dir / "second").string())
              .code == 0);
  const auto first = lines(dir / "first" / "selection" / "selected.ids");
  CHECK(first.size() == 30);
  CHECK(first == lines(dir / "second" / "selection" / "selected.ids"));
}

TEST_CASE("cli: reprs then select matches pipeline") {
  TempDir dir;
  const std::string dump = (dir / "dump").string();
  REQUIRE(run(dir, "synth --kind dump --n 200 --seed 5 --out " + dump).code == 0);
  REQUIRE(run(dir, "reprs " + dump + " --tau 0.8 --out " + (dir / "r").string()).code == 0);
  REQUIRE(run(dir, "select " + (dir / "r").string() + " --budget 25 --out " + (dir / "s").string()).code == 0);
  REQUIRE(run(dir, "pipeline " + dump + " --tau 0.8 --budget 25 --out " + (dir / "p").string()).code == 0);
  CHECK(slurp(dir / "s" / "selected.ids") == slurp(dir / "p" / "selection" / "selected.ids"));
  CHECK(slurp(dir / "r" / "repr.f64") == slurp(dir / "p" / "repr" / "repr.f64"));
}

TEST_CASE("cli: planted synth, bench and tau-sweep") {
  TempDir dir;
  REQUIRE(run(dir, "synth --kind planted --n 400 --d 16 --rank 3 --residual 0.05 --out " + (dir / "pl").string())
              .code == 0);
  REQUIRE(run(dir, "select " + (dir / "pl").string() + " --budget 20 --out " + (dir / "s").string()).code == 0);
  const auto meta = nlohmann::json::parse(std::ifstream(dir / "s" / "selection.json"));
  CHECK(meta.at("k_used") == 3);

  REQUIRE(run(dir, "bench --sizes 1000,2000 --d 16 --reps 1 --csv --out " + (dir / "b").string()).code == 0);
  CHECK(fs::exists(dir / "b" / "bench.csv"));

  REQUIRE(run(dir, "synth --kind dump --n 100 --out " + (dir / "dump").string()).code == 0);
  REQUIRE(run(dir, "tau-sweep " + (dir / "dump").string() + " --taus 0.5,0.9 --out " + (dir / "t").string())
              .code == 0);
  CHECK(fs::exists(dir / "t" / "run_manifest.json"));

  REQUIRE(run(dir, "verify --trials 3 --out " + (dir / "v").string()).code == 0);
  CHECK(fs::exists(dir / "v" / "verify.json"));
}
