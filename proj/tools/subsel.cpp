// subsel: command-line driver for the data-selection pipeline.
//
// Exit codes: 0 ok, 1 data error, 2 usage error. Every error is reported on
// stderr as a single line starting with "error:".

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "subsel/dump_io.hpp"
#include "subsel/error.hpp"
#include "subsel/file_util.hpp"
#include "subsel/repr_builder.hpp"
#include "subsel/subspace_selector.hpp"
#include "subsel/svd_engine.hpp"
#include "subsel/synth_bench.hpp"
#include "subsel/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace subsel;

namespace {

constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

unsigned workers_from(int flag) {
  if (flag > 0) return static_cast<unsigned>(flag);
  if (const char* env = std::getenv("SUBSEL_WORKERS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return static_cast<unsigned>(n);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SUBSEL_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("invalid number '" + item + "' in list '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(text)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw UsageError("sizes must be positive integers: " + text);
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

/// One run_manifest.json per invocation, next to the outputs.
class RunRecord {
 public:
  RunRecord(std::string command, fs::path out_dir)
      : command_(std::move(command)), out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    doc_["command"] = command_;
    doc_["tool_version"] = kVersion;
    doc_["started_at"] = utc_now();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::array();
  }

  json& doc() { return doc_; }
  void input(const std::string& key, const fs::path& p) { doc_["inputs"][key] = p.string(); }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }

  void write() {
    doc_["wall_time_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text_atomic(out_dir_ / "run_manifest.json", doc_.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path out_dir_;
  std::chrono::steady_clock::time_point start_;
  json doc_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

json validation_json(const dump::ValidationReport& r) {
  json shards = json::array();
  for (const auto& s : r.shards) {
    char crc[16];
    std::snprintf(crc, sizeof(crc), "%08x", s.crc32);
    shards.push_back({{"path", s.path}, {"bytes", s.bytes}, {"crc32", crc}});
  }
  return {{"num_samples", r.num_samples}, {"manifest_samples", r.manifest_samples},
          {"hidden_dim", r.hidden_dim},   {"min_n_v", r.min_n_v},
          {"max_n_v", r.max_n_v},         {"min_n_u", r.min_n_u},
          {"max_n_u", r.max_n_u},         {"shards", shards},
          {"error_count", r.error_count}, {"errors", r.errors}};
}

// Flags shared by select / pipeline / tau-sweep. Empty strings mean "keep the
// value already in the config".
struct SelectFlags {
  std::string budget;
  std::string mode;
  std::string svd_method;
  double energy_threshold = -1;
  double epsilon = -1;
  long long seed = -1;
  bool no_center = false;

  void add_to(CLI::App* app) {
    app->add_option("--budget", budget, "sample count (100000) or percentage of N (16%)");
    app->add_option("--mode", mode, "top-leverage | leverage-sample");
    app->add_option("--energy-threshold", energy_threshold, "spectral energy fraction for the rank rule (default 0.9)");
    app->add_option("--epsilon", epsilon, "sampling-mode accuracy parameter (default 0.5)");
    app->add_option("--seed", seed, "RNG seed (default 0)");
    app->add_option("--svd", svd_method, "auto | dense | randomized");
    app->add_flag("--no-center", no_center, "skip column centering");
  }

  void apply(select::SelectConfig& cfg) const {
    if (!budget.empty()) cfg.budget = select::Budget::parse(budget);
    if (!mode.empty()) cfg.mode = select::parse_mode(mode);
    if (energy_threshold >= 0) cfg.energy_threshold = energy_threshold;
    if (epsilon >= 0) cfg.epsilon = epsilon;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (no_center) cfg.center = false;
    if (!svd_method.empty()) {
      json j = select::to_json(cfg);
      j["svd"]["method"] = svd_method;
      cfg = select::config_from_json(j);
    }
    select::validate(cfg);
  }
};

select::SelectConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  // A run manifest can be fed back in directly.
  if (j.contains("config") && j.contains("command")) j = j.at("config");
  return select::config_from_json(j);
}

void record_selection(RunRecord& run, const select::SelectionResult& r) {
  run.doc()["k_used"] = r.k_used;
  run.doc()["energy_ratio"] = r.energy_ratio;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subsel: training-free subspace-aware data selection"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  int workers_flag = 0;
  app.add_option("--workers", workers_flag, "worker threads (falls back to SUBSEL_WORKERS, then 1)");

  // validate
  auto* validate = app.add_subcommand("validate", "check every record of an SSDP dump");
  std::string v_dump, v_out;
  std::size_t v_cap = 20;
  validate->add_option("dump_dir", v_dump)->required();
  validate->add_option("--cap", v_cap, "maximum error messages to keep");
  validate->add_option("--out", v_out, "directory for report.json and run_manifest.json");

  // reprs
  auto* reprs = app.add_subcommand("reprs", "build the representation matrix from a dump");
  std::string r_dump, r_out;
  double r_tau = repr::kDefaultTau;
  reprs->add_option("dump_dir", r_dump)->required();
  reprs->add_option("--tau", r_tau, "attention-mass threshold (default 0.9)");
  reprs->add_option("--out", r_out)->required();

  // select
  auto* sel = app.add_subcommand("select", "select samples from a saved representation matrix");
  std::string s_repr, s_out, s_config;
  SelectFlags s_flags;
  sel->add_option("repr_dir", s_repr)->required();
  sel->add_option("--config", s_config, "JSON config (same schema as the manifest's config echo)");
  sel->add_option("--out", s_out)->required();
  s_flags.add_to(sel);

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "dump -> representations -> selection in one run");
  std::string p_dump, p_out, p_config;
  double p_tau = -1;
  SelectFlags p_flags;
  pipe->add_option("dump_dir", p_dump)->required();
  pipe->add_option("--config", p_config, "JSON config file");
  pipe->add_option("--tau", p_tau, "attention-mass threshold");
  pipe->add_option("--out", p_out)->required();
  p_flags.add_to(pipe);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dump or planted matrix");
  std::string y_kind = "dump", y_out;
  std::size_t y_n = 100, y_d = 16, y_rank = 8, y_shard = 1000;
  std::uint32_t y_nv_min = 8, y_nv_max = 32, y_nu_min = 2, y_nu_max = 12;
  double y_residual = 0.05, y_offset = 0.0;
  std::uint64_t y_seed = 0;
  synth->add_option("--kind", y_kind, "dump | planted")->check(CLI::IsMember({"dump", "planted"}));
  synth->add_option("--n", y_n, "number of samples");
  synth->add_option("--d", y_d, "hidden dimension");
  synth->add_option("--rank", y_rank, "latent / planted rank");
  synth->add_option("--nv-min", y_nv_min);
  synth->add_option("--nv-max", y_nv_max);
  synth->add_option("--nu-min", y_nu_min);
  synth->add_option("--nu-max", y_nu_max);
  synth->add_option("--shard-size", y_shard);
  synth->add_option("--residual", y_residual, "planted: noise share of total energy");
  synth->add_option("--mean-offset", y_offset, "planted: norm of a constant row offset");
  synth->add_option("--seed", y_seed);
  synth->add_option("--out", y_out)->required();

  // bench
  auto* bench = app.add_subcommand("bench", "time the selection stage across dataset sizes");
  std::string b_sizes = "10000,100000,1000000", b_out;
  std::size_t b_d = 64, b_reps = 3;
  std::uint64_t b_seed = 0;
  bool b_csv = false;
  bench->add_option("--sizes", b_sizes, "comma-separated ascending N values");
  bench->add_option("--d", b_d);
  bench->add_option("--reps", b_reps, "timed repetitions per size (median reported)");
  bench->add_option("--seed", b_seed);
  bench->add_flag("--csv", b_csv, "also write bench.csv");
  bench->add_option("--out", b_out);

  // verify
  auto* verify = app.add_subcommand("verify", "run oracle comparisons on planted data");
  std::size_t f_trials = 20;
  std::uint64_t f_seed = 0;
  std::string f_out;
  verify->add_option("--trials", f_trials);
  verify->add_option("--seed", f_seed);
  verify->add_option("--out", f_out);

  // tau-sweep
  auto* sweep = app.add_subcommand("tau-sweep", "rebuild and reselect for several tau values");
  std::string t_dump, t_taus = "0.85,0.9,0.95", t_out, t_config;
  SelectFlags t_flags;
  sweep->add_option("dump_dir", t_dump)->required();
  sweep->add_option("--taus", t_taus);
  sweep->add_option("--config", t_config);
  sweep->add_option("--out", t_out);
  t_flags.add_to(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const unsigned workers = workers_from(workers_flag);

    if (*validate) {
      const auto report = dump::validate_dump(v_dump, v_cap);
      const json j = validation_json(report);
      std::cout << j.dump(2) << "\n";
      if (!v_out.empty()) {
        ensure_dir(v_out);
        RunRecord run("validate", v_out);
        run.input("dump_dir", v_dump);
        write_text_atomic(fs::path(v_out) / "report.json", j.dump(2) + "\n");
        run.output(fs::path(v_out) / "report.json");
        run.write();
      }
      if (!report.ok()) {
        std::cerr << "error: data: " << report.error_count << " invalid record(s); first: "
                  << (report.errors.empty() ? "" : report.errors.front()) << "\n";
        return kExitData;
      }
      return 0;
    }

    if (*reprs) {
      ensure_dir(r_out);
      RunRecord run("reprs", r_out);
      run.input("dump_dir", r_dump);
      run.doc()["config"] = {{"tau", r_tau}};
      run.doc()["workers"] = workers;
      const auto build = repr::build_matrix(r_dump, r_tau, workers);
      repr::save_repr(build, r_out);
      for (const char* f : {"repr.json", "repr.f64", "repr.ids"}) run.output(fs::path(r_out) / f);
      run.doc()["skipped"] = build.skipped.size();
      run.doc()["mean_retained_ratio"] = build.mean_retained_ratio();
      run.write();
      if (!build.skipped.empty()) {
        std::cerr << "warning: skipped " << build.skipped.size() << " sample(s) without attention signal\n";
      }
      std::cout << "N=" << build.matrix.rows() << " d=" << build.matrix.cols()
                << " skipped=" << build.skipped.size() << "\n";
      return 0;
    }

    if (*sel) {
      select::SelectConfig cfg = load_config(s_config);
      s_flags.apply(cfg);
      const auto build = repr::load_repr(s_repr);
      cfg.tau = build.tau;
      ensure_dir(s_out);
      RunRecord run("select", s_out);
      run.input("repr_dir", s_repr);
      run.doc()["config"] = select::to_json(cfg);
      run.doc()["seed"] = cfg.seed;
      const auto result = select::run_selection(build.matrix, cfg);
      select::save_selection(result, build.matrix, cfg, s_out);
      for (const char* f : {"selected.ids", "scores.jsonl", "selection.json"}) run.output(fs::path(s_out) / f);
      record_selection(run, result);
      run.write();
      std::cout << "selected=" << result.selected.size() << " k_used=" << result.k_used
                << " energy_ratio=" << result.energy_ratio << "\n";
      return 0;
    }

    if (*pipe) {
      select::SelectConfig cfg = load_config(p_config);
      if (p_tau >= 0) cfg.tau = p_tau;
      p_flags.apply(cfg);
      const fs::path out(p_out);
      ensure_dir(out);
      RunRecord run("pipeline", out);
      run.input("dump_dir", p_dump);
      run.doc()["config"] = select::to_json(cfg);
      run.doc()["seed"] = cfg.seed;
      run.doc()["workers"] = workers;
      const auto build = repr::build_matrix(p_dump, cfg.tau, workers);
      repr::save_repr(build, out / "repr");
      const auto result = select::run_selection(build.matrix, cfg);
      select::save_selection(result, build.matrix, cfg, out / "selection");
      for (const char* f : {"repr/repr.json", "repr/repr.f64", "repr/repr.ids", "selection/selected.ids",
                            "selection/scores.jsonl", "selection/selection.json"}) {
        run.output(out / f);
      }
      run.doc()["skipped"] = build.skipped.size();
      record_selection(run, result);
      run.write();
      if (!build.skipped.empty()) {
        std::cerr << "warning: skipped " << build.skipped.size() << " sample(s) without attention signal\n";
      }
      std::cout << "N=" << build.matrix.rows() << " selected=" << result.selected.size()
                << " k_used=" << result.k_used << " energy_ratio=" << result.energy_ratio << "\n";
      return 0;
    }

    if (*synth) {
      const fs::path out(y_out);
      if (y_kind == "dump") {
        synth::SyntheticDumpSpec spec;
        spec.N = y_n;
        spec.d = static_cast<std::uint32_t>(y_d);
        spec.n_v = {y_nv_min, y_nv_max};
        spec.n_u = {y_nu_min, y_nu_max};
        spec.seed = y_seed;
        spec.shard_size = y_shard;
        spec.latent_rank = y_rank;
        const auto manifest = synth::gen_synthetic_dump(spec, out);
        RunRecord run("synth", out);
        run.doc()["config"] = {{"kind", "dump"}, {"n", y_n}, {"d", y_d}, {"rank", y_rank},
                               {"n_v", {y_nv_min, y_nv_max}}, {"n_u", {y_nu_min, y_nu_max}},
                               {"shard_size", y_shard}};
        run.doc()["seed"] = y_seed;
        run.output(out / dump::kManifestName);
        for (const auto& s : manifest.shard_paths) run.output(out / s);
        run.write();
        std::cout << "wrote " << manifest.num_samples << " samples in " << manifest.shard_paths.size()
                  << " shard(s)\n";
      } else {
        synth::PlantedSpec spec;
        spec.N = y_n;
        spec.d = y_d;
        spec.true_rank = y_rank;
        for (std::size_t j = 0; j < y_rank; ++j) spec.spectrum.push_back(static_cast<double>(y_rank - j));
        spec.noise_sigma = synth::noise_for_residual_fraction(spec, y_residual);
        if (y_offset > 0) spec.mean_offset.assign(y_d, y_offset / std::sqrt(static_cast<double>(y_d)));
        spec.seed = y_seed;
        repr::BuildResult build;
        build.matrix = synth::gen_planted_matrix(spec).matrix;
        build.tau = repr::kDefaultTau;
        repr::save_repr(build, out);
        RunRecord run("synth", out);
        run.doc()["config"] = {{"kind", "planted"}, {"n", y_n}, {"d", y_d}, {"rank", y_rank},
                               {"residual", y_residual}, {"mean_offset", y_offset}};
        run.doc()["seed"] = y_seed;
        for (const char* f : {"repr.json", "repr.f64", "repr.ids"}) run.output(out / f);
        run.write();
        std::cout << "wrote planted " << y_n << "x" << y_d << " matrix of rank " << y_rank << "\n";
      }
      return 0;
    }

    if (*bench) {
      const auto sizes = parse_size_list(b_sizes);
      const auto report = synth::scaling_bench(sizes, b_d, b_reps, b_seed);
      std::cout << synth::to_text(report);
      if (!b_out.empty()) {
        const fs::path out(b_out);
        ensure_dir(out);
        RunRecord run("bench", out);
        run.doc()["config"] = {{"sizes", sizes}, {"d", b_d}, {"reps", b_reps}};
        run.doc()["seed"] = b_seed;
        write_text_atomic(out / "bench.json", synth::to_json(report).dump(2) + "\n");
        write_text_atomic(out / "bench.txt", synth::to_text(report));
        run.output(out / "bench.json");
        run.output(out / "bench.txt");
        if (b_csv) {
          std::ostringstream csv;
          csv << "N,median_seconds,k_used\n";
          for (const auto& row : report.rows) csv << row.N << "," << row.median_seconds << "," << row.k_used << "\n";
          write_text_atomic(out / "bench.csv", csv.str());
          run.output(out / "bench.csv");
        }
        run.write();
      }
      return 0;
    }

    if (*verify) {
      json checks = json::array();
      bool all_ok = true;
      auto check = [&](const std::string& name, bool ok, json detail) {
        all_ok = all_ok && ok;
        std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
        checks.push_back({{"name", name}, {"ok", ok}, {"detail", std::move(detail)}});
      };

      // Randomized vs dense spectrum on a planted matrix.
      synth::PlantedSpec spec;
      spec.N = 2000;
      spec.d = 64;
      spec.true_rank = 8;
      for (std::size_t j = 0; j < 8; ++j) spec.spectrum.push_back(static_cast<double>(8 - j));
      spec.noise_sigma = synth::noise_for_residual_fraction(spec, 0.10);
      spec.seed = f_seed;
      const auto planted = synth::gen_planted_matrix(spec);
      const auto Xc = select::center_columns(planted.matrix.X).Xc;
      const auto dense = svd::dense_svd(Xc);
      svd::SvdConfig fast_cfg;
      fast_cfg.method = svd::Method::Randomized;
      fast_cfg.seed = f_seed;
      const auto fast = svd::fit_subspace(Xc, svd::kDefaultEnergyThreshold, fast_cfg);
      double worst = 0.0;
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(fast.k); ++j) {
        worst = std::max(worst, std::abs(fast.singular_values[j] - dense.singular_values[j]) / dense.singular_values[j]);
      }
      check("randomized-vs-dense-spectrum", worst <= 1e-4, {{"max_rel_error", worst}, {"k_used", fast.k}});

      synth::CxTrialOptions opts;
      opts.seed = f_seed;
      opts.workers = workers;
      const auto cx = synth::cx_bound_trial(spec, opts, f_trials);
      check("leverage-sampling-bound", cx.pass_rate() >= 0.95, synth::to_json(cx));

      synth::PlantedSpec mean_spec = spec;
      mean_spec.noise_sigma = synth::noise_for_residual_fraction(spec, 0.01);
      mean_spec.mean_offset.assign(spec.d, 20.0 * spec.spectrum.front() / std::sqrt(64.0) * 2.0);
      const auto mean_dominated = synth::gen_planted_matrix(mean_spec);
      select::SelectConfig cfg;
      cfg.center = false;
      const auto raw = select::run_selection(mean_dominated.matrix, cfg);
      cfg.center = true;
      const auto centered = select::run_selection(mean_dominated.matrix, cfg);
      check("uncentered-rank-collapse", raw.k_used == 1, {{"k_uncentered", raw.k_used}, {"k_centered", centered.k_used}});

      if (!f_out.empty()) {
        const fs::path out(f_out);
        ensure_dir(out);
        RunRecord run("verify", out);
        run.doc()["config"] = {{"trials", f_trials}};
        run.doc()["seed"] = f_seed;
        write_text_atomic(out / "verify.json", json{{"checks", checks}}.dump(2) + "\n");
        run.output(out / "verify.json");
        run.write();
      }
      if (!all_ok) {
        std::cerr << "error: data: verification failed\n";
        return kExitData;
      }
      return 0;
    }

    if (*sweep) {
      select::SelectConfig cfg = load_config(t_config);
      t_flags.apply(cfg);
      const auto taus = parse_double_list(t_taus);
      const auto report = synth::tau_sweep(t_dump, taus, cfg, workers);
      std::cout << synth::to_text(report);
      if (!t_out.empty()) {
        const fs::path out(t_out);
        ensure_dir(out);
        RunRecord run("tau-sweep", out);
        run.input("dump_dir", t_dump);
        run.doc()["config"] = select::to_json(cfg);
        run.doc()["taus"] = taus;
        run.doc()["seed"] = cfg.seed;
        write_text_atomic(out / "tau_sweep.json", synth::to_json(report).dump(2) + "\n");
        write_text_atomic(out / "tau_sweep.txt", synth::to_text(report));
        run.output(out / "tau_sweep.json");
        run.output(out / "tau_sweep.txt");
        run.write();
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    const bool usage = e.kind() == ErrorKind::Config;
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return usage ? kExitUsage : kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
