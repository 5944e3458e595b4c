#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"
#include "json.hpp"
#include "subsel/error.hpp"
#include "subsel/subspace_selector.hpp"
#include "subsel/synth_bench.hpp"
#include "test_helpers.hpp"

using namespace subsel;
using namespace subsel::select;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using subsel::testing::TempDir;

namespace {

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("r" + std::to_string(i));
  return ids;
}

MatrixXd orthonormal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  MatrixXd G(rows, cols);
  for (Eigen::Index i = 0; i < G.size(); ++i) G.data()[i] = normal(rng);
  Eigen::HouseholderQR<MatrixXd> qr(G);
  return qr.householderQ() * MatrixXd::Identity(rows, cols);
}

synth::PlantedSpec flat_spec(std::size_t N, std::size_t d, std::size_t r, double noise, std::uint64_t seed) {
  synth::PlantedSpec spec;
  spec.N = N;
  spec.d = d;
  spec.true_rank = r;
  spec.spectrum.assign(r, 10.0);
  spec.noise_sigma = noise;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("center_columns") {
  MatrixXd X(2, 2);
  X << 1, 2, 3, 4;
  const auto c = center_columns(X);
  CHECK(c.means(0) == 2);
  CHECK(c.means(1) == 3);
  MatrixXd expected(2, 2);
  expected << -1, -1, 1, 1;
  CHECK(c.Xc == expected);

  const auto same = center_columns(MatrixXd::Constant(4, 3, 7.5));
  CHECK(same.Xc.isZero());

  const auto twice = center_columns(center_columns(orthonormal(20, 5, 1) * 3.0).Xc);
  CHECK(twice.means.cwiseAbs().maxCoeff() <= 1e-15);

  try {
    center_columns(MatrixXd::Ones(1, 3));
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooFewSamples);
  }
}

TEST_CASE("leverage scores") {
  const MatrixXd U = MatrixXd::Identity(3, 2);
  CHECK(leverage_scores(U) == VectorXd((VectorXd(3) << 1, 1, 0).finished()));

  const MatrixXd Q = orthonormal(200, 6, 4);
  const VectorXd l = leverage_scores(Q);
  CHECK(std::abs(l.sum() - 6.0) <= 1e-9 * 6);
  CHECK(l.minCoeff() >= 0.0);
  CHECK(l.maxCoeff() <= 1.0 + 1e-12);

  // Invariant to sign flips and rotations of the basis.
  MatrixXd flipped = Q;
  flipped.col(2) *= -1.0;
  CHECK((leverage_scores(flipped) - l).cwiseAbs().maxCoeff() <= 1e-14);
  const MatrixXd R = orthonormal(6, 6, 8);
  CHECK((leverage_scores(Q * R) - l).cwiseAbs().maxCoeff() <= 1e-12);

  try {
    leverage_scores(MatrixXd::Ones(4, 2));
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Validation);
  }
}

TEST_CASE("select_top takes the highest scores with index tie-break") {
  const VectorXd s = (VectorXd(5) << 0.1, 0.5, 0.5, 0.2, 0.0).finished();
  const auto ids = make_ids(5);
  const auto r = select_top(s, ids, 2);
  CHECK(r.selected == std::vector<std::size_t>{1, 2});
  CHECK(r.selected_ids == std::vector<std::string>{"r1", "r2"});
  CHECK(r.ranking == std::vector<std::size_t>{1, 2, 3, 0, 4});
  CHECK(select_top(s, ids, 5).selected.size() == 5);
  CHECK_THROWS_AS(select_top(s, ids, 0), Error);
  CHECK_THROWS_AS(select_top(s, ids, 6), Error);
}

TEST_CASE("sample_leverage draws without replacement") {
  const auto ids = make_ids(4);
  SUBCASE("point mass") {
    const VectorXd s = (VectorXd(4) << 0, 1, 0, 0).finished();
    const auto r = sample_leverage(s, ids, 1, 3);
    CHECK(r.selected == std::vector<std::size_t>{1});
    CHECK(r.zero_filled == 0);
    CHECK(r.seed == 3u);
  }
  SUBCASE("budget equal to N returns everything") {
    const VectorXd s = (VectorXd(4) << 0.1, 0.4, 0.3, 0.2).finished();
    const auto r = sample_leverage(s, ids, 4, 11);
    CHECK(std::set<std::size_t>(r.selected.begin(), r.selected.end()) == std::set<std::size_t>{0, 1, 2, 3});
  }
  SUBCASE("zero-score rows fill the remainder in index order") {
    const VectorXd s = (VectorXd(4) << 0.5, 0.0, 0.5, 0.0).finished();
    const auto r = sample_leverage(s, ids, 3, 5);
    REQUIRE(r.selected.size() == 3);
    CHECK(std::set<std::size_t>(r.selected.begin(), r.selected.begin() + 2) == std::set<std::size_t>{0, 2});
    CHECK(r.selected[2] == 1);
    CHECK(r.zero_filled == 1);
  }
  SUBCASE("all zero scores") {
    CHECK_THROWS_AS(sample_leverage(VectorXd::Zero(4), ids, 2, 0), Error);
  }
  SUBCASE("same seed same draw") {
    const VectorXd s = orthonormal(4, 2, 3).rowwise().squaredNorm();
    CHECK(sample_leverage(s, ids, 2, 42).selected == sample_leverage(s, ids, 2, 42).selected);
  }
}

TEST_CASE("single draws follow the score distribution") {
  const VectorXd s = (VectorXd(2) << 0.75, 0.25).finished();
  const auto ids = make_ids(2);
  const int trials = 100000;
  int first = 0;
  for (int seed = 0; seed < trials; ++seed) first += sample_leverage(s, ids, 1, seed).selected[0] == 0 ? 1 : 0;
  CHECK(std::abs(static_cast<double>(first) / trials - 0.75) <= 0.01);
}

TEST_CASE("projection_error") {
  synth::PlantedSpec spec = flat_spec(100, 12, 4, 0.0, 2);
  const MatrixXd X = synth::gen_planted_matrix(spec).matrix.X;
  std::vector<std::size_t> all(100);
  std::iota(all.begin(), all.end(), 0);
  CHECK(projection_error(X, all) <= 1e-9 * X.norm());
  // Any 4 generic rows span the rank-4 row space.
  CHECK(projection_error(X, std::vector<std::size_t>{3, 17, 40, 91}) <= 1e-9 * X.norm());
  CHECK(projection_error(X, std::vector<std::size_t>{3, 17, 40}) > 1e-3 * X.norm());
  CHECK_THROWS_AS(projection_error(X, std::vector<std::size_t>{}), Error);
}

TEST_CASE("cx_budget") {
  CHECK(cx_budget(8, 0.5) == 267);
  CHECK(cx_budget(1, 0.5) == 1);
  CHECK(cx_budget(2, 0.9) == 7);  // ceil(8 ln 2 / 0.81) = ceil(6.846)
  CHECK_THROWS_AS(cx_budget(8, 1.0), Error);
}

TEST_CASE("top leverage beats uniform random subsets on coherent data") {
  // Rows with heavy-tailed norms give a strongly non-uniform leverage profile.
  const std::size_t N = 600, d = 20, r = 5, budget = 15;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal;
  std::lognormal_distribution<double> heavy(0.0, 1.5);
  MatrixXd L(N, r);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
    const double scale = heavy(rng);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(r); ++j) L(i, j) = scale * normal(rng);
  }
  MatrixXd X = L * orthonormal(d, r, 5).transpose();
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] += 0.05 * normal(rng);
  const MatrixXd Xc = center_columns(X).Xc;

  const auto model = svd::fit_subspace(Xc, 0.9);
  const auto ids = make_ids(N);
  const auto top = select_top(leverage_scores(model.U_k), ids, budget);
  const double top_err = projection_error(Xc, top.selected);

  std::vector<double> uniform;
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 100; ++t) {
    std::shuffle(perm.begin(), perm.end(), rng);
    uniform.push_back(projection_error(Xc, std::vector<std::size_t>(perm.begin(), perm.begin() + budget)));
  }
  std::sort(uniform.begin(), uniform.end());
  CHECK(top_err <= uniform[50]);
  CHECK(top_err <= uniform[95]);
}

TEST_CASE("run_selection recovers the planted rank") {
  const auto planted = synth::gen_planted_matrix(flat_spec(1000, 32, 9, 0.01, 7));
  SelectConfig cfg;
  const auto r = run_selection(planted.matrix, cfg);
  CHECK(r.k_used == 9);
  CHECK(r.selected.size() == 160);
  CHECK(r.energy_ratio >= 0.9);
  CHECK(r.centered);
  CHECK(std::set<std::size_t>(r.selected.begin(), r.selected.end()).size() == 160);
}

TEST_CASE("skipping centering lets a large mean dominate") {
  auto spec = flat_spec(1000, 32, 9, 0.01, 9);
  spec.mean_offset.assign(32, 50.0);  // norm ~283 >> sigma_1 = 10
  const auto planted = synth::gen_planted_matrix(spec);
  SelectConfig cfg;
  cfg.center = false;
  CHECK(run_selection(planted.matrix, cfg).k_used == 1);
  cfg.center = true;
  CHECK(run_selection(planted.matrix, cfg).k_used == 9);
}

TEST_CASE("selection is invariant to positive scaling") {
  const auto planted = synth::gen_planted_matrix(flat_spec(500, 16, 4, 0.2, 13));
  repr::ReprMatrix scaled = planted.matrix;
  scaled.X *= 2.0;
  SelectConfig cfg;
  cfg.budget = Budget::count(40);
  const auto a = run_selection(planted.matrix, cfg);
  const auto b = run_selection(scaled, cfg);
  CHECK(a.k_used == b.k_used);
  CHECK(a.selected == b.selected);
}

TEST_CASE("randomized and sampling paths are reproducible") {
  const auto planted = synth::gen_planted_matrix(flat_spec(3000, 40, 6, 0.5, 17));
  SelectConfig cfg;
  cfg.svd.method = svd::Method::Randomized;
  cfg.mode = Mode::LeverageSample;
  cfg.seed = 123;
  const auto a = run_selection(planted.matrix, cfg);
  const auto b = run_selection(planted.matrix, cfg);
  CHECK(a.selected == b.selected);
  CHECK(a.scores == b.scores);
}

TEST_CASE("budget parsing and resolution") {
  CHECK(Budget::parse("100000").count_value() == 100000);
  CHECK(Budget::parse("16%").fraction_value() == doctest::Approx(0.16));
  CHECK(Budget::parse("0.16").is_fraction());
  CHECK(Budget::parse("0.16").resolve(1000) == 160);
  CHECK(Budget::fraction(0.001).resolve(10) == 1);
  CHECK(Budget::parse("16%").to_string() == "16%");
  for (const char* bad : {"0", "-3", "abc", "", "150%", "1.5", "12x"}) {
    try {
      Budget::parse(bad);
      FAIL("expected error for " << bad);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
    }
  }
  CHECK_THROWS_AS(Budget::count(20).resolve(10), Error);
}

TEST_CASE("config round trips through JSON") {
  SelectConfig cfg;
  cfg.tau = 0.8;
  cfg.energy_threshold = 0.95;
  cfg.budget = Budget::parse("12.5%");
  cfg.mode = Mode::LeverageSample;
  cfg.epsilon = 0.25;
  cfg.seed = 77;
  cfg.center = false;
  cfg.svd.method = svd::Method::Randomized;
  cfg.svd.power_iters = 3;
  const auto j = to_json(cfg);
  const auto back = config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.budget.resolve(800) == 100);

  cfg.budget = Budget::count(33);
  CHECK(config_from_json(to_json(cfg)).budget.count_value() == 33);

  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"budget", 0}}), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"mode", "best"}}), Error);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"tau", "high"}}), Error);
}

TEST_CASE("save_selection writes ids, scores and metadata") {
  TempDir dir;
  const auto planted = synth::gen_planted_matrix(flat_spec(200, 10, 3, 0.1, 1));
  SelectConfig cfg;
  cfg.budget = Budget::count(12);
  const auto r = run_selection(planted.matrix, cfg);
  save_selection(r, planted.matrix, cfg, dir.path());

  std::ifstream ids_in(dir / "selected.ids");
  std::vector<std::string> ids;
  for (std::string line; std::getline(ids_in, line);) ids.push_back(line);
  CHECK(ids == r.selected_ids);

  std::ifstream scores_in(dir / "scores.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(scores_in, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("id") == planted.matrix.ids[lines]);
    CHECK(j.at("rank").get<std::size_t>() >= 1);
  }
  CHECK(lines == 200);

  const auto meta = nlohmann::json::parse(std::ifstream(dir / "selection.json"));
  CHECK(meta.at("k_used") == r.k_used);
  CHECK(meta.at("budget") == 12);
  CHECK(meta.at("seed").is_null());
  CHECK(config_from_json(meta.at("config")).budget.count_value() == 12);
}
