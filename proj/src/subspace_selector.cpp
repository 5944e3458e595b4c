#include "subsel/subspace_selector.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "subsel/error.hpp"
#include "subsel/file_util.hpp"

namespace subsel::select {

namespace fs = std::filesystem;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

std::string_view to_string(Mode mode) {
  return mode == Mode::TopLeverage ? "top-leverage" : "leverage-sample";
}

Mode parse_mode(std::string_view text) {
  if (text == "top-leverage" || text == "top") return Mode::TopLeverage;
  if (text == "leverage-sample" || text == "sample") return Mode::LeverageSample;
  fail(ErrorKind::Config, "unknown selection mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Budget

Budget Budget::count(std::size_t n) {
  if (n < 1) fail(ErrorKind::Config, "budget must be >= 1");
  Budget b;
  b.count_ = n;
  return b;
}

Budget Budget::fraction(double f) {
  if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::Config, "budget fraction must lie in (0, 1]");
  Budget b;
  b.is_fraction_ = true;
  b.fraction_ = f;
  return b;
}

Budget Budget::parse(std::string_view text) {
  auto bad = [&]() -> Budget { fail(ErrorKind::Config, "invalid budget '" + std::string(text) + "'"); };
  if (text.empty()) return bad();
  if (text.back() == '%') {
    double pct = 0.0;
    const auto body = text.substr(0, text.size() - 1);
    auto [p, ec] = std::from_chars(body.data(), body.data() + body.size(), pct);
    if (ec != std::errc{} || p != body.data() + body.size()) return bad();
    return fraction(pct / 100.0);
  }
  if (text.find_first_of(".eE") != std::string_view::npos) {
    double f = 0.0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), f);
    if (ec != std::errc{} || p != text.data() + text.size()) return bad();
    return fraction(f);
  }
  long long n = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
  if (ec != std::errc{} || p != text.data() + text.size() || n < 1) return bad();
  return count(static_cast<std::size_t>(n));
}

std::size_t Budget::resolve(std::size_t n) const {
  std::size_t b = count_;
  if (is_fraction_) b = static_cast<std::size_t>(std::max(1.0, std::round(fraction_ * static_cast<double>(n))));
  if (b < 1 || b > n) {
    fail(ErrorKind::Config, "budget " + std::to_string(b) + " outside [1, " + std::to_string(n) + "]");
  }
  return b;
}

std::string Budget::to_string() const {
  if (!is_fraction_) return std::to_string(count_);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.15g%%", fraction_ * 100.0);
  return buf;
}

// ---------------------------------------------------------------------------
// Config

void validate(const SelectConfig& cfg) {
  if (!(cfg.tau > 0.0 && cfg.tau <= 1.0)) fail(ErrorKind::Config, "tau must lie in (0, 1]");
  if (!(cfg.energy_threshold > 0.0 && cfg.energy_threshold <= 1.0)) {
    fail(ErrorKind::Config, "energy_threshold must lie in (0, 1]");
  }
  if (!(cfg.epsilon > 0.0 && cfg.epsilon < 1.0)) fail(ErrorKind::Config, "epsilon must lie in (0, 1)");
  if (cfg.svd.initial_rank < 1) fail(ErrorKind::Config, "initial_rank must be >= 1");
}

namespace {

std::string_view method_name(svd::Method m) {
  switch (m) {
    case svd::Method::Auto: return "auto";
    case svd::Method::Dense: return "dense";
    case svd::Method::Randomized: return "randomized";
  }
  return "auto";
}

svd::Method parse_method(const std::string& s) {
  if (s == "auto") return svd::Method::Auto;
  if (s == "dense") return svd::Method::Dense;
  if (s == "randomized") return svd::Method::Randomized;
  fail(ErrorKind::Config, "unknown svd method '" + s + "'");
}

}  // namespace

json to_json(const SelectConfig& cfg) {
  json budget = cfg.budget.is_fraction() ? json(cfg.budget.to_string()) : json(cfg.budget.count_value());
  return {{"tau", cfg.tau},
          {"energy_threshold", cfg.energy_threshold},
          {"budget", budget},
          {"mode", std::string(to_string(cfg.mode))},
          {"epsilon", cfg.epsilon},
          {"seed", cfg.seed},
          {"center", cfg.center},
          {"svd",
           {{"method", std::string(method_name(cfg.svd.method))},
            {"oversampling", cfg.svd.oversampling},
            {"power_iters", cfg.svd.power_iters},
            {"initial_rank", cfg.svd.initial_rank},
            {"auto_dense_limit", cfg.svd.auto_dense_limit}}}};
}

SelectConfig config_from_json(const json& j) {
  SelectConfig cfg;
  try {
    cfg.tau = j.value("tau", cfg.tau);
    cfg.energy_threshold = j.value("energy_threshold", cfg.energy_threshold);
    if (j.contains("budget")) {
      const auto& b = j.at("budget");
      if (b.is_number_integer() || b.is_number_unsigned()) {
        const auto n = b.get<long long>();
        if (n < 1) fail(ErrorKind::Config, "budget must be >= 1");
        cfg.budget = Budget::count(static_cast<std::size_t>(n));
      } else if (b.is_string()) {
        cfg.budget = Budget::parse(b.get<std::string>());
      } else {
        fail(ErrorKind::Config, "budget must be an integer or a string such as \"16%\"");
      }
    }
    if (j.contains("mode")) cfg.mode = parse_mode(j.at("mode").get<std::string>());
    cfg.epsilon = j.value("epsilon", cfg.epsilon);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.center = j.value("center", cfg.center);
    if (j.contains("svd")) {
      const auto& s = j.at("svd");
      if (s.contains("method")) cfg.svd.method = parse_method(s.at("method").get<std::string>());
      cfg.svd.oversampling = s.value("oversampling", cfg.svd.oversampling);
      cfg.svd.power_iters = s.value("power_iters", cfg.svd.power_iters);
      cfg.svd.initial_rank = s.value("initial_rank", cfg.svd.initial_rank);
      cfg.svd.auto_dense_limit = s.value("auto_dense_limit", cfg.svd.auto_dense_limit);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("invalid config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Core operations

Centered center_columns(const MatrixXd& X) {
  if (X.rows() < 2) fail(ErrorKind::TooFewSamples, "centering needs at least 2 samples");
  Centered out;
  out.means = X.colwise().mean().transpose();
  out.Xc = X.rowwise() - out.means.transpose();
  return out;
}

VectorXd leverage_scores(const MatrixXd& U_k, double tolerance) {
  const Index k = U_k.cols();
  if (k > 0) {
    const MatrixXd gram = U_k.transpose() * U_k;
    const double dev = (gram - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff();
    if (!(dev <= tolerance)) {
      fail(ErrorKind::Validation, "U_k columns are not orthonormal (deviation " + std::to_string(dev) + ")");
    }
  }
  return U_k.rowwise().squaredNorm();
}

std::vector<std::size_t> rank_scores(const VectorXd& scores) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[static_cast<Index>(a)] > scores[static_cast<Index>(b)];
  });
  return order;
}

namespace {

void check_scores(const VectorXd& scores, std::span<const std::string> ids, std::size_t budget) {
  if (static_cast<std::size_t>(scores.size()) != ids.size()) {
    fail(ErrorKind::Precondition, "scores and ids differ in length");
  }
  if (!scores.allFinite() || (scores.size() > 0 && scores.minCoeff() < 0.0)) {
    fail(ErrorKind::Validation, "scores must be finite and nonnegative");
  }
  if (budget < 1 || budget > ids.size()) {
    fail(ErrorKind::Config, "budget " + std::to_string(budget) + " outside [1, " +
                                std::to_string(ids.size()) + "]");
  }
}

// Fenwick tree over the remaining weights for O(log N) weighted draws.
class WeightTree {
 public:
  explicit WeightTree(const VectorXd& w) : n_(static_cast<std::size_t>(w.size())), tree_(n_ + 1, 0.0) {
    for (std::size_t i = 0; i < n_; ++i) {
      tree_[i + 1] += w[static_cast<Index>(i)];
      const std::size_t parent = (i + 1) + ((i + 1) & (~(i + 1) + 1));
      if (parent <= n_) tree_[parent] += tree_[i + 1];
    }
    top_ = 1;
    while (top_ * 2 <= n_) top_ *= 2;
  }

  void add(std::size_t i, double delta) {
    for (std::size_t p = i + 1; p <= n_; p += p & (~p + 1)) tree_[p] += delta;
  }

  double total() const {
    double s = 0.0;
    for (std::size_t p = n_; p > 0; p -= p & (~p + 1)) s += tree_[p];
    return s;
  }

  // Smallest index whose inclusive prefix sum exceeds u.
  std::size_t find(double u) const {
    std::size_t pos = 0;
    for (std::size_t step = top_; step > 0; step >>= 1) {
      if (pos + step <= n_ && tree_[pos + step] <= u) {
        pos += step;
        u -= tree_[pos];
      }
    }
    return pos;
  }

 private:
  std::size_t n_;
  std::vector<double> tree_;
  std::size_t top_ = 1;
};

void attach_ids(SelectionResult& r, std::span<const std::string> ids) {
  r.selected_ids.clear();
  r.selected_ids.reserve(r.selected.size());
  for (std::size_t i : r.selected) r.selected_ids.push_back(ids[i]);
}

}  // namespace

SelectionResult select_top(const VectorXd& scores, std::span<const std::string> ids, std::size_t budget) {
  check_scores(scores, ids, budget);
  SelectionResult r;
  r.mode = Mode::TopLeverage;
  r.scores = scores;
  r.ranking = rank_scores(scores);
  r.selected.assign(r.ranking.begin(), r.ranking.begin() + static_cast<std::ptrdiff_t>(budget));
  attach_ids(r, ids);
  return r;
}

SelectionResult sample_leverage(const VectorXd& scores, std::span<const std::string> ids,
                                std::size_t budget, std::uint64_t seed) {
  check_scores(scores, ids, budget);
  const std::size_t n = ids.size();
  std::size_t positive = 0;
  for (Index i = 0; i < scores.size(); ++i) positive += scores[i] > 0.0 ? 1 : 0;
  if (positive == 0) fail(ErrorKind::Validation, "all scores are zero; nothing to sample from");

  SelectionResult r;
  r.mode = Mode::LeverageSample;
  r.scores = scores;
  r.ranking = rank_scores(scores);
  r.seed = seed;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  WeightTree tree(scores);
  std::vector<char> taken(n, 0);
  const std::size_t draws = std::min(budget, positive);
  for (std::size_t t = 0; t < draws; ++t) {
    std::size_t pick = n;
    // Residual rounding in the tree can, very rarely, point at a row that is
    // already gone; redraw a few times before falling back to a scan.
    for (int attempt = 0; attempt < 32 && pick == n; ++attempt) {
      const std::size_t idx = tree.find(unit(rng) * tree.total());
      if (idx < n && !taken[idx] && scores[static_cast<Index>(idx)] > 0.0) pick = idx;
    }
    if (pick == n) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && scores[static_cast<Index>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    taken[pick] = 1;
    tree.add(pick, -scores[static_cast<Index>(pick)]);
    r.selected.push_back(pick);
  }
  for (std::size_t i = 0; i < n && r.selected.size() < budget; ++i) {
    if (!taken[i]) {
      taken[i] = 1;
      r.selected.push_back(i);
      ++r.zero_filled;
    }
  }
  attach_ids(r, ids);
  return r;
}

double projection_error(const MatrixXd& Xc, std::span<const std::size_t> rows) {
  if (rows.empty()) fail(ErrorKind::Precondition, "subset must be nonempty");
  MatrixXd sub(static_cast<Index>(rows.size()), Xc.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(Xc.rows())) fail(ErrorKind::Precondition, "row index out of range");
    sub.row(static_cast<Index>(i)) = Xc.row(static_cast<Index>(rows[i]));
  }
  Eigen::BDCSVD<MatrixXd> svd(sub, Eigen::ComputeThinV);
  const VectorXd& sigma = svd.singularValues();
  if (sigma.size() == 0 || sigma[0] <= 0.0) return Xc.norm();
  const double cutoff = 1e-10 * sigma[0];
  Index r = 0;
  while (r < sigma.size() && sigma[r] > cutoff) ++r;
  const MatrixXd basis = svd.matrixV().leftCols(r);  // d x r, orthonormal row-space basis
  return (Xc - (Xc * basis) * basis.transpose()).norm();
}

std::size_t cx_budget(std::size_t k, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) fail(ErrorKind::Config, "epsilon must lie in (0, 1)");
  const double kd = static_cast<double>(k);
  const double c = std::ceil(4.0 * kd * std::log(kd) / (epsilon * epsilon));
  return std::max(k, static_cast<std::size_t>(std::max(0.0, c)));
}

SelectionResult run_selection(const repr::ReprMatrix& X, const SelectConfig& cfg) {
  validate(cfg);
  const std::size_t n = X.rows();
  if (X.ids.size() != n) fail(ErrorKind::Precondition, "ids and matrix rows differ in length");
  if (n == 0 || X.cols() == 0) fail(ErrorKind::Precondition, "empty representation matrix");
  const std::size_t budget = cfg.budget.resolve(n);

  Centered centered;
  if (cfg.center) {
    centered = center_columns(X.X);
  } else {
    centered.Xc = X.X;
    centered.means = VectorXd::Zero(X.X.cols());
  }

  svd::SvdConfig svd_cfg = cfg.svd;
  svd_cfg.seed = cfg.seed;
  const svd::SubspaceModel model = svd::fit_subspace(centered.Xc, cfg.energy_threshold, svd_cfg);
  const VectorXd scores = leverage_scores(model.U_k);

  SelectionResult r = cfg.mode == Mode::TopLeverage ? select_top(scores, X.ids, budget)
                                                    : sample_leverage(scores, X.ids, budget, cfg.seed);
  r.k_used = model.k;
  r.energy_ratio = model.energy_ratio;
  r.centered = cfg.center;
  r.column_means = std::move(centered.means);
  r.singular_values = model.singular_values;
  return r;
}

void save_selection(const SelectionResult& r, const repr::ReprMatrix& X, const SelectConfig& cfg,
                    const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());

  write_file_atomic(dir / "selected.ids", [&](std::ostream& out) {
    for (const auto& id : r.selected_ids) out << id << '\n';
  });

  std::vector<std::size_t> rank_of(r.ranking.size());
  for (std::size_t pos = 0; pos < r.ranking.size(); ++pos) rank_of[r.ranking[pos]] = pos + 1;
  write_file_atomic(dir / "scores.jsonl", [&](std::ostream& out) {
    for (std::size_t i = 0; i < X.ids.size(); ++i) {
      json line = {{"id", X.ids[i]}, {"score", r.scores[static_cast<Index>(i)]}, {"rank", rank_of[i]}};
      out << line.dump() << '\n';
    }
  });

  json meta = {{"mode", std::string(to_string(r.mode))},
               {"N", X.rows()},
               {"d", X.cols()},
               {"budget", r.selected.size()},
               {"k_used", r.k_used},
               {"energy_ratio", r.energy_ratio},
               {"seed", r.seed ? json(*r.seed) : json(nullptr)},
               {"zero_filled", r.zero_filled},
               {"centered", r.centered},
               {"column_means", std::vector<double>(r.column_means.data(), r.column_means.data() + r.column_means.size())},
               {"singular_values", std::vector<double>(r.singular_values.data(), r.singular_values.data() + r.singular_values.size())},
               {"config", to_json(cfg)}};
  write_text_atomic(dir / "selection.json", meta.dump(2) + "\n");
}

}  // namespace subsel::select
