#pragma once

// Subspace-aware selection: center the representation matrix, fit the
// energy-thresholded dominant subspace, score each sample by its leverage
// (squared row norm of the top-k left singular vectors) and keep a budget of
// samples, either the top scorers or a leverage-weighted random draw.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "subsel/repr_builder.hpp"
#include "subsel/svd_engine.hpp"

namespace subsel::select {

enum class Mode { TopLeverage, LeverageSample };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

/// Either an absolute sample count or a fraction of N.
class Budget {
 public:
  static Budget count(std::size_t n);
  static Budget fraction(double f);
  /// Accepts "100000", "16%" or a decimal fraction such as "0.16".
  static Budget parse(std::string_view text);

  bool is_fraction() const { return is_fraction_; }
  std::size_t count_value() const { return count_; }
  double fraction_value() const { return fraction_; }

  /// Number of samples for a matrix of n rows; throws if it falls outside [1, n].
  std::size_t resolve(std::size_t n) const;
  std::string to_string() const;

 private:
  bool is_fraction_ = false;
  std::size_t count_ = 1;
  double fraction_ = 0.0;
};

struct SelectConfig {
  double tau = repr::kDefaultTau;
  double energy_threshold = svd::kDefaultEnergyThreshold;
  Budget budget = Budget::fraction(0.16);
  Mode mode = Mode::TopLeverage;
  double epsilon = 0.5;  // accuracy parameter of the sampling reference bound
  std::uint64_t seed = 0;
  bool center = true;
  svd::SvdConfig svd;
};

/// Throws a config error for any out-of-range field.
void validate(const SelectConfig& cfg);

nlohmann::json to_json(const SelectConfig& cfg);
SelectConfig config_from_json(const nlohmann::json& j);

struct Centered {
  Eigen::MatrixXd Xc;
  Eigen::VectorXd means;
};

Centered center_columns(const Eigen::MatrixXd& X);

/// Row-wise squared norms of U_k. Rejects inputs whose columns are not
/// orthonormal to `tolerance` (max-abs entry of U^T U - I).
Eigen::VectorXd leverage_scores(const Eigen::MatrixXd& U_k, double tolerance = 1e-8);

struct SelectionResult {
  Mode mode = Mode::TopLeverage;
  Eigen::VectorXd scores;              // aligned with the matrix rows
  std::vector<std::size_t> ranking;    // row indices by descending score
  std::vector<std::size_t> selected;   // row indices, in selection order
  std::vector<std::string> selected_ids;
  std::size_t k_used = 0;
  double energy_ratio = 0.0;
  std::optional<std::uint64_t> seed;   // sampling mode only
  std::size_t zero_filled = 0;         // sampling mode: picks taken from the zero-score pool
  bool centered = true;
  Eigen::VectorXd column_means;
  Eigen::VectorXd singular_values;
};

/// Descending-score order, ties broken by ascending row index.
std::vector<std::size_t> rank_scores(const Eigen::VectorXd& scores);

SelectionResult select_top(const Eigen::VectorXd& scores, std::span<const std::string> ids,
                           std::size_t budget);

/// Draws `budget` distinct rows one at a time with probability proportional
/// to score, renormalizing over the remaining rows after each draw. If fewer
/// than `budget` rows have positive score the rest are filled from the
/// zero-score rows by ascending index and counted in `zero_filled`.
SelectionResult sample_leverage(const Eigen::VectorXd& scores, std::span<const std::string> ids,
                                std::size_t budget, std::uint64_t seed);

/// ||Xc - P Xc||_F with P the orthogonal projector onto the row space of the
/// selected rows (numerical rank cut at 1e-10 * sigma_max).
double projection_error(const Eigen::MatrixXd& Xc, std::span<const std::size_t> rows);

/// Sample count for the leverage-sampling reference bound, ceil(4 k ln k / eps^2),
/// never less than k.
std::size_t cx_budget(std::size_t k, double epsilon);

SelectionResult run_selection(const repr::ReprMatrix& X, const SelectConfig& cfg);

/// Writes selected.ids, scores.jsonl and selection.json under `dir`.
void save_selection(const SelectionResult& result, const repr::ReprMatrix& X,
                    const SelectConfig& cfg, const std::filesystem::path& dir);

}  // namespace subsel::select
