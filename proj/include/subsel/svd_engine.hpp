#pragma once

// Truncated SVD for the selection stage: an exact dense decomposition kept
// as the reference, a seeded randomized range-finder SVD for large inputs,
// and the cumulative-energy rule that picks the subspace rank.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>

#include <Eigen/Dense>

namespace subsel::svd {

inline constexpr double kDefaultEnergyThreshold = 0.9;
/// Largest N*d the dense path accepts.
inline constexpr std::size_t kDenseGuard = 100'000'000;

struct DenseSvd {
  Eigen::VectorXd singular_values;  // all min(N, d), nonincreasing
  Eigen::MatrixXd U;                // N x min(N, d)
  Eigen::MatrixXd V;                // d x min(N, d); empty unless requested
};

DenseSvd dense_svd(const Eigen::MatrixXd& A, bool with_v = false);

struct TruncatedSvd {
  Eigen::VectorXd singular_values;  // length target_rank
  Eigen::MatrixXd U;                // N x target_rank
};

/// Randomized range finder with subspace (power) iterations: sketch with a
/// seeded Gaussian test matrix of target_rank + oversampling columns,
/// re-orthonormalize after every pass, and solve the small projected problem
/// exactly. Bitwise reproducible for a fixed seed.
TruncatedSvd randomized_svd(const Eigen::MatrixXd& A, std::size_t target_rank,
                            std::size_t oversampling = 10, std::size_t power_iters = 2,
                            std::uint64_t seed = 0);

/// Minimal k with sum_{j<k} sigma_j^2 >= threshold * sum_j sigma_j^2.
std::size_t energy_rank(std::span<const double> singular_values, double threshold);

/// Same rule against an externally known total energy (for example the
/// squared Frobenius norm) when only the leading values are available.
/// Returns nullopt if the given values do not reach the threshold.
std::optional<std::size_t> energy_rank(std::span<const double> singular_values, double threshold,
                                       double total_energy);

enum class Method { Auto, Dense, Randomized };

struct SvdConfig {
  Method method = Method::Auto;
  std::size_t oversampling = 10;
  std::size_t power_iters = 2;
  std::size_t initial_rank = 16;
  std::uint64_t seed = 0;
  /// Auto picks the dense path up to this many entries.
  std::size_t auto_dense_limit = 1u << 20;
};

struct SubspaceModel {
  std::size_t k = 0;
  Eigen::VectorXd singular_values;  // every value computed, length >= k
  Eigen::MatrixXd U_k;              // N x k, orthonormal columns
  double energy_ratio = 0.0;        // captured by the first k components
  double energy_threshold = kDefaultEnergyThreshold;
  double total_energy = 0.0;
  bool full_spectrum = false;
  Method method_used = Method::Dense;
};

/// Energy-thresholded truncated SVD. The randomized path takes the total
/// energy from the Frobenius norm and doubles its target rank (starting at
/// initial_rank) until the threshold is met inside the trusted components or
/// the sketch covers min(N, d).
SubspaceModel fit_subspace(const Eigen::MatrixXd& A, double energy_threshold,
                           const SvdConfig& cfg = {});

}  // namespace subsel::svd
