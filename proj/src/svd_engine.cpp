#include "subsel/svd_engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "subsel/error.hpp"

namespace subsel::svd {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

void require_finite(const MatrixXd& A) {
  if (!A.allFinite()) fail(ErrorKind::Validation, "matrix contains non-finite values");
}

MatrixXd thin_q(const MatrixXd& Y) {
  Eigen::HouseholderQR<MatrixXd> qr(Y);
  return qr.householderQ() * MatrixXd::Identity(Y.rows(), Y.cols());
}

MatrixXd gaussian(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd out(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) out(r, c) = normal(rng);
  }
  return out;
}

// All `width` Ritz values/vectors of the sketch; no precondition on width
// beyond width <= min(N, d).
TruncatedSvd sketch_svd(const MatrixXd& A, Index width, std::size_t power_iters,
                        std::uint64_t seed) {
  const MatrixXd omega = gaussian(A.cols(), width, seed);
  MatrixXd Q = thin_q(A * omega);
  for (std::size_t it = 0; it < power_iters; ++it) {
    const MatrixXd Z = thin_q(A.transpose() * Q);
    Q = thin_q(A * Z);
  }
  const MatrixXd B = Q.transpose() * A;  // width x d
  Eigen::JacobiSVD<MatrixXd> small(B, Eigen::ComputeThinU);
  TruncatedSvd out;
  out.singular_values = small.singularValues();
  out.U = Q * small.matrixU();
  return out;
}

double prefix_energy(const VectorXd& sigma, Index k) {
  double e = 0.0;
  for (Index j = 0; j < k; ++j) e += sigma[j] * sigma[j];
  return e;
}

}  // namespace

DenseSvd dense_svd(const MatrixXd& A, bool with_v) {
  if (static_cast<std::size_t>(A.rows()) * static_cast<std::size_t>(A.cols()) > kDenseGuard) {
    fail(ErrorKind::Size, "matrix of " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()) +
                              " exceeds the dense SVD guard; use the randomized path");
  }
  if (A.rows() == 0 || A.cols() == 0) fail(ErrorKind::Precondition, "empty matrix");
  require_finite(A);
  const unsigned opts = Eigen::ComputeThinU | (with_v ? Eigen::ComputeThinV : 0u);
  Eigen::BDCSVD<MatrixXd> solver(A, opts);
  DenseSvd out;
  out.singular_values = solver.singularValues();
  out.U = solver.matrixU();
  if (with_v) out.V = solver.matrixV();
  return out;
}

TruncatedSvd randomized_svd(const MatrixXd& A, std::size_t target_rank, std::size_t oversampling,
                            std::size_t power_iters, std::uint64_t seed) {
  const auto min_dim = static_cast<std::size_t>(std::min(A.rows(), A.cols()));
  if (target_rank < 1) fail(ErrorKind::Config, "target_rank must be >= 1");
  if (target_rank + oversampling > min_dim) {
    fail(ErrorKind::Config, "target_rank + oversampling (" + std::to_string(target_rank + oversampling) +
                                ") exceeds min(N, d) = " + std::to_string(min_dim));
  }
  require_finite(A);
  TruncatedSvd full = sketch_svd(A, static_cast<Index>(target_rank + oversampling), power_iters, seed);
  full.singular_values.conservativeResize(static_cast<Index>(target_rank));
  full.U.conservativeResize(Eigen::NoChange, static_cast<Index>(target_rank));
  return full;
}

std::optional<std::size_t> energy_rank(std::span<const double> singular_values, double threshold,
                                       double total_energy) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    fail(ErrorKind::Config, "energy threshold must lie in (0, 1]");
  }
  if (singular_values.empty()) fail(ErrorKind::Precondition, "empty spectrum");
  if (!(total_energy > 0.0)) fail(ErrorKind::DegenerateSpectrum, "spectrum has zero energy");
  const double target = threshold * total_energy;
  double cumulative = 0.0;
  for (std::size_t j = 0; j < singular_values.size(); ++j) {
    cumulative += singular_values[j] * singular_values[j];
    if (cumulative >= target) return j + 1;
  }
  return std::nullopt;
}

std::size_t energy_rank(std::span<const double> singular_values, double threshold) {
  if (singular_values.empty()) fail(ErrorKind::Precondition, "empty spectrum");
  double total = 0.0;
  for (std::size_t j = 0; j < singular_values.size(); ++j) {
    const double s = singular_values[j];
    if (!std::isfinite(s) || s < 0.0) fail(ErrorKind::Validation, "singular values must be finite and >= 0");
    if (j > 0 && s > singular_values[j - 1]) fail(ErrorKind::Validation, "singular values must be nonincreasing");
    total += s * s;
  }
  // Same summation order as the scan, so threshold 1 is reached exactly.
  return *energy_rank(singular_values, threshold, total);
}

SubspaceModel fit_subspace(const MatrixXd& A, double energy_threshold, const SvdConfig& cfg) {
  if (!(energy_threshold > 0.0 && energy_threshold <= 1.0)) {
    fail(ErrorKind::Config, "energy threshold must lie in (0, 1]");
  }
  if (A.rows() == 0 || A.cols() == 0) fail(ErrorKind::Precondition, "empty matrix");
  require_finite(A);

  const std::size_t entries = static_cast<std::size_t>(A.rows()) * static_cast<std::size_t>(A.cols());
  Method method = cfg.method;
  if (method == Method::Auto) method = entries <= cfg.auto_dense_limit ? Method::Dense : Method::Randomized;

  SubspaceModel model;
  model.energy_threshold = energy_threshold;
  model.method_used = method;

  auto finish = [&](const VectorXd& sigma, const MatrixXd& U, std::size_t k, double total) {
    model.k = k;
    model.singular_values = sigma;
    model.U_k = U.leftCols(static_cast<Index>(k));
    model.total_energy = total;
    model.energy_ratio = prefix_energy(sigma, static_cast<Index>(k)) / total;
  };

  if (method == Method::Dense) {
    const DenseSvd full = dense_svd(A);
    const VectorXd& sigma = full.singular_values;
    const std::size_t k = energy_rank(std::span<const double>(sigma.data(), sigma.size()), energy_threshold);
    model.full_spectrum = true;
    finish(sigma, full.U, k, prefix_energy(sigma, sigma.size()));
    return model;
  }

  const auto min_dim = static_cast<std::size_t>(std::min(A.rows(), A.cols()));
  const double frobenius_energy = A.squaredNorm();
  if (!(frobenius_energy > 0.0)) fail(ErrorKind::DegenerateSpectrum, "matrix is identically zero");

  std::size_t rank = std::max<std::size_t>(1, cfg.initial_rank);
  while (true) {
    const std::size_t width = std::min(rank + cfg.oversampling, min_dim);
    const bool complete = width == min_dim;
    const TruncatedSvd sketch = sketch_svd(A, static_cast<Index>(width), cfg.power_iters, cfg.seed);
    const VectorXd& sigma = sketch.singular_values;
    // Oversampled components are not accurate enough to trust unless the
    // sketch spans the whole space.
    const std::size_t trusted = complete ? width : std::min(rank, width);
    const std::span<const double> head(sigma.data(), trusted);
    if (complete) {
      const std::size_t k = energy_rank(head, energy_threshold);
      model.full_spectrum = true;
      finish(sigma, sketch.U, k, prefix_energy(sigma, static_cast<Index>(trusted)));
      return model;
    }
    if (auto k = energy_rank(head, energy_threshold, frobenius_energy)) {
      finish(sigma.head(static_cast<Index>(trusted)), sketch.U, *k, frobenius_energy);
      return model;
    }
    rank *= 2;
  }
}

}  // namespace subsel::svd
