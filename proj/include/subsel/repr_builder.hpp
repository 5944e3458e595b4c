#pragma once

// Instruction-conditioned sample representations: aggregate the attention
// each visual token receives from the instruction tokens, keep the smallest
// set of most-attended tokens covering a tau fraction of that mass, and
// mean-pool their hidden states. One row per sample.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "subsel/dump_io.hpp"

namespace subsel::repr {

inline constexpr double kDefaultTau = 0.9;

/// Aggregated attention per visual token (length n_v, nonnegative).
using TokenScores = std::vector<double>;

struct ReprMatrix {
  std::vector<std::string> ids;
  Eigen::MatrixXd X;  // N x d

  std::size_t rows() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(X.cols()); }
};

struct SkippedSample {
  std::string sample_id;
  std::string reason;
};

struct RetainedTokens {
  std::size_t selected = 0;
  std::size_t n_v = 0;
  double ratio() const { return n_v == 0 ? 0.0 : static_cast<double>(selected) / n_v; }
};

struct BuildResult {
  ReprMatrix matrix;
  double tau = kDefaultTau;
  std::vector<SkippedSample> skipped;
  std::vector<RetainedTokens> retained;  // aligned with matrix rows

  double mean_retained_ratio() const;
};

/// Column sums of the n_u x n_v attention block, accumulated in double.
TokenScores aggregate_attention(std::span<const float> attn, std::size_t n_u, std::size_t n_v);
TokenScores aggregate_attention(const dump::SampleDump& rec);

/// Smallest prefix of tokens ranked by descending score (ties: lower index
/// first) whose mass reaches tau of the total. Indices are 0-based and
/// returned in rank order. With tau == 1 exactly the positive-score tokens
/// are returned.
std::vector<std::size_t> select_token_set(std::span<const double> alpha, double tau);

/// Mean of the selected tokens' hidden rows, summed in the order given.
std::vector<double> pool_representation(const dump::SampleDump& rec,
                                        std::span<const std::size_t> selected);

/// Representation of one record; throws for samples with no usable
/// attention signal (no instruction tokens, or all-zero attention).
std::vector<double> represent(const dump::SampleDump& rec, double tau,
                              std::size_t* retained = nullptr);

/// Streams a dump and stacks one representation per record, in dump order.
/// Samples without an attention signal are skipped and listed. Rows are
/// computed in parallel but written by index, so the result does not depend
/// on `workers`.
BuildResult build_matrix(const std::filesystem::path& dump_dir, double tau = kDefaultTau,
                         unsigned workers = 1);

/// Persists a build as repr.json (header), repr.f64 (row-major little-endian
/// doubles) and repr.ids (one id per line).
void save_repr(const BuildResult& build, const std::filesystem::path& dir);
BuildResult load_repr(const std::filesystem::path& dir);

}  // namespace subsel::repr
