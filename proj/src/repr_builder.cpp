#include "subsel/repr_builder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "subsel/error.hpp"
#include "subsel/file_util.hpp"
#include "subsel/parallel.hpp"

namespace subsel::repr {

namespace fs = std::filesystem;
using nlohmann::json;

double BuildResult::mean_retained_ratio() const {
  if (retained.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : retained) sum += r.ratio();
  return sum / static_cast<double>(retained.size());
}

TokenScores aggregate_attention(std::span<const float> attn, std::size_t n_u, std::size_t n_v) {
  if (n_u == 0) fail(ErrorKind::NoInstructionTokens, "sample has no instruction tokens");
  if (attn.size() != n_u * n_v) fail(ErrorKind::Precondition, "attention block has wrong size");
  TokenScores alpha(n_v, 0.0);
  for (std::size_t r = 0; r < n_u; ++r) {
    const float* row = attn.data() + r * n_v;
    for (std::size_t c = 0; c < n_v; ++c) alpha[c] += static_cast<double>(row[c]);
  }
  return alpha;
}

TokenScores aggregate_attention(const dump::SampleDump& rec) {
  if (rec.n_u == 0) {
    fail(ErrorKind::NoInstructionTokens, "sample '" + rec.sample_id + "' has no instruction tokens");
  }
  return aggregate_attention(rec.attn, rec.n_u, rec.n_v);
}

std::vector<std::size_t> select_token_set(std::span<const double> alpha, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) fail(ErrorKind::Config, "tau must lie in (0, 1]");
  for (double a : alpha) {
    if (!std::isfinite(a) || a < 0.0) {
      fail(ErrorKind::Validation, "attention scores must be finite and nonnegative");
    }
  }

  std::vector<std::size_t> order(alpha.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return alpha[a] > alpha[b]; });

  // Summed in rank order so the full positive prefix reproduces `total` exactly.
  double total = 0.0;
  std::size_t positive = 0;
  for (std::size_t j : order) {
    total += alpha[j];
    if (alpha[j] > 0.0) ++positive;
  }
  if (!(total > 0.0)) fail(ErrorKind::DegenerateAttention, "all attention scores are zero");

  std::size_t keep = positive;
  if (tau < 1.0) {
    const double target = tau * total;
    double cumulative = 0.0;
    for (std::size_t i = 0; i < positive; ++i) {
      cumulative += alpha[order[i]];
      if (cumulative >= target) {
        keep = i + 1;
        break;
      }
    }
  }
  order.resize(keep);
  return order;
}

std::vector<double> pool_representation(const dump::SampleDump& rec,
                                        std::span<const std::size_t> selected) {
  if (selected.empty()) fail(ErrorKind::Precondition, "cannot pool an empty token set");
  std::vector<double> out(rec.d, 0.0);
  for (std::size_t j : selected) {
    if (j >= rec.n_v) fail(ErrorKind::Precondition, "selected token index out of range");
    const auto row = rec.hidden_row(j);
    for (std::size_t c = 0; c < rec.d; ++c) out[c] += static_cast<double>(row[c]);
  }
  const double inv = static_cast<double>(selected.size());
  for (double& v : out) v /= inv;
  return out;
}

std::vector<double> represent(const dump::SampleDump& rec, double tau, std::size_t* retained) {
  const TokenScores alpha = aggregate_attention(rec);
  const auto selected = select_token_set(alpha, tau);
  if (retained) *retained = selected.size();
  return pool_representation(rec, selected);
}

BuildResult build_matrix(const fs::path& dump_dir, double tau, unsigned workers) {
  if (!(tau > 0.0 && tau <= 1.0)) fail(ErrorKind::Config, "tau must lie in (0, 1]");
  dump::DumpReader reader(dump_dir);
  const std::size_t d = reader.manifest().hidden_dim;

  struct Slot {
    std::vector<double> row;
    std::size_t retained = 0;
    std::string skip_reason;
  };

  BuildResult result;
  result.tau = tau;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> ids;
  rows.reserve(reader.manifest().num_samples);

  constexpr std::size_t kBatch = 512;
  std::vector<dump::SampleDump> batch(kBatch);
  std::vector<Slot> slots(kBatch);
  bool more = true;
  while (more) {
    std::size_t n = 0;
    while (n < kBatch && (more = reader.next(batch[n]))) ++n;
    parallel_for(n, workers, [&](std::size_t i) {
      Slot& slot = slots[i];
      slot.row.clear();
      slot.skip_reason.clear();
      try {
        slot.row = represent(batch[i], tau, &slot.retained);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateAttention && e.kind() != ErrorKind::NoInstructionTokens) {
          throw;
        }
        slot.skip_reason = std::string(to_string(e.kind()));
      }
    });
    for (std::size_t i = 0; i < n; ++i) {
      if (!slots[i].skip_reason.empty()) {
        result.skipped.push_back({batch[i].sample_id, slots[i].skip_reason});
        continue;
      }
      ids.push_back(batch[i].sample_id);
      rows.push_back(std::move(slots[i].row));
      result.retained.push_back({slots[i].retained, batch[i].n_v});
    }
  }

  if (rows.empty()) fail(ErrorKind::Validation, "no usable samples in " + dump_dir.string());
  result.matrix.ids = std::move(ids);
  result.matrix.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      result.matrix.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr const char* kHeaderName = "repr.json";
constexpr const char* kPayloadName = "repr.f64";
constexpr const char* kIdsName = "repr.ids";

}  // namespace

void save_repr(const BuildResult& build, const fs::path& dir) {
  const auto& m = build.matrix;
  for (const auto& id : m.ids) {
    if (id.find_first_of("\r\n") != std::string::npos) {
      fail(ErrorKind::Validation, "sample_id contains a line break and cannot be saved: " + id);
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());

  write_file_atomic(dir / kPayloadName, [&](std::ostream& out) {
    for (Eigen::Index i = 0; i < m.X.rows(); ++i) {
      for (Eigen::Index c = 0; c < m.X.cols(); ++c) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(m.X(i, c));
        char b[8];
        for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((bits >> (8 * k)) & 0xFFu);
        out.write(b, 8);
      }
    }
  }, /*binary=*/true);

  write_file_atomic(dir / kIdsName, [&](std::ostream& out) {
    for (const auto& id : m.ids) out << id << '\n';
  });

  json skipped = json::array();
  for (const auto& s : build.skipped) skipped.push_back({{"id", s.sample_id}, {"reason", s.reason}});
  json header = {{"N", m.rows()},         {"d", m.cols()},
                 {"tau", build.tau},      {"skipped", skipped},
                 {"payload", kPayloadName}, {"ids", kIdsName},
                 {"layout", "f64-le-row-major"}};
  write_text_atomic(dir / kHeaderName, header.dump(2) + "\n");
}

BuildResult load_repr(const fs::path& dir) {
  std::ifstream hin(dir / kHeaderName);
  if (!hin) fail(ErrorKind::Io, "cannot open " + (dir / kHeaderName).string());
  BuildResult build;
  std::size_t n = 0, d = 0;
  try {
    const json header = json::parse(hin);
    n = header.at("N").get<std::size_t>();
    d = header.at("d").get<std::size_t>();
    build.tau = header.at("tau").get<double>();
    for (const auto& s : header.at("skipped")) {
      build.skipped.push_back({s.at("id").get<std::string>(), s.at("reason").get<std::string>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed repr header: " + std::string(e.what()));
  }

  std::ifstream ids_in(dir / kIdsName);
  if (!ids_in) fail(ErrorKind::Io, "cannot open " + (dir / kIdsName).string());
  std::string line;
  while (std::getline(ids_in, line)) build.matrix.ids.push_back(line);
  if (build.matrix.ids.size() != n) fail(ErrorKind::Format, "repr.ids line count does not match N");

  const fs::path payload = dir / kPayloadName;
  std::error_code ec;
  const auto bytes = fs::file_size(payload, ec);
  if (ec || bytes != n * d * 8) fail(ErrorKind::Format, "repr.f64 size does not match N x d");
  std::ifstream pin(payload, std::ios::binary);
  std::vector<char> buf(bytes);
  pin.read(buf.data(), static_cast<std::streamsize>(bytes));
  if (!pin) fail(ErrorKind::Io, "short read in " + payload.string());

  build.matrix.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const char* b = buf.data() + 8 * (i * d + c);
      std::uint64_t bits = 0;
      for (int k = 7; k >= 0; --k) bits = (bits << 8) | static_cast<unsigned char>(b[k]);
      const double v = std::bit_cast<double>(bits);
      if (!std::isfinite(v)) fail(ErrorKind::Validation, "non-finite value in repr.f64");
      build.matrix.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return build;
}

}  // namespace subsel::repr
