#pragma once

// SSDP activation dumps: a JSON manifest plus binary shards of per-sample
// records (head-averaged instruction->visual attention and first-layer hidden
// states of the visual tokens).
//
// Shard layout, little-endian throughout:
//   magic "SSDP0001" (8 bytes)
//   repeated: id_len u64 | id bytes | n_u u32 | n_v u32 | d u32 |
//             attn f32[n_u*n_v] row-major | hidden f32[n_v*d] row-major

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace subsel::dump {

inline constexpr std::array<char, 8> kMagic = {'S', 'S', 'D', 'P', '0', '0', '0', '1'};
inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";
/// Attention rows are sub-rows of a softmax row; allow this much slack over 1.
inline constexpr double kRowSumSlack = 1e-3;

struct DumpManifest {
  int format_version = kFormatVersion;
  std::uint64_t num_samples = 0;
  std::uint32_t hidden_dim = 0;
  std::vector<std::string> shard_paths;  // relative to the dump directory
  std::string producer;
};

struct SampleDump {
  std::string sample_id;
  std::uint32_t n_u = 0;       // instruction tokens, all turns concatenated
  std::uint32_t n_v = 0;       // visual tokens
  std::uint32_t d = 0;         // hidden size
  std::vector<float> attn;     // n_u x n_v, row-major
  std::vector<float> hidden;   // n_v x d, row-major

  float attention(std::size_t row, std::size_t col) const { return attn[row * n_v + col]; }
  std::span<const float> hidden_row(std::size_t token) const {
    return {hidden.data() + token * d, d};
  }

  bool operator==(const SampleDump&) const = default;
};

/// Bytes one record occupies in a shard.
std::uint64_t encoded_size(const SampleDump& rec);

/// First invariant the record breaks, as a message naming its sample_id.
std::optional<std::string> find_violation(const SampleDump& rec);

/// Throws a validation error when `rec` breaks any record invariant.
void check_record(const SampleDump& rec);

DumpManifest read_manifest(const std::filesystem::path& dir);

/// Streams records into numbered shards under `dir`. The manifest is written
/// by finish(), last, so an interrupted writer leaves no manifest behind.
/// Record contents are not validated here beyond their shape; that is the
/// reader's job.
class DumpWriter {
 public:
  DumpWriter(std::filesystem::path dir, std::uint64_t shard_size,
             std::string producer = "subsel");
  ~DumpWriter();

  DumpWriter(const DumpWriter&) = delete;
  DumpWriter& operator=(const DumpWriter&) = delete;

  void append(const SampleDump& rec);
  DumpManifest finish();

 private:
  void open_shard();
  void close_shard();

  std::filesystem::path dir_;
  std::uint64_t shard_size_;
  DumpManifest manifest_;
  std::unordered_set<std::string> seen_ids_;
  std::ofstream shard_;
  std::filesystem::path shard_tmp_;
  std::filesystem::path shard_final_;
  std::uint64_t in_shard_ = 0;
  bool finished_ = false;
};

DumpManifest write_dump(std::span<const SampleDump> records,
                        const std::filesystem::path& dir, std::uint64_t shard_size,
                        const std::string& producer = "subsel");

/// Sequential reader over one shard. Only shape checks happen here; the
/// caller decides whether content violations abort or get collected.
class ShardReader {
 public:
  explicit ShardReader(std::filesystem::path path);

  /// Reads the next record; false at a clean end of file. Throws a corruption
  /// error carrying the byte offset when the shard ends mid-record.
  bool next(SampleDump& out);

  std::uint64_t offset() const { return offset_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  void require(std::uint64_t n, std::uint64_t record_start, const char* field) const;
  void read_exact(char* dst, std::uint64_t n, std::uint64_t record_start, const char* field);

  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
  std::uint64_t offset_ = 0;
};

/// Streams every record of a dump in shard order, validating each one.
/// Memory use is bounded by the largest record.
class DumpReader {
 public:
  explicit DumpReader(const std::filesystem::path& dir);

  const DumpManifest& manifest() const { return manifest_; }
  bool next(SampleDump& out);

 private:
  std::filesystem::path dir_;
  DumpManifest manifest_;
  std::size_t shard_index_ = 0;
  std::optional<ShardReader> shard_;
  std::uint64_t seen_ = 0;
};

/// Reads a whole dump into memory. Convenience for tests and small dumps.
std::vector<SampleDump> read_all(const std::filesystem::path& dir);

struct ShardChecksum {
  std::string path;
  std::uint64_t bytes = 0;
  std::uint32_t crc32 = 0;
};

struct ValidationReport {
  std::uint64_t manifest_samples = 0;
  std::uint64_t num_samples = 0;  // records actually scanned
  std::uint32_t hidden_dim = 0;
  std::uint32_t min_n_v = 0, max_n_v = 0;
  std::uint32_t min_n_u = 0, max_n_u = 0;
  std::vector<ShardChecksum> shards;
  std::uint64_t error_count = 0;
  std::vector<std::string> errors;  // first `cap` messages

  bool ok() const { return error_count == 0; }
};

/// Full pass over a dump applying every record invariant. Content errors are
/// collected (up to `cap` messages) instead of aborting; a truncated shard
/// ends the scan of that shard only. Throws if the manifest is missing.
ValidationReport validate_dump(const std::filesystem::path& dir, std::size_t cap = 20);

}  // namespace subsel::dump
