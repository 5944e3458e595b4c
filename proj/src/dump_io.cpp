#include "subsel/dump_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include <unistd.h>
#include <zlib.h>

#include "json.hpp"
#include "subsel/error.hpp"
#include "subsel/file_util.hpp"

namespace subsel::dump {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 8);
}

std::uint32_t get_u32(const char* b) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
  return v;
}

std::uint64_t get_u64(const char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
  return v;
}

void put_f32s(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
}

void decode_f32s(const char* src, std::vector<float>& dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst.data(), src, dst.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::bit_cast<float>(get_u32(src + 4 * i));
  }
}

std::string shard_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard-%05zu.ssdp", index);
  return buf;
}

void check_shape(const SampleDump& rec) {
  if (rec.attn.size() != static_cast<std::size_t>(rec.n_u) * rec.n_v ||
      rec.hidden.size() != static_cast<std::size_t>(rec.n_v) * rec.d) {
    fail(ErrorKind::Precondition,
         "record '" + rec.sample_id + "': buffer sizes do not match n_u/n_v/d");
  }
}

}  // namespace

std::uint64_t encoded_size(const SampleDump& rec) {
  return 8 + rec.sample_id.size() + 12 +
         4 * (static_cast<std::uint64_t>(rec.n_u) * rec.n_v +
              static_cast<std::uint64_t>(rec.n_v) * rec.d);
}

std::optional<std::string> find_violation(const SampleDump& rec) {
  const std::string who = "sample '" + rec.sample_id + "': ";
  if (rec.n_v < 1) return who + "n_v must be >= 1";
  if (rec.d < 1) return who + "hidden dimension must be >= 1";
  for (std::uint32_t r = 0; r < rec.n_u; ++r) {
    double row_sum = 0.0;
    for (std::uint32_t c = 0; c < rec.n_v; ++c) {
      const float a = rec.attention(r, c);
      if (!std::isfinite(a)) {
        return who + "non-finite attention at (" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
      if (a < 0.0f) {
        return who + "negative attention " + std::to_string(a) + " at (" + std::to_string(r) +
               "," + std::to_string(c) + ")";
      }
      row_sum += a;
    }
    if (row_sum > 1.0 + kRowSumSlack) {
      return who + "attention row " + std::to_string(r) + " sums to " + std::to_string(row_sum) +
             " > 1";
    }
  }
  for (std::size_t i = 0; i < rec.hidden.size(); ++i) {
    if (!std::isfinite(rec.hidden[i])) {
      return who + "non-finite hidden value at token " + std::to_string(i / rec.d) + ", dim " +
             std::to_string(i % rec.d);
    }
  }
  return std::nullopt;
}

void check_record(const SampleDump& rec) {
  if (auto msg = find_violation(rec)) fail(ErrorKind::Validation, *msg);
}

DumpManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) fail(ErrorKind::ManifestMissing, "manifest not found: " + path.string());
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  DumpManifest m;
  try {
    const json j = json::parse(in);
    m.format_version = j.at("format_version").get<int>();
    m.num_samples = j.at("num_samples").get<std::uint64_t>();
    m.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
    m.shard_paths = j.at("shards").get<std::vector<std::string>>();
    m.producer = j.value("producer", std::string{});
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest " + path.string() + ": " + e.what());
  }
  if (m.format_version != kFormatVersion) {
    fail(ErrorKind::Format, "unsupported format_version " + std::to_string(m.format_version));
  }
  if (m.hidden_dim == 0) fail(ErrorKind::Format, "manifest hidden_dim must be > 0");
  std::unordered_set<std::string> unique;
  for (const auto& s : m.shard_paths) {
    if (s.empty() || !unique.insert(s).second) {
      fail(ErrorKind::Format, "manifest shard paths must be unique and non-empty");
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Writer

DumpWriter::DumpWriter(fs::path dir, std::uint64_t shard_size, std::string producer)
    : dir_(std::move(dir)), shard_size_(shard_size) {
  if (shard_size_ < 1) fail(ErrorKind::Config, "shard_size must be >= 1");
  manifest_.producer = std::move(producer);
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir_.string() + ": " + ec.message());
}

DumpWriter::~DumpWriter() {
  if (shard_.is_open()) {
    shard_.close();
    std::error_code ec;
    fs::remove(shard_tmp_, ec);
  }
}

void DumpWriter::open_shard() {
  const std::string name = shard_name(manifest_.shard_paths.size());
  shard_final_ = dir_ / name;
  shard_tmp_ = dir_ / (name + ".tmp." + std::to_string(::getpid()));
  shard_.open(shard_tmp_, std::ios::binary | std::ios::trunc);
  if (!shard_) fail(ErrorKind::Io, "cannot open for writing: " + shard_tmp_.string());
  shard_.write(kMagic.data(), kMagic.size());
  manifest_.shard_paths.push_back(name);
  in_shard_ = 0;
}

void DumpWriter::close_shard() {
  shard_.flush();
  const bool good = static_cast<bool>(shard_);
  shard_.close();
  if (!good) fail(ErrorKind::Io, "write failed: " + shard_tmp_.string());
  std::error_code ec;
  fs::rename(shard_tmp_, shard_final_, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + shard_tmp_.string() + ": " + ec.message());
}

void DumpWriter::append(const SampleDump& rec) {
  if (finished_) fail(ErrorKind::Precondition, "append after finish");
  check_shape(rec);
  if (rec.d == 0) fail(ErrorKind::Precondition, "sample '" + rec.sample_id + "' has hidden dim 0");
  if (manifest_.num_samples == 0) {
    manifest_.hidden_dim = rec.d;
  } else if (rec.d != manifest_.hidden_dim) {
    fail(ErrorKind::DimensionMismatch, "sample '" + rec.sample_id + "' has hidden dim " +
                                           std::to_string(rec.d) + ", expected " +
                                           std::to_string(manifest_.hidden_dim));
  }
  if (!seen_ids_.insert(rec.sample_id).second) {
    fail(ErrorKind::DuplicateId, "duplicate sample_id '" + rec.sample_id + "'");
  }
  if (!shard_.is_open()) open_shard();

  put_u64(shard_, rec.sample_id.size());
  shard_.write(rec.sample_id.data(), static_cast<std::streamsize>(rec.sample_id.size()));
  put_u32(shard_, rec.n_u);
  put_u32(shard_, rec.n_v);
  put_u32(shard_, rec.d);
  put_f32s(shard_, rec.attn);
  put_f32s(shard_, rec.hidden);
  if (!shard_) fail(ErrorKind::Io, "write failed: " + shard_tmp_.string());

  ++manifest_.num_samples;
  if (++in_shard_ == shard_size_) close_shard();
}

DumpManifest DumpWriter::finish() {
  if (finished_) return manifest_;
  if (manifest_.num_samples == 0) fail(ErrorKind::Precondition, "cannot write an empty dump");
  if (shard_.is_open()) close_shard();
  json j = {{"format_version", manifest_.format_version},
            {"num_samples", manifest_.num_samples},
            {"hidden_dim", manifest_.hidden_dim},
            {"shards", manifest_.shard_paths},
            {"producer", manifest_.producer}};
  write_text_atomic(dir_ / kManifestName, j.dump(2) + "\n");
  finished_ = true;
  return manifest_;
}

DumpManifest write_dump(std::span<const SampleDump> records, const fs::path& dir,
                        std::uint64_t shard_size, const std::string& producer) {
  if (records.empty()) fail(ErrorKind::Precondition, "cannot write an empty dump");
  DumpWriter writer(dir, shard_size, producer);
  for (const auto& rec : records) writer.append(rec);
  return writer.finish();
}

// ---------------------------------------------------------------------------
// Readers

ShardReader::ShardReader(fs::path path) : path_(std::move(path)) {
  std::error_code ec;
  size_ = fs::file_size(path_, ec);
  if (ec) fail(ErrorKind::Io, "cannot stat shard " + path_.string() + ": " + ec.message());
  in_.open(path_, std::ios::binary);
  if (!in_) fail(ErrorKind::Io, "cannot open shard " + path_.string());
  std::array<char, 8> magic{};
  in_.read(magic.data(), magic.size());
  if (in_.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kMagic) {
    fail(ErrorKind::Format, "bad magic in shard " + path_.string());
  }
  offset_ = magic.size();
}

void ShardReader::require(std::uint64_t n, std::uint64_t record_start, const char* field) const {
  if (n > size_ - offset_) {
    std::ostringstream msg;
    msg << "truncated shard " << path_.string() << ": record at byte offset " << record_start
        << " needs " << n << " bytes for " << field << " at offset " << offset_ << ", only "
        << (size_ - offset_) << " remain";
    fail(ErrorKind::Corruption, msg.str());
  }
}

void ShardReader::read_exact(char* dst, std::uint64_t n, std::uint64_t record_start,
                             const char* field) {
  require(n, record_start, field);
  in_.read(dst, static_cast<std::streamsize>(n));
  if (in_.gcount() != static_cast<std::streamsize>(n)) {
    fail(ErrorKind::Io, "short read in " + path_.string() + " at offset " + std::to_string(offset_));
  }
  offset_ += n;
}

bool ShardReader::next(SampleDump& out) {
  if (offset_ == size_) return false;
  const std::uint64_t start = offset_;
  char head[12];
  read_exact(head, 8, start, "id_len");
  const std::uint64_t id_len = get_u64(head);
  // Lengths are checked before allocating so garbage cannot trigger a huge resize.
  require(id_len, start, "sample_id");
  out.sample_id.resize(id_len);
  read_exact(out.sample_id.data(), id_len, start, "sample_id");
  read_exact(head, 12, start, "shape");
  out.n_u = get_u32(head);
  out.n_v = get_u32(head + 4);
  out.d = get_u32(head + 8);

  const std::uint64_t attn_n = static_cast<std::uint64_t>(out.n_u) * out.n_v;
  const std::uint64_t hidden_n = static_cast<std::uint64_t>(out.n_v) * out.d;
  const std::uint64_t payload = 4 * (attn_n + hidden_n);
  require(payload, start, "tensor payload");

  std::vector<char> buf(payload);
  read_exact(buf.data(), payload, start, "tensor payload");
  out.attn.resize(attn_n);
  out.hidden.resize(hidden_n);
  decode_f32s(buf.data(), out.attn);
  decode_f32s(buf.data() + 4 * attn_n, out.hidden);
  return true;
}

DumpReader::DumpReader(const fs::path& dir) : dir_(dir), manifest_(read_manifest(dir)) {}

bool DumpReader::next(SampleDump& out) {
  while (true) {
    if (!shard_) {
      if (shard_index_ == manifest_.shard_paths.size()) {
        if (seen_ != manifest_.num_samples) {
          fail(ErrorKind::Corruption, "manifest declares " + std::to_string(manifest_.num_samples) +
                                          " samples but shards hold " + std::to_string(seen_));
        }
        return false;
      }
      shard_.emplace(dir_ / manifest_.shard_paths[shard_index_++]);
    }
    if (shard_->next(out)) break;
    shard_.reset();
  }
  ++seen_;
  if (seen_ > manifest_.num_samples) {
    fail(ErrorKind::Corruption, "shards hold more records than the manifest's " +
                                    std::to_string(manifest_.num_samples));
  }
  if (out.d != manifest_.hidden_dim) {
    fail(ErrorKind::DimensionMismatch, "sample '" + out.sample_id + "' has hidden dim " +
                                           std::to_string(out.d) + ", manifest says " +
                                           std::to_string(manifest_.hidden_dim));
  }
  check_record(out);
  return true;
}

std::vector<SampleDump> read_all(const fs::path& dir) {
  DumpReader reader(dir);
  std::vector<SampleDump> out;
  SampleDump rec;
  while (reader.next(rec)) out.push_back(rec);
  return out;
}

// ---------------------------------------------------------------------------
// Validation

namespace {

ShardChecksum checksum_file(const fs::path& dir, const std::string& rel) {
  ShardChecksum sum{rel, 0, 0};
  std::ifstream in(dir / rel, std::ios::binary);
  if (!in) return sum;
  std::vector<char> buf(1 << 16);
  uLong crc = crc32(0L, Z_NULL, 0);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got <= 0) break;
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
    sum.bytes += static_cast<std::uint64_t>(got);
  }
  sum.crc32 = static_cast<std::uint32_t>(crc);
  return sum;
}

}  // namespace

ValidationReport validate_dump(const fs::path& dir, std::size_t cap) {
  ValidationReport report;
  const DumpManifest manifest = read_manifest(dir);
  report.manifest_samples = manifest.num_samples;
  report.hidden_dim = manifest.hidden_dim;

  auto record_error = [&](const std::string& msg) {
    ++report.error_count;
    if (report.errors.size() < cap) report.errors.push_back(msg);
  };

  std::unordered_set<std::string> ids;
  bool first = true;
  SampleDump rec;
  for (const auto& rel : manifest.shard_paths) {
    report.shards.push_back(checksum_file(dir, rel));
    try {
      ShardReader shard(dir / rel);
      while (true) {
        try {
          if (!shard.next(rec)) break;
        } catch (const Error& e) {
          // Framing is lost after a truncation; nothing further in this shard is readable.
          record_error(e.what());
          break;
        }
        ++report.num_samples;
        if (first) {
          report.min_n_v = report.max_n_v = rec.n_v;
          report.min_n_u = report.max_n_u = rec.n_u;
          first = false;
        } else {
          report.min_n_v = std::min(report.min_n_v, rec.n_v);
          report.max_n_v = std::max(report.max_n_v, rec.n_v);
          report.min_n_u = std::min(report.min_n_u, rec.n_u);
          report.max_n_u = std::max(report.max_n_u, rec.n_u);
        }
        if (rec.d != manifest.hidden_dim) {
          record_error("sample '" + rec.sample_id + "': hidden dim " + std::to_string(rec.d) +
                       " != manifest hidden_dim " + std::to_string(manifest.hidden_dim));
        }
        if (!ids.insert(rec.sample_id).second) {
          record_error("duplicate sample_id '" + rec.sample_id + "'");
        }
        if (auto msg = find_violation(rec)) record_error(*msg);
      }
    } catch (const Error& e) {
      record_error(e.what());
    }
  }
  if (report.num_samples != manifest.num_samples) {
    record_error("manifest declares " + std::to_string(manifest.num_samples) +
                 " samples but shards hold " + std::to_string(report.num_samples));
  }
  return report;
}

}  // namespace subsel::dump
