#include "subsel/file_util.hpp"

#include <fstream>
#include <system_error>

#include <unistd.h>

#include "subsel/error.hpp"

namespace subsel {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path,
                       const std::function<void(std::ostream&)>& body,
                       bool binary) {
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open for writing: " + tmp.string());
    body(out);
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      fail(ErrorKind::Io, "write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::Io, "cannot rename into place: " + path.string());
  }
}

void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, [&](std::ostream& out) { out.write(text.data(), static_cast<std::streamsize>(text.size())); });
}

}  // namespace subsel
