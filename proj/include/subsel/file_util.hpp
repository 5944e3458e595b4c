#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string_view>

namespace subsel {

/// Writes `path` by streaming into a sibling temp file and renaming it into
/// place, so the final path either holds the complete content or nothing new.
void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& body,
                       bool binary = false);

void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace subsel
