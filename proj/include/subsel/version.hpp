#pragma once

namespace subsel {
inline constexpr const char* kVersion = "0.1.0";
}
