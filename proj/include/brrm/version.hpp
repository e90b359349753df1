#pragma once

namespace brrm {
inline constexpr const char* kVersion = "0.1.0";
}
