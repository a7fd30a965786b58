#pragma once

namespace proxor {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace proxor
