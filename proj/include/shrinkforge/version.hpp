#pragma once

namespace shrinkforge {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace shrinkforge
