#pragma once

namespace conserve {

inline constexpr const char* kVersion = "0.1.0";

} // namespace conserve
