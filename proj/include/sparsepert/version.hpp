#pragma once

namespace sparsepert {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sparsepert
