#pragma once

namespace sparsecoder {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sparsecoder
