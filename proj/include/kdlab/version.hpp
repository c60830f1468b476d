#pragma once

namespace kdlab {

// Stamped into every resolved-config snapshot so run directories identify
// the code that produced them.
inline constexpr const char* kVersion = "kdlab 0.1.0";

}  // namespace kdlab
