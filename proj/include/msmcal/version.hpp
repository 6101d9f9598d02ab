#pragma once

namespace msmcal {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace msmcal
