#pragma once

#include <string_view>

namespace xfer {

inline constexpr std::string_view kEngineVersion = "xfer-eval 0.1.0";

}  // namespace xfer
