#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace all4one {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // usage, contract, config and I/O errors
inline constexpr int kExitNumeric = 2;  // NaN, divergence, failed gradient check

// all4one train|eval|gradcheck|export ...
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_main(int argc, const char* const* argv);
// Arguments without the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace all4one
