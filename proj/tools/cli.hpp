#pragma once

#include <iosfwd>

namespace bivl {

/// Entry point of the `bivl` tool. Records go to `out`, diagnostics to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bivl
