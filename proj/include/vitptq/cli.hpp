// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace vitptq {

/// Entry point of the `vitptq` command line tool. Returns 0 on success, 1 on
/// runtime errors and 2 on usage errors (unknown subcommand or flag, bad
/// flag value).
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace vitptq
