// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace kdfip {

/// Runs one subcommand: gen-data, train, eval, experiment, ablate, diagnose or
/// gradcheck. Returns 0 on success, 1 when the command fails (one JSON error
/// line on stderr) and 2 on a usage error.
int cli_dispatch(int argc, char **argv);

} // namespace kdfip
