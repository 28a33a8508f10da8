#pragma once

#include <string>
#include <vector>

namespace manifp {

/**
 * Config-driven experiment runner behind the command-line binary, exposed as
 * a function so tests can drive it in-process.
 *
 * Subcommands: check, fpe, mc, compare, filter; each takes --config <path>
 * and --out <dir>, and --seed overrides the config seed.
 *
 * Exit codes: 0 success, 2 tolerance or comparison failure, 3 invalid
 * config, 4 numerical failure (instability, blow-up, degenerate update).
 */
int run_cli(const std::vector<std::string>& args);

} // namespace manifp
