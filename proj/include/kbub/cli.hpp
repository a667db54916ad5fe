#pragma once

// Command-line front end: generate, train, evaluate, rollout, dmd, export.
//
// Every subcommand resolves its parameters as preset defaults, then the
// --config JSON document, then flags, and writes the result to
// <out>/config.json. Feeding that file back through --config reproduces the
// run. Wall-clock measurements go to <out>/timing.json only, so every other
// output is byte-identical for a fixed seed.

#include <string>
#include <vector>

namespace kbub::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

// argv-style entry point; never throws.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace kbub::cli
