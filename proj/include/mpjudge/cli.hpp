#pragma once

#include <ostream>

namespace mpjudge {

// Entry point of the mpjudge tool: train, eval, score, synth-data, serve.
// Returns the process exit code; diagnostics go to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mpjudge
