#pragma once

namespace diffcap {

// Single entry point behind the `diffcap` binary; exposed so tests can drive
// subcommands in-process. Returns 0 on success, 1 on usage errors, 2 on
// runtime failures.
int cli_main(int argc, const char* const* argv);

// True when DIFFCAP_DETERMINISTIC=1: wall-clock fields are zeroed so reruns
// are byte-identical file for file.
bool deterministic_mode();

}  // namespace diffcap
