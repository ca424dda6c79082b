#pragma once

namespace ctrpose::cli {

// Entry point behind the ctrpose binary. argv follows main() conventions
// (argv[0] is the program name). Returns the process exit status: 0 on
// success, 1 on usage or validation errors, 2 on runtime faults.
int run_command(int argc, const char* const argv[]);

}  // namespace ctrpose::cli
