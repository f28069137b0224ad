#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace sdl::cli {

/// Environment variable naming the data root. Relative paths given to the CLI
/// resolve against it when set.
inline constexpr const char* data_root_env = "SDL_DATA_ROOT";

/// Runs one subcommand. args excludes the program name. Returns the exit
/// status: 0 on success, 2 on usage errors, 1 on any other failure, in which
/// case `err` receives one JSON line {"error": {...}}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sdl::cli
