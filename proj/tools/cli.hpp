#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace eshift::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;  // bad arguments, unreadable or missing files
inline constexpr int kExitData = 3;   // inputs parsed but invalid

// Runs the tool with argv-style arguments (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lower-case hex SHA-256 of a file's bytes. Throws IoError.
std::string sha256_file(const std::string& path);

}  // namespace eshift::cli
