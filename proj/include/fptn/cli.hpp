#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace fptn::cli {

enum ExitCode : int { kSuccess = 0, kVerificationFailure = 1, kInputError = 2 };

/// Runs the command line in-process. argv[0] is the program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

/// Exclusive ownership of a run directory via a lock file created with
/// O_EXCL. Throws StateError when another process holds it.
class RunDirLock {
 public:
  explicit RunDirLock(const std::filesystem::path& dir);
  ~RunDirLock();
  RunDirLock(const RunDirLock&) = delete;
  RunDirLock& operator=(const RunDirLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// "288", "12h" or "1d" at the given step length, in steps.
std::size_t parse_window(const std::string& text, int step_minutes);

}  // namespace fptn::cli
