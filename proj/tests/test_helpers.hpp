#pragma once

#include <filesystem>
#include <string>

namespace testutil {

// Fresh scratch directory per test case; removed up front so reruns are clean.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("unsq_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
