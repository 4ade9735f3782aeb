#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "infinisim/tier_store.hpp"

namespace infinisim::testing {

/// Fresh, empty scratch directory under $INFINISIM_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path base;
  if (const char* env = std::getenv("INFINISIM_TEST_TMP"); env && *env) {
    base = env;
  } else {
    base = std::filesystem::temp_directory_path() / "infinisim-tests";
  }
  const auto dir = base / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline StoreOptions store_options(const std::string& name, bool sync_io = false) {
  StoreOptions o;
  o.nvme_root = scratch_dir(name);
  o.sync_io = sync_io;
  return o;
}

}  // namespace infinisim::testing
