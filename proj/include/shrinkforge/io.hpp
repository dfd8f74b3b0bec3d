#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "shrinkforge/error.hpp"

namespace shrinkforge {

namespace fs = std::filesystem;

// Keeps big tensor buffers on the heap instead of mmap so they are reused
// across training steps. Called once from long-running entry points.
inline void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

// All artifact files go through temp-then-rename so an interrupted run never
// leaves a half-written file behind.
inline void atomic_write(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(out.good(), ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::Io, "rename failed for " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

}  // namespace shrinkforge
