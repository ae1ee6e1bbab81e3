#pragma once

// Shared helpers for the test suites: scratch directories and command
// construction shorthand.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "forge/fsutil.hpp"
#include "forge/trace.hpp"

namespace forge::test {

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    namespace fs = std::filesystem;
    auto base = fs::temp_directory_path() / "forge-test";
    fs::create_directories(base);
    path = base / ("d" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  CanonPath canon() const { return canonicalize_abs(path.string()); }
  CanonPath sub(const std::string& rel) const {
    return canonicalize(rel, canon());
  }
  void put(const std::string& rel, const std::string& contents) const {
    write_file(sub(rel), contents);
  }
  std::string get(const std::string& rel) const { return read_file(sub(rel)); }
  bool has(const std::string& rel) const {
    return read_file_if_exists(sub(rel)).has_value();
  }
};

// Substitution table rooted at the directory, the way the engine sets one up.
inline SubstTable root_table(const CanonPath& root) {
  SubstTable t;
  t.add(root, "ROOT");
  return t;
}

inline Command mk_command(std::vector<std::string> argv, const CanonPath& cwd,
                          Backend backend = Backend::MiniLang,
                          bool no_cache = false) {
  CmdOptions o;
  o.cwd = cwd;
  o.env_fingerprint = env_fingerprint({"PATH"});
  o.backend = backend;
  o.no_cache = no_cache;
  return make_command(std::move(argv), std::move(o), root_table(cwd));
}

}  // namespace forge::test
