#pragma once

// Content-addressed shared cache. Outputs live as blobs named by their
// own hash; each published trace becomes an entry under its command key,
// filed by a fingerprint of what the command read. A build on another
// machine with the same key and the same read contents can then restore
// the outputs instead of running the command.
//
// The cache is strictly best-effort: an unreachable or unwritable store
// degrades to a warning, and a corrupt blob turns the lookup into a miss
// before anything is touched in the tree.

#include <algorithm>
#include <string>
#include <vector>

#include "forge/trace.hpp"

namespace forge {

class SharedCache {
 public:
  SharedCache(CanonPath root, SubstTable subst)
      : root_(std::move(root)), subst_(std::move(subst)) {}

  const CanonPath& root() const { return root_; }

  // Fingerprint of a read set, over portable paths so that trees rooted
  // anywhere agree.
  ContentHash reads_fingerprint(
      const std::map<CanonPath, FileDigest>& reads) const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [p, d] : reads)
      j.push_back({subst_.substitute(p), d.text()});
    return ContentHash::of_bytes(j.dump());
  }

  // Store the trace's outputs and the trace itself. Quietly refuses on
  // any store trouble; the build does not depend on the cache.
  bool publish(const Trace& t, std::vector<std::string>* warnings) {
    try {
      for (const auto& [path, digest] : t.writes) {
        if (!digest.present()) continue;
        auto content = read_file_if_exists(path);
        if (!content || ContentHash::of_bytes(*content) != digest.hash()) {
          warn(warnings, "cache: not publishing " + path.str() +
                             ", content changed since it was traced");
          return false;
        }
        put_blob(digest.hash(), *content);
      }
      auto dir = entries_dir(t.command_key);
      std::filesystem::create_directories(dir);
      auto entry = dir / (reads_fingerprint(t.reads).hex() + ".json");
      write_file_atomic(canonicalize_abs(entry.string()),
                        trace_to_json(t, subst_).dump());
      return true;
    } catch (const std::exception& e) {
      warn(warnings, std::string("cache: publish failed: ") + e.what());
      return false;
    }
  }

  // If some entry for this key describes reads matching the tree right
  // now, restore its outputs and hand back the trace. Outputs are staged
  // and verified first, so a corrupt blob is a miss, not a half-restore.
  std::optional<Trace> fetch(const ContentHash& key,
                             std::vector<std::string>* warnings) {
    try {
      auto dir = entries_dir(key);
      if (!std::filesystem::is_directory(dir)) return std::nullopt;
      std::vector<std::filesystem::path> entries;
      for (const auto& de : std::filesystem::directory_iterator(dir))
        if (de.path().extension() == ".json") entries.push_back(de.path());
      std::sort(entries.begin(), entries.end());
      for (const auto& ep : entries) {
        auto t = load_entry(ep, warnings);
        if (!t || !reads_match(*t)) continue;
        if (restore(*t, warnings)) return t;
      }
      return std::nullopt;
    } catch (const std::exception& e) {
      warn(warnings, std::string("cache: lookup failed: ") + e.what());
      return std::nullopt;
    }
  }

  size_t blob_count() const {
    size_t n = 0;
    auto dir = root_.fs() / "blobs";
    if (!std::filesystem::is_directory(dir)) return 0;
    for (const auto& de : std::filesystem::recursive_directory_iterator(dir))
      if (de.is_regular_file()) n++;
    return n;
  }

  size_t entry_count() const {
    size_t n = 0;
    auto dir = root_.fs() / "entries";
    if (!std::filesystem::is_directory(dir)) return 0;
    for (const auto& de : std::filesystem::recursive_directory_iterator(dir))
      if (de.is_regular_file()) n++;
    return n;
  }

 private:
  std::filesystem::path blob_path(const ContentHash& h) const {
    std::string hex = h.hex();
    return root_.fs() / "blobs" / hex.substr(0, 2) / hex;
  }

  std::filesystem::path entries_dir(const ContentHash& key) const {
    return root_.fs() / "entries" / key.hex();
  }

  void put_blob(const ContentHash& h, const std::string& content) {
    auto p = blob_path(h);
    if (std::filesystem::exists(p)) return;
    write_file_atomic(canonicalize_abs(p.string()), content);
  }

  std::optional<Trace> load_entry(const std::filesystem::path& ep,
                                  std::vector<std::string>* warnings) {
    try {
      return trace_from_json(
          nlohmann::json::parse(read_file(canonicalize_abs(ep.string()))),
          subst_);
    } catch (const std::exception& e) {
      warn(warnings,
           "cache: ignoring unreadable entry " + ep.string() + ": " + e.what());
      return std::nullopt;
    }
  }

  static bool reads_match(const Trace& t) {
    for (const auto& [p, d] : t.reads)
      if (digest_file(p) != d) return false;
    return true;
  }

  bool restore(const Trace& t, std::vector<std::string>* warnings) {
    // Stage every present output under its final directory, verifying
    // blob contents against their names, then commit with renames.
    struct Staged {
      std::filesystem::path tmp;
      CanonPath final;
    };
    std::vector<Staged> staged;
    auto cleanup = [&] {
      for (const auto& s : staged) {
        std::error_code ec;
        std::filesystem::remove(s.tmp, ec);
      }
    };
    for (const auto& [path, digest] : t.writes) {
      if (!digest.present()) continue;
      auto bp = blob_path(digest.hash());
      auto content = read_file_if_exists(canonicalize_abs(bp.string()));
      if (!content || ContentHash::of_bytes(*content) != digest.hash()) {
        warn(warnings, "cache: blob for " + path.str() +
                           (content ? " is corrupt" : " is missing") +
                           ", treating as a miss");
        cleanup();
        return false;
      }
      auto tmp = path.fs();
      tmp += ".forge-stage." + std::to_string(::getpid());
      std::filesystem::create_directories(path.fs().parent_path());
      write_file(canonicalize_abs(tmp.string()), *content);
      staged.push_back({tmp, path});
    }
    for (const auto& s : staged)
      std::filesystem::rename(s.tmp, s.final.fs());
    for (const auto& [path, digest] : t.writes) {
      if (digest.present()) continue;
      std::error_code ec;
      std::filesystem::remove(path.fs(), ec);
    }
    return true;
  }

  static void warn(std::vector<std::string>* warnings, std::string msg) {
    if (warnings) warnings->push_back(std::move(msg));
  }

  CanonPath root_;
  SubstTable subst_;
};

}  // namespace forge
