#pragma once

// Path and content primitives shared by every other component: SHA-256
// content hashes, lexically canonical absolute paths, and the prefix
// substitution table that keeps stored paths portable across machines.

#include <array>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fnmatch.h>
#include <unistd.h>

#include <openssl/evp.h>

namespace forge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad invocation or malformed input from the user; exit code 3 in the CLI.
class UsageError : public Error {
 public:
  using Error::Error;
};

// A command exited nonzero or a verb could not run; exit code 1 in the CLI.
class CommandError : public Error {
 public:
  using Error::Error;
};

// SHA-256 over file or buffer contents. Contents only; never metadata.
class ContentHash {
 public:
  ContentHash() = default;

  static ContentHash of_bytes(std::string_view data) {
    ContentHash h;
    unsigned int len = 0;
    const void* ptr = data.empty() ? static_cast<const void*>("") : data.data();
    if (!EVP_Digest(ptr, data.size(), h.digest_.data(), &len, EVP_sha256(),
                    nullptr) ||
        len != h.digest_.size()) {
      throw Error("sha256 digest failed");
    }
    return h;
  }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (unsigned char b : digest_) {
      out.push_back(digits[b >> 4]);
      out.push_back(digits[b & 0xf]);
    }
    return out;
  }

  static std::optional<ContentHash> from_hex(std::string_view hex) {
    if (hex.size() != 64) return std::nullopt;
    ContentHash h;
    for (size_t i = 0; i < 32; i++) {
      auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        return -1;
      };
      int hi = nib(hex[2 * i]), lo = nib(hex[2 * i + 1]);
      if (hi < 0 || lo < 0) return std::nullopt;
      h.digest_[i] = static_cast<unsigned char>(hi << 4 | lo);
    }
    return h;
  }

  auto operator<=>(const ContentHash&) const = default;

 private:
  std::array<unsigned char, 32> digest_{};
};

// What a file's contents looked like when probed: a real hash, or the
// absence marker (missing at read time, or a recorded deletion).
class FileDigest {
 public:
  FileDigest() = default;  // absent

  static FileDigest absent() { return FileDigest(); }
  static FileDigest of(const ContentHash& h) {
    FileDigest d;
    d.hash_ = h;
    return d;
  }

  bool present() const { return hash_.has_value(); }
  const ContentHash& hash() const {
    if (!hash_) throw Error("absence marker carries no hash");
    return *hash_;
  }

  std::string text() const { return hash_ ? hash_->hex() : "absent"; }

  static FileDigest from_text(std::string_view t) {
    if (t == "absent") return absent();
    auto h = ContentHash::from_hex(t);
    if (!h) throw Error("bad digest text: " + std::string(t));
    return of(*h);
  }

  auto operator<=>(const FileDigest&) const = default;

 private:
  std::optional<ContentHash> hash_;
};

// An absolute, lexically normalized path. Canonicalization is purely
// lexical: no filesystem access, so symlinks are not resolved. Idempotent.
class CanonPath {
 public:
  CanonPath() = default;

  const std::string& str() const { return path_; }
  bool empty() const { return path_.empty(); }

  std::filesystem::path fs() const { return std::filesystem::path(path_); }

  auto operator<=>(const CanonPath&) const = default;

 private:
  friend CanonPath canonicalize(std::string_view, const CanonPath&);
  friend CanonPath canonicalize_abs(std::string_view);
  explicit CanonPath(std::string s) : path_(std::move(s)) {}
  std::string path_;
};

inline CanonPath canonicalize(std::string_view raw, const CanonPath& cwd) {
  if (raw.empty()) throw Error("cannot canonicalize an empty path");
  std::filesystem::path p{std::string(raw)};
  if (!p.is_absolute()) {
    if (cwd.empty() || cwd.str()[0] != '/')
      throw Error("relative path needs an absolute cwd: " + std::string(raw));
    p = std::filesystem::path(cwd.str()) / p;
  }
  std::string s = p.lexically_normal().generic_string();
  // "//x" is root-equivalent here; collapse so equality behaves.
  while (s.size() > 1 && s[0] == '/' && s[1] == '/') s.erase(0, 1);
  while (s.size() > 1 && s.back() == '/') s.pop_back();
  if (s.size() > 1 && s.ends_with("/.")) s.resize(s.size() - 2);
  return CanonPath(s);
}

// For paths required to already be absolute (roots, config values).
inline CanonPath canonicalize_abs(std::string_view raw) {
  if (raw.empty() || raw[0] != '/')
    throw Error("expected an absolute path: " + std::string(raw));
  return canonicalize(raw, CanonPath());
}

// Ordered prefix -> $NAME rewriting used by the trace store and the shared
// cache. Longest matching prefix wins; ties go to table order. A literal
// '$' in a path survives round trips via the "$$" escape.
class SubstTable {
 public:
  void add(const CanonPath& prefix, std::string name) {
    if (name.empty()) throw Error("substitution variable needs a name");
    for (char c : name) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_')
        throw Error("bad substitution variable name: " + name);
    }
    rules_.push_back(Rule{prefix, std::move(name)});
  }

  std::string substitute(const CanonPath& path) const {
    const Rule* best = nullptr;
    for (const Rule& r : rules_) {
      if (!matches(r.prefix, path)) continue;
      if (!best || r.prefix.str().size() > best->prefix.str().size()) best = &r;
    }
    if (!best) return escape(path.str());
    std::string rest = path.str() == best->prefix.str()
                           ? ""
                           : path.str().substr(best->prefix.str() == "/"
                                                   ? 0
                                                   : best->prefix.str().size());
    return "$" + best->name + escape(rest);
  }

  CanonPath expand(std::string_view portable) const {
    std::string out;
    size_t i = 0;
    while (i < portable.size()) {
      char c = portable[i];
      if (c != '$') {
        out.push_back(c);
        i++;
        continue;
      }
      if (i + 1 < portable.size() && portable[i + 1] == '$') {
        out.push_back('$');
        i += 2;
        continue;
      }
      size_t j = i + 1;
      while (j < portable.size() &&
             (std::isalnum(static_cast<unsigned char>(portable[j])) ||
              portable[j] == '_')) {
        j++;
      }
      std::string name(portable.substr(i + 1, j - i - 1));
      if (name.empty())
        throw Error("dangling '$' in portable path: " + std::string(portable));
      const Rule* rule = nullptr;
      for (const Rule& r : rules_) {
        if (r.name == name) {
          rule = &r;
          break;
        }
      }
      if (!rule)
        throw Error("unknown substitution variable $" + name + " in " +
                    std::string(portable));
      out += rule->prefix.str();
      i = j;
    }
    if (out.empty() || out[0] != '/')
      throw Error("portable path did not expand to an absolute path: " +
                  std::string(portable));
    return canonicalize_abs(out);
  }

 private:
  struct Rule {
    CanonPath prefix;
    std::string name;
  };

  static bool matches(const CanonPath& prefix, const CanonPath& path) {
    const std::string& pre = prefix.str();
    const std::string& p = path.str();
    if (pre.empty()) return false;
    if (pre == "/") return true;
    if (p == pre) return true;
    return p.size() > pre.size() && p.compare(0, pre.size(), pre) == 0 &&
           p[pre.size()] == '/';
  }

  static std::string escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
      if (c == '$') out += "$$";
      else out.push_back(c);
    }
    return out;
  }

  std::vector<Rule> rules_;
};

// Ignore patterns match against the full canonical path, fnmatch style,
// with '*' allowed to cross directory separators.
inline bool glob_match(const std::string& pattern, const CanonPath& path) {
  return fnmatch(pattern.c_str(), path.str().c_str(), 0) == 0;
}

inline std::optional<std::string> read_file_if_exists(const CanonPath& p) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::file_status st = fs::status(p.fs(), ec);
  if (ec || st.type() == fs::file_type::not_found) return std::nullopt;
  if (st.type() == fs::file_type::directory)
    throw Error("is a directory: " + p.str());
  std::ifstream in(p.fs(), std::ios::binary);
  if (!in) throw Error("cannot open " + p.str());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("read failed: " + p.str());
  return data;
}

inline std::string read_file(const CanonPath& p) {
  auto data = read_file_if_exists(p);
  if (!data) throw Error("no such file: " + p.str());
  return *data;
}

inline void write_file(const CanonPath& p, std::string_view contents) {
  namespace fs = std::filesystem;
  fs::path path = p.fs();
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + p.str());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  out.flush();
  if (!out) throw Error("write failed: " + p.str());
}

// Write-to-temp then rename, so readers never observe a partial file.
inline void write_file_atomic(const CanonPath& p, std::string_view contents) {
  namespace fs = std::filesystem;
  static std::atomic<unsigned> counter{0};
  std::string tmp = p.str() + ".tmp." + std::to_string(::getpid()) + "." +
                    std::to_string(counter.fetch_add(1));
  write_file(canonicalize_abs(tmp), contents);
  std::error_code ec;
  fs::rename(tmp, p.fs(), ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("rename failed for " + p.str());
  }
}

inline std::optional<ContentHash> hash_file(const CanonPath& p) {
  auto data = read_file_if_exists(p);
  if (!data) return std::nullopt;
  return ContentHash::of_bytes(*data);
}

inline FileDigest digest_file(const CanonPath& p) {
  auto h = hash_file(p);
  return h ? FileDigest::of(*h) : FileDigest::absent();
}

}  // namespace forge
