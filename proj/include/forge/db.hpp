#pragma once

// Durable store for traces and run history. One JSONL file: a header
// line, then one checksummed record per line. Records are appended as
// they are accepted; a half-written final line (a crash mid-append) is
// dropped and truncated away on the next open, while damage anywhere
// else is reported as corruption. Paths are stored in portable form so
// the same file works when the tree moves.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "forge/hazard.hpp"
#include "forge/trace.hpp"

namespace forge {

class TraceDb {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr size_t kTracesPerCommand = 8;

  TraceDb(const std::filesystem::path& file, SubstTable subst)
      : path_(file), subst_(std::move(subst)) {
    std::filesystem::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot open trace db " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw Error("trace db " + path_.string() +
                  " is locked by another build");
    }
    try {
      load();
    } catch (...) {
      ::close(fd_);
      fd_ = -1;
      throw;
    }
  }

  ~TraceDb() {
    if (fd_ >= 0) ::close(fd_);
  }

  TraceDb(const TraceDb&) = delete;
  TraceDb& operator=(const TraceDb&) = delete;

  // Persist a trace. The clearance token is minted by the hazard ledger
  // once nothing overlapping can still contradict this instance, which
  // keeps half-validated traces out of the store by construction.
  void record(const Trace& t, const HazardClearance&) {
    nlohmann::json j;
    j["type"] = "trace";
    j["trace"] = trace_to_json(t, subst_);
    append(j);
    remember(t);
  }

  // Stored traces for a command key, newest first.
  std::vector<Trace> lookup(const ContentHash& key) const {
    auto it = traces_.find(key.hex());
    if (it == traces_.end()) return {};
    return {it->second.begin(), it->second.end()};
  }

  // The command sequence a finished build actually demanded, kept as the
  // speculation candidate pool for the next build.
  void save_run(const std::vector<Command>& cmds) {
    nlohmann::json j;
    j["type"] = "run";
    j["commands"] = nlohmann::json::array();
    for (const Command& c : cmds)
      j["commands"].push_back(command_to_json(c, subst_));
    append(j);
    last_run_ = cmds;
  }

  std::optional<std::vector<Command>> load_last_run() const {
    return last_run_;
  }

  size_t trace_count() const {
    size_t n = 0;
    for (const auto& [k, v] : traces_) n += v.size();
    return n;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : traces_) out.push_back(k);
    return out;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  static std::string checksum(const nlohmann::json& body) {
    return ContentHash::of_bytes(body.dump()).hex();
  }

  void append(nlohmann::json j) {
    j["sum"] = checksum(strip_sum(j));
    std::string line = j.dump();
    line.push_back('\n');
    if (::lseek(fd_, 0, SEEK_END) < 0 ||
        ::write(fd_, line.data(), line.size()) !=
            static_cast<ssize_t>(line.size()))
      throw Error("cannot append to trace db " + path_.string());
  }

  static nlohmann::json strip_sum(nlohmann::json j) {
    j.erase("sum");
    return j;
  }

  void remember(const Trace& t) {
    auto& bucket = traces_[t.command_key.hex()];
    for (auto it = bucket.begin(); it != bucket.end(); ++it) {
      if (*it == t) {
        bucket.erase(it);
        break;
      }
    }
    bucket.push_front(t);
    while (bucket.size() > kTracesPerCommand) bucket.pop_back();
  }

  void load() {
    std::string all;
    {
      std::ifstream in(path_, std::ios::binary);
      std::ostringstream buf;
      buf << in.rdbuf();
      all = buf.str();
    }

    size_t pos = 0;
    int lineno = 0;
    bool have_header = false;
    while (pos < all.size()) {
      size_t nl = all.find('\n', pos);
      // Only the final line may be damaged: that is what an interrupted
      // append leaves behind. Damage anywhere earlier is real corruption.
      bool tail = nl == std::string::npos ||
                  all.find_first_not_of("\n", nl) == std::string::npos;
      std::string line = all.substr(
          pos, nl == std::string::npos ? std::string::npos : nl - pos);
      lineno++;
      bool bad = false;
      try {
        nlohmann::json j = nlohmann::json::parse(line);
        if (!have_header) {
          if (j.value("format_version", -1) != kFormatVersion)
            throw Error("trace db " + path_.string() +
                        ": unsupported format version");
          if (j.value("hash_algorithm", "") != "sha256")
            throw Error("trace db " + path_.string() +
                        ": unsupported hash algorithm");
          have_header = true;
        } else if (j.value("sum", "") != checksum(strip_sum(j))) {
          bad = true;
        } else {
          try {
            take(j);
          } catch (const nlohmann::json::exception&) {
            bad = true;
          }
        }
      } catch (const nlohmann::json::exception&) {
        bad = true;
      }
      if (bad) {
        if (!tail)
          throw Error("trace db " + path_.string() + " corrupt at line " +
                      std::to_string(lineno));
        truncate_at(pos);
        break;
      }
      if (nl == std::string::npos) break;
      pos = nl + 1;
    }

    if (!have_header) {
      if (::ftruncate(fd_, 0) != 0)
        throw Error("cannot initialize trace db " + path_.string());
      nlohmann::json hdr;
      hdr["format_version"] = kFormatVersion;
      hdr["hash_algorithm"] = "sha256";
      std::string line = hdr.dump();
      line.push_back('\n');
      if (::lseek(fd_, 0, SEEK_SET) < 0 ||
          ::write(fd_, line.data(), line.size()) !=
              static_cast<ssize_t>(line.size()))
        throw Error("cannot initialize trace db " + path_.string());
    }
  }

  void take(const nlohmann::json& j) {
    std::string type = j.value("type", "");
    if (type == "trace") {
      remember(trace_from_json(j.at("trace"), subst_));
    } else if (type == "run") {
      std::vector<Command> cmds;
      for (const auto& cj : j.at("commands"))
        cmds.push_back(command_from_json(cj, subst_));
      last_run_ = std::move(cmds);
    } else {
      throw nlohmann::json::other_error::create(501, "unknown record type",
                                                nullptr);
    }
  }

  void truncate_at(size_t offset) {
    if (::ftruncate(fd_, static_cast<off_t>(offset)) != 0)
      throw Error("cannot repair trace db " + path_.string());
  }

  std::filesystem::path path_;
  SubstTable subst_;
  int fd_ = -1;
  std::map<std::string, std::deque<Trace>> traces_;
  std::optional<std::vector<Command>> last_run_;
};

}  // namespace forge
