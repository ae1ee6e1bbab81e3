#pragma once

// Commands and the traces their executions leave behind. A command is argv
// plus execution options, identified by a content key. Executing a command
// through a tracer yields the raw set of paths it touched; finalizing that
// report against the filesystem produces the Trace the engine stores and
// compares.
//
// Two tracer backends: a deterministic built-in command language whose
// verbs have fixed access semantics, and a best-effort OS process runner
// that infers writes by diffing a snapshot of the build root (reads are
// not observable without interception, which is out of scope).

#include <chrono>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <spawn.h>
#include <sys/wait.h>

#include "forge/fsutil.hpp"
#include "json.hpp"

extern char** environ;

namespace forge {

enum class Backend { MiniLang, OsProcess };

struct CmdOptions {
  CanonPath cwd;
  ContentHash env_fingerprint;
  Backend backend = Backend::MiniLang;
  bool no_cache = false;  // '~' script prefix: never published or fetched

  auto operator<=>(const CmdOptions&) const = default;
};

// Hash of the selected environment, so a changed PATH (by default) makes a
// command look different. Unset variables are listed bare.
inline ContentHash env_fingerprint(std::vector<std::string> allowlist) {
  std::sort(allowlist.begin(), allowlist.end());
  std::string listing;
  for (const std::string& name : allowlist) {
    const char* v = ::getenv(name.c_str());
    listing += v ? name + "=" + v : name;
    listing += "\n";
  }
  return ContentHash::of_bytes(listing);
}

struct Command {
  std::vector<std::string> argv;
  CmdOptions options;
  ContentHash key;  // skipping and lookup identity; see make_command

  // Display label; also how schedule plans name commands.
  std::string line() const {
    std::string out;
    for (const std::string& a : argv) {
      if (!out.empty()) out += " ";
      out += a;
    }
    return out;
  }

  bool operator==(const Command& o) const {
    return argv == o.argv && options == o.options && key == o.key;
  }
};

// The key hashes a canonical encoding of argv and options, with cwd in
// portable form so equal commands in different checkouts share cache
// entries. Equal (argv, options) always yields an equal key.
inline Command make_command(std::vector<std::string> argv, CmdOptions options,
                            const SubstTable& subst) {
  if (argv.empty()) throw Error("command needs a nonempty argv");
  nlohmann::json enc;
  enc["argv"] = argv;
  enc["cwd"] = subst.substitute(options.cwd);
  enc["env"] = options.env_fingerprint.hex();
  enc["backend"] = options.backend == Backend::MiniLang ? "minilang" : "os";
  enc["no_cache"] = options.no_cache;
  Command c;
  c.argv = std::move(argv);
  c.options = std::move(options);
  c.key = ContentHash::of_bytes(enc.dump());
  return c;
}

// Raw path sets reported by a tracer, before hashing. Queries are
// existence probes; removals are deletions observed by the OS backend
// (tests may also construct them directly).
struct RawAccessReport {
  std::set<CanonPath> reads;
  std::set<CanonPath> writes;
  std::set<CanonPath> queries;
  std::set<CanonPath> removals;

  void merge(const RawAccessReport& o) {
    reads.insert(o.reads.begin(), o.reads.end());
    writes.insert(o.writes.begin(), o.writes.end());
    queries.insert(o.queries.begin(), o.queries.end());
    removals.insert(o.removals.begin(), o.removals.end());
  }
};

// What one successful execution read and wrote, hashed. Read digests may
// be the absence marker (probes of missing files); write digests may be
// the absence marker too (deletions). A path never appears on both sides.
struct Trace {
  ContentHash command_key;
  std::map<CanonPath, FileDigest> reads;
  std::map<CanonPath, FileDigest> writes;
  bool ok = true;

  bool operator==(const Trace&) const = default;

  std::set<CanonPath> paths() const {
    std::set<CanonPath> out;
    for (const auto& [p, d] : reads) out.insert(p);
    for (const auto& [p, d] : writes) out.insert(p);
    return out;
  }
};

// Hash every reported path into a Trace. Queries fold into reads; a path
// both read and written is recorded as a write only; removals become
// writes carrying the absence marker. A plain write whose file is missing
// at hash time means the tracer and the filesystem disagree: hard error.
inline Trace finalize_trace(const Command& cmd, const RawAccessReport& report,
                            const std::vector<std::string>& ignore_globs = {}) {
  auto ignored = [&](const CanonPath& p) {
    for (const std::string& g : ignore_globs)
      if (glob_match(g, p)) return true;
    return false;
  };

  Trace t;
  t.command_key = cmd.key;

  std::set<CanonPath> write_side = report.writes;
  write_side.insert(report.removals.begin(), report.removals.end());

  auto add_read = [&](const CanonPath& p) {
    if (ignored(p) || write_side.count(p)) return;
    t.reads.emplace(p, digest_file(p));
  };
  for (const CanonPath& p : report.reads) add_read(p);
  for (const CanonPath& p : report.queries) add_read(p);

  for (const CanonPath& p : report.removals) {
    if (ignored(p)) continue;
    if (hash_file(p))
      throw Error("tracer reported a removal but the file exists: " + p.str());
    t.writes.emplace(p, FileDigest::absent());
  }
  for (const CanonPath& p : report.writes) {
    if (ignored(p) || report.removals.count(p)) continue;
    auto h = hash_file(p);
    if (!h)
      throw Error("traced write is missing at hash time: " + p.str() +
                  " (tracer/report inconsistency)");
    t.writes.emplace(p, FileDigest::of(*h));
  }
  return t;
}

// A command split into its read phase (already performed: inputs sampled,
// access sets known) and its pending write phase. The scripted scheduler
// runs the phases at the instance's start and finish events; the worker
// pool runs them back to back.
struct PreparedCommand {
  RawAccessReport report;
  std::function<void()> commit;
  // OS backend only: accesses inferred during commit land here.
  std::shared_ptr<RawAccessReport> deferred_report;

  RawAccessReport final_report() const {
    RawAccessReport r = report;
    if (deferred_report) r.merge(*deferred_report);
    return r;
  }
};

namespace detail {

inline void need_args(const std::vector<std::string>& g, size_t n,
                      const char* shape) {
  if (g.size() != n)
    throw CommandError(std::string(g[0]) + ": expected '" + shape + "'");
}

// Textual inclusion for compilec: lines of the form  #include "name"  are
// replaced by the named file, recursively, each file spliced at most once.
inline std::string preprocess_source(const CanonPath& file,
                                     std::set<CanonPath>& visited,
                                     const CanonPath& origin) {
  if (!visited.insert(file).second) return "";
  auto text = read_file_if_exists(file);
  if (!text)
    throw CommandError("compilec: no such file: " + file.str() +
                       (file == origin ? "" : " (included from " +
                                                  origin.str() + ")"));
  static const std::regex include_re(
      R"(^\s*#include\s*\"([^\"]*)\"\s*$)");
  std::string out;
  size_t pos = 0;
  CanonPath dir = canonicalize_abs(file.fs().parent_path().string());
  while (pos <= text->size()) {
    size_t nl = text->find('\n', pos);
    std::string line = text->substr(
        pos, nl == std::string::npos ? std::string::npos : nl - pos);
    std::smatch m;
    if (std::regex_match(line, m, include_re)) {
      out += preprocess_source(canonicalize(m[1].str(), dir), visited, file);
    } else {
      out += line;
      out += "\n";
    }
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  return out;
}

// Whitespace-insensitive canonical form: token stream joined by single
// spaces, so reformatting a source never changes the object file.
inline std::string canonical_tokens(const std::string& text) {
  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      i++;
    size_t j = i;
    while (j < text.size() &&
           !std::isspace(static_cast<unsigned char>(text[j])))
      j++;
    if (j > i) {
      if (!out.empty()) out += " ";
      out += text.substr(i, j - i);
    }
    i = j;
  }
  return out;
}

inline void prepare_verb(const std::vector<std::string>& g,
                         const CanonPath& cwd, RawAccessReport& report,
                         std::vector<std::function<void()>>& commits) {
  if (g.empty()) throw CommandError("empty verb");
  const std::string& verb = g[0];
  auto at = [&](size_t i) { return canonicalize(g[i], cwd); };

  if (verb == "write") {
    need_args(g, 3, "write FILE LITERAL");
    CanonPath f = at(1);
    std::string lit = g[2];
    report.writes.insert(f);
    commits.push_back([f, lit] { write_file(f, lit); });
  } else if (verb == "copy") {
    need_args(g, 3, "copy FROM TO");
    CanonPath a = at(1), b = at(2);
    auto data = read_file_if_exists(a);
    if (!data) throw CommandError("copy: no such file: " + a.str());
    report.reads.insert(a);
    report.writes.insert(b);
    commits.push_back([b, data = *data] { write_file(b, data); });
  } else if (verb == "concat") {
    if (g.size() < 3)
      throw CommandError("concat: expected 'concat OUT IN...'");
    CanonPath out = at(1);
    std::string joined;
    for (size_t i = 2; i < g.size(); i++) {
      CanonPath in = at(i);
      auto data = read_file_if_exists(in);
      if (!data) throw CommandError("concat: no such file: " + in.str());
      report.reads.insert(in);
      joined += *data;
    }
    report.writes.insert(out);
    commits.push_back([out, joined] { write_file(out, joined); });
  } else if (verb == "hashsum") {
    need_args(g, 3, "hashsum OUT IN");
    CanonPath out = at(1), in = at(2);
    auto data = read_file_if_exists(in);
    if (!data) throw CommandError("hashsum: no such file: " + in.str());
    report.reads.insert(in);
    report.writes.insert(out);
    std::string digest = ContentHash::of_bytes(*data).hex() + "\n";
    commits.push_back([out, digest] { write_file(out, digest); });
  } else if (verb == "append") {
    need_args(g, 3, "append FILE LITERAL");
    CanonPath f = at(1);
    auto old = read_file_if_exists(f);
    report.reads.insert(f);
    report.writes.insert(f);
    std::string next = (old ? *old : std::string()) + g[2];
    commits.push_back([f, next] { write_file(f, next); });
  } else if (verb == "exists") {
    need_args(g, 2, "exists FILE");
    report.queries.insert(at(1));
  } else if (verb == "sleep") {
    need_args(g, 2, "sleep MILLIS");
    int ms;
    try {
      ms = std::stoi(g[1]);
    } catch (const std::exception&) {
      throw CommandError("sleep: bad duration: " + g[1]);
    }
    if (ms < 0) throw CommandError("sleep: bad duration: " + g[1]);
    commits.push_back(
        [ms] { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); });
  } else if (verb == "compilec") {
    need_args(g, 3, "compilec OUT IN");
    CanonPath out = at(1), in = at(2);
    std::set<CanonPath> visited;
    std::string pre = preprocess_source(in, visited, in);
    for (const CanonPath& p : visited) report.reads.insert(p);
    report.writes.insert(out);
    std::string obj = ContentHash::of_bytes(canonical_tokens(pre)).hex() + "\n";
    commits.push_back([out, obj] { write_file(out, obj); });
  } else {
    throw CommandError("unknown verb: " + verb);
  }
}

}  // namespace detail

// Read phase of a built-in command: samples every input, resolves include
// closures, and returns the full access report plus a pending commit.
// Commands may chain verbs with ";" (one command, one merged access set).
inline PreparedCommand prepare_minilang(const Command& cmd) {
  std::vector<std::vector<std::string>> groups(1);
  for (const std::string& tok : cmd.argv) {
    if (tok == ";")
      groups.emplace_back();
    else
      groups.back().push_back(tok);
  }
  PreparedCommand out;
  std::vector<std::function<void()>> commits;
  for (const auto& g : groups) {
    if (g.empty()) throw CommandError("empty verb in: " + cmd.line());
    detail::prepare_verb(g, cmd.options.cwd, out.report, commits);
  }
  out.commit = [commits = std::move(commits)] {
    for (const auto& c : commits) c();
  };
  return out;
}

namespace detail {

// Content snapshot of the build root, minus the trace store.
inline std::map<CanonPath, ContentHash> snapshot_tree(const CanonPath& root) {
  namespace fs = std::filesystem;
  std::map<CanonPath, ContentHash> out;
  if (!fs::exists(root.fs())) return out;
  auto it = fs::recursive_directory_iterator(
      root.fs(), fs::directory_options::skip_permission_denied);
  for (auto end = fs::end(it); it != end; ++it) {
    if (it->is_directory() && it->path().filename() == ".forge") {
      it.disable_recursion_pending();
      continue;
    }
    if (!it->is_regular_file()) continue;
    CanonPath p = canonicalize_abs(it->path().string());
    if (auto h = hash_file(p)) out.emplace(p, *h);
  }
  return out;
}

inline std::string run_process(const Command& cmd) {
  int fds[2];
  if (pipe(fds) != 0) throw Error("pipe failed");
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, fds[1], 1);
  posix_spawn_file_actions_adddup2(&fa, fds[1], 2);
  posix_spawn_file_actions_addclose(&fa, fds[0]);
  posix_spawn_file_actions_addchdir_np(&fa, cmd.options.cwd.str().c_str());

  std::vector<char*> argv;
  for (const std::string& a : cmd.argv)
    argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);

  pid_t pid;
  int rc = posix_spawnp(&pid, argv[0], &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  close(fds[1]);
  if (rc != 0) {
    close(fds[0]);
    throw CommandError("cannot spawn " + cmd.line() + ": " + strerror(rc));
  }
  std::string output;
  char buf[4096];
  ssize_t n;
  while ((n = read(fds[0], buf, sizeof buf)) > 0) output.append(buf, n);
  close(fds[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    std::string why = WIFEXITED(status)
                          ? "exit " + std::to_string(WEXITSTATUS(status))
                          : "killed by signal";
    throw CommandError("command failed (" + why + "): " + cmd.line() +
                       (output.empty() ? "" : "\n" + output));
  }
  return output;
}

}  // namespace detail

// OS-process backend: run the command for real and infer accesses from a
// before/after diff of the build root. Writes and removals are detected;
// reads are not.
inline PreparedCommand prepare_os_process(const Command& cmd,
                                          const CanonPath& fs_root) {
  PreparedCommand out;
  auto before = detail::snapshot_tree(fs_root);
  // The real work happens in a second phase so that the scripted scheduler
  // can place it at the finish event; the diff is folded into the report
  // via the shared state below.
  auto report = std::make_shared<RawAccessReport>();
  out.commit = [cmd, fs_root, before = std::move(before), report] {
    auto diff = [&] {
      auto after = detail::snapshot_tree(fs_root);
      for (const auto& [p, h] : after) {
        auto old = before.find(p);
        if (old == before.end() || old->second != h) report->writes.insert(p);
      }
      for (const auto& [p, h] : before) {
        if (!after.count(p)) report->removals.insert(p);
      }
    };
    try {
      detail::run_process(cmd);
    } catch (...) {
      // A failing command may still have written; those writes matter
      // for hazard detection.
      diff();
      throw;
    }
    diff();
  };
  // Caller reads the report only after commit; expose the shared slot.
  out.deferred_report = report;
  return out;
}

// Convenience for one-shot execution (worker pool, trace-one).
inline RawAccessReport execute_traced(const Command& cmd,
                                      const CanonPath& fs_root) {
  if (cmd.options.backend == Backend::MiniLang) {
    PreparedCommand p = prepare_minilang(cmd);
    p.commit();
    return p.report;
  }
  PreparedCommand p = prepare_os_process(cmd, fs_root);
  p.commit();
  return *p.deferred_report;
}

// Portable serialization. Paths go through the substitution table in both
// directions; machine-local absolute paths never reach disk.

inline nlohmann::json trace_to_json(const Trace& t, const SubstTable& subst) {
  nlohmann::json j;
  j["key"] = t.command_key.hex();
  j["ok"] = t.ok;
  auto side = [&](const std::map<CanonPath, FileDigest>& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [p, d] : m)
      arr.push_back({subst.substitute(p), d.text()});
    return arr;
  };
  j["reads"] = side(t.reads);
  j["writes"] = side(t.writes);
  return j;
}

inline Trace trace_from_json(const nlohmann::json& j, const SubstTable& subst) {
  Trace t;
  auto key = ContentHash::from_hex(j.at("key").get<std::string>());
  if (!key) throw Error("bad trace key in stored record");
  t.command_key = *key;
  t.ok = j.at("ok").get<bool>();
  auto side = [&](const nlohmann::json& arr) {
    std::map<CanonPath, FileDigest> m;
    for (const auto& e : arr) {
      m.emplace(subst.expand(e.at(0).get<std::string>()),
                FileDigest::from_text(e.at(1).get<std::string>()));
    }
    return m;
  };
  t.reads = side(j.at("reads"));
  t.writes = side(j.at("writes"));
  return t;
}

inline nlohmann::json command_to_json(const Command& c,
                                      const SubstTable& subst) {
  nlohmann::json j;
  j["argv"] = c.argv;
  j["cwd"] = subst.substitute(c.options.cwd);
  j["env"] = c.options.env_fingerprint.hex();
  j["backend"] = c.options.backend == Backend::MiniLang ? "minilang" : "os";
  j["no_cache"] = c.options.no_cache;
  j["key"] = c.key.hex();
  return j;
}

inline Command command_from_json(const nlohmann::json& j,
                                 const SubstTable& subst) {
  Command c;
  c.argv = j.at("argv").get<std::vector<std::string>>();
  c.options.cwd = subst.expand(j.at("cwd").get<std::string>());
  auto env = ContentHash::from_hex(j.at("env").get<std::string>());
  auto key = ContentHash::from_hex(j.at("key").get<std::string>());
  if (!env || !key) throw Error("bad hash in stored command record");
  c.options.env_fingerprint = *env;
  c.options.backend = j.at("backend").get<std::string>() == "os"
                          ? Backend::OsProcess
                          : Backend::MiniLang;
  c.options.no_cache = j.at("no_cache").get<bool>();
  c.key = *key;
  return c;
}

}  // namespace forge
