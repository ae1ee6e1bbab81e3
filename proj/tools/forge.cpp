#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "forge/oracle.hpp"

namespace {

namespace fs = std::filesystem;

int status_code(forge::BuildReport::Status s) {
  switch (s) {
    case forge::BuildReport::Status::Ok: return 0;
    case forge::BuildReport::Status::CommandFailed: return 1;
    case forge::BuildReport::Status::FatalHazard: return 2;
  }
  return 3;
}

forge::CanonPath build_root() {
  return forge::canonicalize_abs(fs::current_path().string());
}

std::optional<forge::CanonPath> cache_dir(const std::string& flag,
                                          const forge::CanonPath& root) {
  if (!flag.empty()) return forge::canonicalize(flag, root);
  if (const char* env = std::getenv("FORGE_CACHE"); env && *env)
    return forge::canonicalize(env, root);
  return std::nullopt;
}

struct RunFlags {
  std::string script;
  int threads = 1;
  bool no_speculate = false;
  std::string policy = "restart";
  std::string db;
  std::string cache;
  std::vector<std::string> ignores;
  std::vector<std::string> inputs;
  std::string report = "text";
};

int cmd_run(const RunFlags& f) {
  forge::CanonPath root = build_root();
  auto text = forge::read_file_if_exists(forge::canonicalize(f.script, root));
  if (!text) throw forge::UsageError("cannot read script: " + f.script);
  std::vector<forge::ScriptItem> items = forge::parse_script(*text);

  forge::BuildOptions o;
  o.threads = f.threads;
  o.speculate = !f.no_speculate;
  o.policy = f.policy == "continue" ? forge::Policy::Continue
                                    : forge::Policy::Restart;
  o.shared_cache = cache_dir(f.cache, root);
  o.ignore_globs = f.ignores;
  o.input_paths = f.inputs;

  forge::BuildReport rep =
      forge::run_forge(root, o, items, f.db.empty() ? fs::path{} : fs::path(f.db));
  if (f.report == "json")
    std::cout << rep.to_json().dump(2) << "\n";
  else
    std::cout << rep.to_text();
  return status_code(rep.status);
}

int cmd_trace_one(const std::vector<std::string>& argv, bool os,
                  const std::string& report) {
  forge::CanonPath root = build_root();
  forge::SubstTable subst;
  subst.add(root, "ROOT");
  forge::CmdOptions copts;
  copts.cwd = root;
  copts.env_fingerprint = forge::env_fingerprint({});
  copts.backend = os ? forge::Backend::OsProcess : forge::Backend::MiniLang;
  forge::Command cmd = forge::make_command(argv, std::move(copts), subst);
  forge::RawAccessReport raw = forge::execute_traced(cmd, root);
  forge::Trace t = forge::finalize_trace(cmd, raw, {});
  if (report == "json") {
    std::cout << forge::trace_to_json(t, subst).dump(2) << "\n";
  } else {
    std::cout << cmd.line() << "\n";
    for (const auto& [p, d] : t.reads)
      std::cout << "  read  " << subst.substitute(p) << " " << d.text() << "\n";
    for (const auto& [p, d] : t.writes)
      std::cout << "  write " << subst.substitute(p) << " " << d.text() << "\n";
  }
  return 0;
}

int cmd_db_show(const std::string& db, const std::string& report) {
  forge::CanonPath root = build_root();
  fs::path path = db.empty() ? root.fs() / ".forge" / "trace.db" : fs::path(db);
  if (!fs::exists(path)) {
    std::cout << "no trace database at " << path.string() << "\n";
    return 0;
  }
  forge::SubstTable subst;
  subst.add(root, "ROOT");
  forge::TraceDb tdb(path, subst);
  auto run = tdb.load_last_run();
  if (report == "json") {
    nlohmann::json j;
    j["traces"] = tdb.trace_count();
    j["commands"] = nlohmann::json::array();
    if (run)
      for (const forge::Command& c : *run) {
        nlohmann::json e;
        e["line"] = c.line();
        e["stored_traces"] = tdb.lookup(c.key).size();
        j["commands"].push_back(e);
      }
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cout << tdb.trace_count() << " stored traces across "
            << tdb.keys().size() << " commands\n";
  if (run) {
    std::cout << "last run:\n";
    for (const forge::Command& c : *run) {
      auto traces = tdb.lookup(c.key);
      std::cout << "  " << c.line() << "  (" << traces.size() << " trace"
                << (traces.size() == 1 ? "" : "s");
      if (!traces.empty()) {
        size_t reads = traces.front().reads.size();
        size_t writes = traces.front().writes.size();
        std::cout << ", latest reads " << reads << " writes " << writes;
      }
      std::cout << ")\n";
    }
  }
  return 0;
}

int cmd_cache_gc(const std::string& flag) {
  forge::CanonPath root = build_root();
  auto dir = cache_dir(flag, root);
  if (!dir) throw forge::UsageError("no cache directory given (flag or FORGE_CACHE)");
  forge::SubstTable subst;
  subst.add(root, "ROOT");
  forge::SharedCache cache(*dir, subst);
  std::cout << "cache holds " << cache.blob_count() << " blobs and "
            << cache.entry_count() << " entries; nothing collected\n";
  return 0;
}

struct OracleFlags {
  unsigned seed = 1;
  int scripts = 100;
  int max_cmds = 4;
  int n_files = 4;
  bool engine = false;
  int engine_schedules = 2;
};

int cmd_oracle(const OracleFlags& f) {
  forge::oracle::CorpusOptions o;
  o.seed = f.seed;
  o.scripts = f.scripts;
  o.max_cmds = f.max_cmds;
  o.n_files = f.n_files;
  o.engine_agreement = f.engine;
  o.engine_schedules = f.engine_schedules;
  forge::oracle::ClaimsReport rep = forge::oracle::check_claims(o);
  std::cout << rep.summary() << "\n";
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forge: runs a command script, skipping what is already done"};
  app.require_subcommand(1);

  RunFlags rf;
  CLI::App* run = app.add_subcommand("run", "execute a build script");
  run->add_option("script", rf.script, "script file")->required();
  run->add_option("--threads", rf.threads, "worker count")
      ->check(CLI::PositiveNumber);
  run->add_flag("--no-speculate", rf.no_speculate,
                "never run ahead of the script");
  run->add_option("--policy", rf.policy, "hazard policy")
      ->check(CLI::IsMember({"restart", "continue"}));
  run->add_option("--db", rf.db, "trace database path");
  run->add_option("--shared-cache", rf.cache, "shared cache directory");
  run->add_option("--ignore", rf.ignores, "glob of paths to leave untracked");
  run->add_option("--input", rf.inputs, "declared source path");
  run->add_option("--report", rf.report, "report format")
      ->check(CLI::IsMember({"text", "json"}));

  std::vector<std::string> tokens;
  bool trace_os = false;
  std::string trace_report = "text";
  CLI::App* trace = app.add_subcommand(
      "trace-one", "run one command and show its accesses");
  trace->add_option("tokens", tokens, "command tokens")->required();
  trace->add_flag("--os", trace_os, "run as an OS process");
  trace->add_option("--report", trace_report, "report format")
      ->check(CLI::IsMember({"text", "json"}));

  std::string db_path, db_report = "text";
  CLI::App* dbshow = app.add_subcommand("db-show", "inspect stored traces");
  dbshow->add_option("--db", db_path, "trace database path");
  dbshow->add_option("--report", db_report, "report format")
      ->check(CLI::IsMember({"text", "json"}));

  std::string gc_cache;
  CLI::App* gc = app.add_subcommand("cache-gc-noop",
                                    "report shared cache size (collects nothing)");
  gc->add_option("--shared-cache", gc_cache, "shared cache directory");

  OracleFlags of;
  CLI::App* orc = app.add_subcommand("oracle",
                                     "check the engine's claims on random scripts");
  orc->add_option("--seed", of.seed, "corpus seed");
  orc->add_option("--scripts", of.scripts, "scripts to generate");
  orc->add_option("--max-cmds", of.max_cmds, "commands per script")
      ->check(CLI::Range(2, 5));
  orc->add_option("--files", of.n_files, "file universe per script")
      ->check(CLI::Range(2, 6));
  orc->add_flag("--engine", of.engine, "replay schedules through the engine");
  orc->add_option("--engine-schedules", of.engine_schedules,
                  "replays per script");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }

  try {
    if (run->parsed()) return cmd_run(rf);
    if (trace->parsed()) return cmd_trace_one(tokens, trace_os, trace_report);
    if (dbshow->parsed()) return cmd_db_show(db_path, db_report);
    if (gc->parsed()) return cmd_cache_gc(gc_cache);
    if (orc->parsed()) return cmd_oracle(of);
  } catch (const forge::UsageError& e) {
    std::cerr << "forge: " << e.what() << "\n";
    return 3;
  } catch (const forge::CommandError& e) {
    std::cerr << "forge: " << e.what() << "\n";
    return 1;
  } catch (const forge::Error& e) {
    std::cerr << "forge: " << e.what() << "\n";
    return 3;
  }
  return 3;
}
