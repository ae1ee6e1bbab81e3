#pragma once

// The build engine. A script runs top to bottom; each command is adopted
// from speculation, skipped, restored from the shared cache, or executed,
// in that order of preference. Tracing feeds the hazard ledger, cleared
// traces feed the store, and the previous run's command list feeds
// speculation, which fills otherwise idle workers with commands expected
// to run later anyway.
//
// Hazard recovery: without speculation any hazard is fatal. With
// speculation, a hazard among speculated results can be tolerated (the
// results are quarantined), and anything else causes one restart of the
// whole build with speculation disabled; the rerun's verdict is final.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <thread>

#include "forge/cache.hpp"
#include "forge/db.hpp"
#include "forge/hazard.hpp"
#include "forge/script.hpp"
#include "forge/trace.hpp"

namespace forge {

enum class Disposition { Executed, Skipped, Restored, Adopted };

inline const char* to_string(Disposition d) {
  switch (d) {
    case Disposition::Executed: return "executed";
    case Disposition::Skipped: return "skipped";
    case Disposition::Restored: return "restored";
    case Disposition::Adopted: return "adopted";
  }
  return "?";
}

enum class Policy { Restart, Continue };

struct BuildOptions {
  int threads = 1;
  bool speculate = true;
  Policy policy = Policy::Restart;
  std::optional<CanonPath> shared_cache;
  std::vector<std::string> ignore_globs;
  std::vector<std::string> input_paths;  // relative to the build root
  std::vector<std::string> env_allowlist;
  // Analysis mode: hazards are recorded but never alter control flow.
  // Schedule studies need the run to finish no matter what it trips.
  bool collect_only = false;
};

struct CommandOutcome {
  std::string line;
  Disposition disposition = Disposition::Executed;
  bool ok = true;
  double ms = 0;
};

struct BuildReport {
  enum class Status { Ok, CommandFailed, FatalHazard };
  Status status = Status::Ok;
  bool restarted = false;
  std::uint64_t wall_ms = 0;
  std::vector<CommandOutcome> commands;
  std::vector<Hazard> hazards;
  std::vector<std::string> events;
  std::vector<std::string> warnings;
  std::string error;
  size_t executed = 0, skipped = 0, restored = 0, adopted = 0, speculated = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["status"] = status == Status::Ok            ? "ok"
                  : status == Status::CommandFailed ? "command-failed"
                                                    : "fatal-hazard";
    j["restarted"] = restarted;
    j["wall_ms"] = wall_ms;
    j["counts"] = {{"executed", executed},
                   {"skipped", skipped},
                   {"restored", restored},
                   {"adopted", adopted},
                   {"speculated", speculated}};
    j["commands"] = nlohmann::json::array();
    for (const auto& c : commands)
      j["commands"].push_back({{"line", c.line},
                               {"disposition", to_string(c.disposition)},
                               {"ok", c.ok},
                               {"ms", c.ms}});
    j["hazards"] = nlohmann::json::array();
    for (const auto& h : hazards)
      j["hazards"].push_back({{"kind", to_string(h.kind)},
                              {"file", h.file.str()},
                              {"first", h.first.line},
                              {"second", h.second.line},
                              {"recovery", to_string(h.recovery)}});
    j["events"] = events;
    j["warnings"] = warnings;
    if (!error.empty()) j["error"] = error;
    return j;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& c : commands) {
      out += std::string(to_string(c.disposition)) + "  " + c.line;
      if (!c.ok) out += "  [failed]";
      out += "\n";
    }
    for (const auto& h : hazards) out += h.describe() + "\n";
    for (const auto& w : warnings) out += "warning: " + w + "\n";
    out += "executed " + std::to_string(executed) + ", skipped " +
           std::to_string(skipped) + ", restored " + std::to_string(restored) +
           ", adopted " + std::to_string(adopted) + ", speculated " +
           std::to_string(speculated);
    if (restarted) out += ", restarted";
    out += "\n";
    switch (status) {
      case Status::Ok: out += "build ok\n"; break;
      case Status::CommandFailed: out += "build failed: " + error + "\n"; break;
      case Status::FatalHazard: out += "build stopped: " + error + "\n"; break;
    }
    return out;
  }
};

// Thrown to unwind the user script for the speculation-free rerun.
struct RestartRequested {
  Hazard cause;
};

class FatalHazardError : public Error {
 public:
  explicit FatalHazardError(Hazard h)
      : Error(h.describe()), hazard(std::move(h)) {}
  Hazard hazard;
};

// One step of a scheduling plan for deterministic runs: start or finish a
// named command, or force a speculation pick. Labels are command lines.
struct PlanStep {
  enum class Op { Start, Finish, Spec, ForceSpec };
  Op op;
  std::string label;
};

class Engine {
  struct Inst;

 public:
  Engine(CanonPath root, BuildOptions opts, TraceDb& db, SharedCache* cache,
         bool restarted)
      : root_(std::move(root)),
        opts_(std::move(opts)),
        db_(db),
        cache_(cache),
        restarted_(restarted),
        t0_(std::chrono::steady_clock::now()) {
    subst_.add(root_, "ROOT");
    for (const std::string& rel : opts_.input_paths)
      inputs_.insert(canonicalize(rel, root_));
    if (opts_.speculate) {
      if (auto last = db_.load_last_run()) {
        // The previous run's commands, re-keyed against today's
        // environment so lookups match what the script will demand.
        for (const Command& old : *last) {
          CmdOptions o = old.options;
          o.env_fingerprint = env_fingerprint(opts_.env_allowlist);
          pool_.push_back(make_command(old.argv, std::move(o), subst_));
        }
      }
    }
  }

  ~Engine() { join_threads(); }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const BuildOptions& options() const { return opts_; }
  const CanonPath& root() const { return root_; }

  Command script_command(const ScriptCommand& sc) {
    CmdOptions o;
    o.cwd = root_;
    o.env_fingerprint = env_fingerprint(opts_.env_allowlist);
    o.backend = sc.os ? Backend::OsProcess : Backend::MiniLang;
    o.no_cache = sc.no_cache;
    return make_command(sc.argv, std::move(o), subst_);
  }

  // Sequential script step: returns once the command's effects are in
  // place, however they got there.
  void cmd(const ScriptCommand& sc) {
    Command c = script_command(sc);
    std::unique_lock lk(mu_);
    int pos = static_cast<int>(outcomes_.size());
    outcomes_.push_back({c.line(), Disposition::Executed, true, 0});
    demanded_.push_back(c);
    auto inst = adopt_or_dispatch(lk, c, pos);
    await(lk, inst);
    settle(lk, inst, pos);
    raise_failure(lk);
  }

  // Concurrent script step: the group's members may interleave freely.
  void parallel(const std::vector<ScriptCommand>& group) {
    std::unique_lock lk(mu_);
    std::vector<std::pair<std::shared_ptr<Inst>, int>> members;
    for (const ScriptCommand& sc : group) {
      Command c = script_command(sc);
      int pos = static_cast<int>(outcomes_.size());
      outcomes_.push_back({c.line(), Disposition::Executed, true, 0});
      demanded_.push_back(c);
      members.emplace_back(adopt_or_dispatch(lk, c, pos), pos);
    }
    for (auto& [inst, pos] : members) await(lk, inst);
    for (auto& [inst, pos] : members) settle(lk, inst, pos);
    raise_failure(lk);
  }

  // Direct file accesses by the script itself. They join hazard tracking
  // as instantaneous required instances so that, for example, reading a
  // file some speculated command overwrites is caught.
  std::optional<std::string> read_file(const std::string& rel) {
    CanonPath p = canonicalize(rel, root_);
    auto content = read_file_if_exists(p);
    std::unique_lock lk(mu_);
    Command c = synthetic_command("read-file", rel);
    InstanceId iid = ledger_.begin_instance(c, Provenance::Required);
    ledger_.finish_instance(iid);
    Trace t;
    t.command_key = c.key;
    t.reads.emplace(p, content ? FileDigest::of(ContentHash::of_bytes(*content))
                               : FileDigest::absent());
    event("read-file " + rel);
    ingest(lk, iid, t, nullptr);
    return content;
  }

  void write_file(const std::string& rel, const std::string& content) {
    CanonPath p = canonicalize(rel, root_);
    forge::write_file(p, content);
    std::unique_lock lk(mu_);
    Command c = synthetic_command("write-file", rel);
    InstanceId iid = ledger_.begin_instance(c, Provenance::Required);
    ledger_.finish_instance(iid);
    Trace t;
    t.command_key = c.key;
    t.writes.emplace(p, FileDigest::of(ContentHash::of_bytes(content)));
    event("write-file " + rel);
    ingest(lk, iid, t, nullptr);
  }

  // Wraps up the attempt: waits out stray speculation, settles clearances,
  // saves the run, and renders the report.
  BuildReport finish() {
    std::unique_lock lk(mu_);
    while (running_ > 0) {
      check_flags(lk);
      cv_.wait(lk);
    }
    check_flags(lk);
    sweep(lk);
    ledger_.finalize();
    lk.unlock();
    join_threads();
    lk.lock();
    if (failed_error_.empty()) {
      db_.save_run(demanded_);
      event("saved run of " + std::to_string(demanded_.size()) + " commands");
    }
    return make_report(lk, BuildReport::Status::Ok, "");
  }

  // Report assembly for the failure paths; drains first so the tree is
  // quiet by the time the caller sees the report.
  BuildReport abort_report(BuildReport::Status status, const std::string& err) {
    std::unique_lock lk(mu_);
    stopping_ = true;
    while (running_ > 0) cv_.wait(lk);
    sweep(lk);
    ledger_.finalize();
    lk.unlock();
    join_threads();
    lk.lock();
    return make_report(lk, status, err);
  }

  // Everything observed so far, for stitching restart attempts together.
  std::vector<Hazard> hazards_so_far() {
    std::lock_guard lk(mu_);
    return hazards_;
  }
  std::vector<std::string> events_so_far() {
    std::lock_guard lk(mu_);
    return events_;
  }
  std::vector<std::string> warnings_so_far() {
    std::lock_guard lk(mu_);
    return warnings_;
  }

  // Deterministic single-threaded run of one script treated as a single
  // concurrent group, driven by an explicit schedule. Reads are sampled
  // at Start, writes land at Finish. Once the plan runs dry the rest
  // completes in a fixed order. Hazards never alter control flow here.
  BuildReport run_plan(const std::vector<ScriptCommand>& script,
                       const std::vector<PlanStep>& plan) {
    std::unique_lock lk(mu_);
    opts_.collect_only = true;  // schedules are studied, never aborted
    std::vector<Command> cmds;
    for (const ScriptCommand& sc : script) cmds.push_back(script_command(sc));
    std::vector<bool> started(cmds.size(), false);
    std::deque<OpenPair> open;
    std::set<std::string> closed_labels;
    outcomes_.resize(cmds.size());
    for (size_t i = 0; i < cmds.size(); i++)
      outcomes_[i] = {cmds[i].line(), Disposition::Executed, true, 0};

    auto find_pending = [&](const std::string& label) -> int {
      for (size_t i = 0; i < cmds.size(); i++)
        if (!started[i] && cmds[i].line() == label) return static_cast<int>(i);
      throw UsageError("plan names no pending command: " + label);
    };
    auto start_one = [&](int i) {
      started[i] = true;
      demanded_.push_back(cmds[i]);
      if (auto inst = try_adopt(lk, cmds[i], i)) {
        settle(lk, inst, i);
        closed_labels.insert(cmds[i].line());
        return;
      }
      if (auto inst = instant_path(lk, cmds[i], Provenance::Required, i)) {
        settle(lk, inst, i);
        closed_labels.insert(cmds[i].line());
        return;
      }
      open.push_back(begin_open(lk, cmds[i], Provenance::Required, i));
    };
    auto spec_one = [&](const std::string& label, bool force) {
      for (const Command& c : pool_) {
        if (c.line() != label || started_keys_.count(c.key.hex())) continue;
        if (!force && !spec_eligible(lk, c))
          throw UsageError("speculation not eligible here: " + label);
        started_keys_.insert(c.key.hex());
        speculated_++;
        event("speculate " + label);
        if (auto inst = instant_path(lk, c, Provenance::Speculated, {})) {
          closed_labels.insert(label);
          return;
        }
        open.push_back(begin_open(lk, c, Provenance::Speculated, {}));
        return;
      }
      throw UsageError("plan speculates an unknown command: " + label);
    };
    auto finish_one = [&](size_t at) {
      OpenPair o = std::move(open[at]);
      open.erase(open.begin() + static_cast<long>(at));
      finish_open(lk, o.inst, o.prep);
      if (o.inst->pos) settle(lk, o.inst, *o.inst->pos);
      closed_labels.insert(o.inst->cmd.line());
    };

    for (const PlanStep& step : plan) {
      switch (step.op) {
        case PlanStep::Op::Start: start_one(find_pending(step.label)); break;
        case PlanStep::Op::Finish: {
          bool found = false;
          for (size_t i = 0; i < open.size(); i++) {
            if (open[i].inst->cmd.line() == step.label) {
              finish_one(i);
              found = true;
              break;
            }
          }
          // A command satisfied instantly at Start has nothing left to
          // finish; its Finish step is then a harmless no-op.
          if (!found && !closed_labels.count(step.label))
            throw UsageError("plan finishes nothing in flight: " + step.label);
          break;
        }
        case PlanStep::Op::Spec: spec_one(step.label, false); break;
        case PlanStep::Op::ForceSpec: spec_one(step.label, true); break;
      }
    }
    while (!open.empty()) finish_one(0);
    for (size_t i = 0; i < cmds.size(); i++) {
      if (started[i]) continue;
      start_one(static_cast<int>(i));
      while (!open.empty()) finish_one(0);
    }
    sweep(lk);
    ledger_.finalize();
    if (failed_error_.empty()) db_.save_run(demanded_);
    return make_report(lk, BuildReport::Status::Ok, "");
  }

 private:
  struct Inst {
    Command cmd;
    Provenance prov = Provenance::Required;
    std::optional<int> pos;
    InstanceId iid = 0;
    bool done = false;
    bool failed = false;
    bool unpredictable = false;
    std::set<CanonPath> pred_writes;
    Disposition disposition = Disposition::Executed;
    std::string error;
    double ms = 0;
    std::chrono::steady_clock::time_point started_at;
  };

  Command synthetic_command(const std::string& verb, const std::string& rel) {
    CmdOptions o;
    o.cwd = root_;
    o.env_fingerprint = env_fingerprint(opts_.env_allowlist);
    o.no_cache = true;
    return make_command({verb, rel}, std::move(o), subst_);
  }

  void event(std::string e) { events_.push_back(std::move(e)); }

  // ---- dispatch and the worker ladder (pool mode) ----

  std::shared_ptr<Inst> adopt_or_dispatch(std::unique_lock<std::mutex>& lk,
                                          const Command& c, int pos) {
    if (auto inst = try_adopt(lk, c, pos)) return inst;
    waiting_required_++;
    while (running_ >= opts_.threads && !restart_ && !fatal_) cv_.wait(lk);
    waiting_required_--;
    check_flags(lk);
    return dispatch(lk, c, Provenance::Required, pos);
  }

  std::shared_ptr<Inst> try_adopt(std::unique_lock<std::mutex>& lk,
                                  const Command& c, int pos) {
    auto it = spec_by_key_.find(c.key.hex());
    if (it == spec_by_key_.end()) return nullptr;
    auto inst = it->second;
    spec_by_key_.erase(it);
    ledger_.promote(inst->iid, pos);
    inst->pos = pos;
    event("adopt " + c.line());
    (void)lk;
    return inst;
  }

  std::shared_ptr<Inst> dispatch(std::unique_lock<std::mutex>&,
                                 const Command& c, Provenance prov,
                                 std::optional<int> pos) {
    auto inst = std::make_shared<Inst>();
    inst->cmd = c;
    inst->prov = prov;
    inst->pos = pos;
    inst->started_at = std::chrono::steady_clock::now();
    inst->iid = ledger_.begin_instance(c, prov, pos);
    started_keys_.insert(c.key.hex());
    predict(inst);
    if (prov == Provenance::Speculated) {
      spec_by_key_[c.key.hex()] = inst;
      speculated_++;
      event("speculate " + c.line());
    }
    running_++;
    threads_.emplace_back([this, inst] { run_one(inst); });
    return inst;
  }

  // Expected accesses, from stored traces. A command with no history is
  // unpredictable and freezes speculation while it runs.
  void predict(const std::shared_ptr<Inst>& inst) {
    auto stored = db_.lookup(inst->cmd.key);
    if (stored.empty()) {
      inst->unpredictable = true;
      running_unpredictable_++;
      return;
    }
    for (const Trace& t : stored) {
      for (const auto& [p, d] : t.reads) touched_.insert(p);
      for (const auto& [p, d] : t.writes) {
        touched_.insert(p);
        inst->pred_writes.insert(p);
        running_pred_writes_[p]++;
      }
    }
  }

  void run_one(std::shared_ptr<Inst> inst) {
    try {
      std::vector<Trace> stored;
      {
        std::unique_lock lk(mu_);
        stored = db_.lookup(inst->cmd.key);
      }
      for (const Trace& t : stored) {
        if (!trace_matches_fs(t)) continue;
        std::unique_lock lk(mu_);
        event("skip " + inst->cmd.line());
        inst->disposition = Disposition::Skipped;
        ledger_.finish_instance(inst->iid);
        ingest(lk, inst->iid, t, inst.get());
        complete(lk, inst);
        return;
      }
      if (cache_ && !inst->cmd.options.no_cache) {
        std::vector<std::string> warns;
        auto got = cache_->fetch(inst->cmd.key, &warns);
        std::unique_lock lk(mu_);
        for (auto& w : warns) warnings_.push_back(std::move(w));
        if (got) {
          event("restore " + inst->cmd.line());
          inst->disposition = Disposition::Restored;
          ledger_.finish_instance(inst->iid);
          ingest(lk, inst->iid, *got, inst.get());
          pending_record_.push_back({inst->iid, *got, false});
          complete(lk, inst);
          return;
        }
      }
      {
        std::unique_lock lk(mu_);
        event("start " + inst->cmd.line());
      }
      PreparedCommand prep = prepare(inst->cmd);
      prep.commit();
      Trace t =
          finalize_trace(inst->cmd, prep.final_report(), opts_.ignore_globs);
      std::unique_lock lk(mu_);
      event("finish " + inst->cmd.line());
      inst->disposition = Disposition::Executed;
      ledger_.finish_instance(inst->iid);
      ingest(lk, inst->iid, t, inst.get());
      pending_record_.push_back({inst->iid, t, !inst->cmd.options.no_cache});
      complete(lk, inst);
    } catch (const std::exception& e) {
      std::unique_lock lk(mu_);
      inst->failed = true;
      inst->error = e.what();
      event("fail " + inst->cmd.line());
      fail_instance(lk, inst);
      complete(lk, inst);
    }
  }

  PreparedCommand prepare(const Command& c) {
    return c.options.backend == Backend::MiniLang
               ? prepare_minilang(c)
               : prepare_os_process(c, root_);
  }

  // A failed command still finished and may still have written; give the
  // ledger whatever is known so hazards against the debris are caught.
  void fail_instance(std::unique_lock<std::mutex>& lk,
                     const std::shared_ptr<Inst>& inst) {
    spec_by_key_.erase(inst->cmd.key.hex());
    const CmdInstance& li = ledger_.instance(inst->iid);
    if (li.finish) return;
    ledger_.finish_instance(inst->iid);
    Trace t;
    t.command_key = inst->cmd.key;
    t.ok = false;
    ingest(lk, inst->iid, t, inst.get());
  }

  bool trace_matches_fs(const Trace& t) const {
    for (const auto& [p, d] : t.reads)
      if (digest_file(p) != d) return false;
    for (const auto& [p, d] : t.writes)
      if (digest_file(p) != d) return false;
    return true;
  }

  void ingest(std::unique_lock<std::mutex>& lk, InstanceId iid, const Trace& t,
              Inst* inst) {
    std::vector<Hazard> fresh = ledger_.ingest(iid, t);
    for (const auto& [p, d] : t.reads) touched_.insert(p);
    for (const auto& [p, d] : t.writes) touched_.insert(p);
    for (Hazard& h : fresh) {
      hazards_.push_back(h);
      event("hazard " + std::string(to_string(h.kind)) + " " +
            subst_.substitute(h.file));
      if (opts_.collect_only) continue;
      Recovery r = h.recovery;
      if (r == Recovery::Continuable && opts_.policy == Policy::Restart)
        r = Recovery::Restartable;
      if (r == Recovery::Fatal && !fatal_) {
        fatal_ = true;
        fatal_hazard_ = h;
      } else if (r == Recovery::Restartable && !restart_ && !fatal_) {
        restart_ = true;
        restart_cause_ = h;
      }
    }
    (void)inst;
    sweep(lk);
  }

  // Push every cleared trace into the store; executed results also go to
  // the shared cache. Instances a hazard touched never clear and are
  // quietly dropped at the end.
  void sweep(std::unique_lock<std::mutex>&) {
    for (auto it = pending_record_.begin(); it != pending_record_.end();) {
      auto tok = ledger_.clearance(it->iid);
      if (!tok) {
        ++it;
        continue;
      }
      db_.record(it->trace, *tok);
      event("record " + subst_paths(it->trace));
      if (it->publish && cache_) {
        if (cache_->publish(it->trace, &warnings_))
          event("publish " + subst_paths(it->trace));
      }
      it = pending_record_.erase(it);
    }
  }

  std::string subst_paths(const Trace& t) const {
    std::string out;
    for (const auto& [p, d] : t.writes) {
      if (!out.empty()) out += " ";
      out += subst_.substitute(p);
    }
    return out.empty() ? "(no outputs)" : out;
  }

  void complete(std::unique_lock<std::mutex>& lk,
                const std::shared_ptr<Inst>& inst) {
    inst->ms = std::chrono::duration<double, std::milli>(
                   std::chrono::steady_clock::now() - inst->started_at)
                   .count();
    inst->done = true;
    running_--;
    if (inst->unpredictable) running_unpredictable_--;
    for (const CanonPath& p : inst->pred_writes) {
      auto it = running_pred_writes_.find(p);
      if (it != running_pred_writes_.end() && --it->second == 0)
        running_pred_writes_.erase(it);
    }
    cv_.notify_all();
    pump(lk);
  }

  void await(std::unique_lock<std::mutex>& lk,
             const std::shared_ptr<Inst>& inst) {
    pump(lk);
    while (!inst->done && !restart_ && !fatal_) cv_.wait(lk);
    check_flags(lk);
  }

  void settle(std::unique_lock<std::mutex>&, const std::shared_ptr<Inst>& inst,
              int pos) {
    outcomes_[pos].ms = inst->ms;
    if (inst->failed) {
      outcomes_[pos].ok = false;
      if (failed_error_.empty())
        failed_error_ = inst->cmd.line() + ": " + inst->error;
      return;
    }
    Disposition d = inst->disposition;
    if (inst->prov == Provenance::Speculated && d == Disposition::Executed)
      d = Disposition::Adopted;
    outcomes_[pos].disposition = d;
  }

  void raise_failure(std::unique_lock<std::mutex>& lk) {
    if (failed_error_.empty() || opts_.collect_only) return;
    stopping_ = true;
    while (running_ > 0) cv_.wait(lk);
    throw CommandError(failed_error_);
  }

  void check_flags(std::unique_lock<std::mutex>& lk) {
    if (!fatal_ && !restart_) return;
    stopping_ = true;
    while (running_ > 0) cv_.wait(lk);
    sweep(lk);
    if (fatal_) throw FatalHazardError(*fatal_hazard_);
    throw RestartRequested{*restart_cause_};
  }

  // ---- speculation (pool mode) ----

  void pump(std::unique_lock<std::mutex>& lk) {
    // With a single worker there is no idle capacity to fill, and racing
    // the script for its own slot would only blur the outcome labels.
    if (!opts_.speculate || opts_.threads <= 1) return;
    if (stopping_ || restart_ || fatal_) return;
    while (running_ < opts_.threads && waiting_required_ == 0) {
      const Command* pick = nullptr;
      for (const Command& c : pool_) {
        if (started_keys_.count(c.key.hex())) continue;
        if (!spec_eligible(lk, c)) continue;
        pick = &c;
        break;
      }
      if (!pick) return;
      dispatch(lk, *pick, Provenance::Speculated, std::nullopt);
    }
  }

  bool spec_eligible(std::unique_lock<std::mutex>&, const Command& c) {
    if (running_unpredictable_ > 0) return false;
    auto stored = db_.lookup(c.key);
    if (stored.empty()) return false;
    std::set<CanonPath> pr, pw;
    for (const Trace& t : stored) {
      for (const auto& [p, d] : t.reads) pr.insert(p);
      for (const auto& [p, d] : t.writes) pw.insert(p);
    }
    for (const CanonPath& p : pw) {
      if (touched_.count(p)) return false;
      if (inputs_.count(p)) return false;
    }
    for (const CanonPath& p : pr) {
      if (running_pred_writes_.count(p)) return false;
    }
    return true;
  }

  // ---- plan mode helpers (single thread, no slots) ----

  std::shared_ptr<Inst> instant_path(std::unique_lock<std::mutex>& lk,
                                     const Command& c, Provenance prov,
                                     std::optional<int> pos) {
    auto stored = db_.lookup(c.key);
    for (const Trace& t : stored) {
      if (!trace_matches_fs(t)) continue;
      auto inst = std::make_shared<Inst>();
      inst->cmd = c;
      inst->prov = prov;
      inst->pos = pos;
      inst->iid = ledger_.begin_instance(c, prov, pos);
      started_keys_.insert(c.key.hex());
      if (prov == Provenance::Speculated)
        spec_by_key_[c.key.hex()] = inst;
      event("skip " + c.line());
      inst->disposition = Disposition::Skipped;
      ledger_.finish_instance(inst->iid);
      ingest(lk, inst->iid, t, inst.get());
      inst->done = true;
      return inst;
    }
    if (cache_ && !c.options.no_cache) {
      std::vector<std::string> warns;
      auto got = cache_->fetch(c.key, &warns);
      for (auto& w : warns) warnings_.push_back(std::move(w));
      if (got) {
        auto inst = std::make_shared<Inst>();
        inst->cmd = c;
        inst->prov = prov;
        inst->pos = pos;
        inst->iid = ledger_.begin_instance(c, prov, pos);
        started_keys_.insert(c.key.hex());
        if (prov == Provenance::Speculated)
          spec_by_key_[c.key.hex()] = inst;
        event("restore " + c.line());
        inst->disposition = Disposition::Restored;
        ledger_.finish_instance(inst->iid);
        ingest(lk, inst->iid, *got, inst.get());
        pending_record_.push_back({inst->iid, *got, false});
        inst->done = true;
        return inst;
      }
    }
    return nullptr;
  }

  struct OpenPair {
    std::shared_ptr<Inst> inst;
    PreparedCommand prep;
  };

  OpenPair begin_open(std::unique_lock<std::mutex>& lk, const Command& c,
                      Provenance prov, std::optional<int> pos) {
    auto inst = std::make_shared<Inst>();
    inst->cmd = c;
    inst->prov = prov;
    inst->pos = pos;
    inst->started_at = std::chrono::steady_clock::now();
    inst->iid = ledger_.begin_instance(c, prov, pos);
    started_keys_.insert(c.key.hex());
    if (prov == Provenance::Speculated) spec_by_key_[c.key.hex()] = inst;
    event("start " + c.line());
    (void)lk;
    try {
      return {inst, prepare(c)};
    } catch (const std::exception& e) {
      inst->failed = true;
      inst->error = e.what();
      event("fail " + c.line());
      fail_instance(lk, inst);
      inst->done = true;
      return {inst, PreparedCommand{}};
    }
  }

  void finish_open(std::unique_lock<std::mutex>& lk,
                   const std::shared_ptr<Inst>& inst, PreparedCommand& prep) {
    if (inst->done) return;  // failed at prepare
    try {
      prep.commit();
      Trace t = finalize_trace(inst->cmd, prep.final_report(),
                               opts_.ignore_globs);
      event("finish " + inst->cmd.line());
      inst->disposition = Disposition::Executed;
      ledger_.finish_instance(inst->iid);
      ingest(lk, inst->iid, t, inst.get());
      pending_record_.push_back(
          {inst->iid, t, !inst->cmd.options.no_cache});
    } catch (const std::exception& e) {
      inst->failed = true;
      inst->error = e.what();
      event("fail " + inst->cmd.line());
      fail_instance(lk, inst);
    }
    inst->ms = std::chrono::duration<double, std::milli>(
                   std::chrono::steady_clock::now() - inst->started_at)
                   .count();
    inst->done = true;
  }

  // ---- report ----

  BuildReport make_report(std::unique_lock<std::mutex>&,
                          BuildReport::Status status, std::string err) {
    if (status == BuildReport::Status::Ok && !failed_error_.empty()) {
      status = BuildReport::Status::CommandFailed;
      err = failed_error_;
    }
    BuildReport r;
    r.status = status;
    r.restarted = restarted_;
    r.wall_ms = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - t0_)
            .count());
    r.commands = outcomes_;
    r.hazards = hazards_;
    r.events = events_;
    r.warnings = warnings_;
    r.error = err;
    r.speculated = speculated_;
    for (const auto& o : outcomes_) {
      if (!o.ok) continue;
      switch (o.disposition) {
        case Disposition::Executed: r.executed++; break;
        case Disposition::Skipped: r.skipped++; break;
        case Disposition::Restored: r.restored++; break;
        case Disposition::Adopted: r.adopted++; break;
      }
    }
    return r;
  }

  void join_threads() {
    std::vector<std::thread> mine;
    {
      std::lock_guard lk(mu_);
      mine.swap(threads_);
    }
    for (std::thread& t : mine)
      if (t.joinable()) t.join();
  }

  struct PendingRecord {
    InstanceId iid;
    Trace trace;
    bool publish;
  };

  CanonPath root_;
  BuildOptions opts_;
  TraceDb& db_;
  SharedCache* cache_;
  bool restarted_;
  std::chrono::steady_clock::time_point t0_;
  SubstTable subst_;
  Ledger ledger_;
  std::vector<Command> pool_;
  std::set<CanonPath> inputs_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  int running_ = 0;
  int waiting_required_ = 0;
  int running_unpredictable_ = 0;
  bool restart_ = false;
  bool fatal_ = false;
  bool stopping_ = false;
  std::optional<Hazard> restart_cause_;
  std::optional<Hazard> fatal_hazard_;
  std::set<std::string> started_keys_;
  std::map<std::string, std::shared_ptr<Inst>> spec_by_key_;
  std::set<CanonPath> touched_;
  std::map<CanonPath, int> running_pred_writes_;
  std::vector<std::thread> threads_;
  std::vector<PendingRecord> pending_record_;
  std::vector<Hazard> hazards_;
  std::vector<std::string> events_;
  std::vector<std::string> warnings_;
  std::vector<CommandOutcome> outcomes_;
  std::vector<Command> demanded_;
  std::string failed_error_;
  size_t speculated_ = 0;
};

// The programmatic face of the engine: a build is a function over this.
class Run {
 public:
  explicit Run(Engine& eng) : eng_(eng) {}

  void cmd(std::vector<std::string> argv, bool os = false,
           bool no_cache = false) {
    eng_.cmd(ScriptCommand{std::move(argv), os, no_cache});
  }
  void cmd(const ScriptCommand& sc) { eng_.cmd(sc); }
  void parallel(const std::vector<ScriptCommand>& group) {
    eng_.parallel(group);
  }
  void parallel_argv(const std::vector<std::vector<std::string>>& argvs) {
    std::vector<ScriptCommand> group;
    for (const auto& a : argvs) group.push_back(ScriptCommand{a});
    eng_.parallel(group);
  }
  std::optional<std::string> read_file(const std::string& rel) {
    return eng_.read_file(rel);
  }
  void write_file(const std::string& rel, const std::string& content) {
    eng_.write_file(rel, content);
  }

 private:
  Engine& eng_;
};

// Runs a build function, restarting once without speculation if a hazard
// demands it. The rerun's verdict stands.
inline BuildReport run_forge(const CanonPath& root, const BuildOptions& opts,
                             const std::function<void(Run&)>& script,
                             const std::filesystem::path& db_file = {}) {
  SubstTable subst;
  subst.add(root, "ROOT");
  std::filesystem::path dbf =
      db_file.empty() ? root.fs() / ".forge" / "trace.db" : db_file;
  TraceDb db(dbf, subst);
  std::optional<SharedCache> cache;
  if (opts.shared_cache) cache.emplace(*opts.shared_cache, subst);

  std::vector<Hazard> prior_hazards;
  std::vector<std::string> prior_events, prior_warnings;
  for (int attempt = 0;; attempt++) {
    BuildOptions eff = opts;
    bool restarted = attempt > 0;
    if (restarted) eff.speculate = false;
    Engine eng(root, eff, db, cache ? &*cache : nullptr, restarted);
    BuildReport report;
    try {
      Run run(eng);
      script(run);
      report = eng.finish();
    } catch (const RestartRequested&) {
      prior_hazards = eng.hazards_so_far();
      prior_events = eng.events_so_far();
      prior_events.push_back("restart");
      prior_warnings = eng.warnings_so_far();
      continue;
    } catch (const FatalHazardError& e) {
      report = eng.abort_report(BuildReport::Status::FatalHazard, e.what());
    } catch (const CommandError& e) {
      report = eng.abort_report(BuildReport::Status::CommandFailed, e.what());
    }
    report.hazards.insert(report.hazards.begin(), prior_hazards.begin(),
                          prior_hazards.end());
    report.events.insert(report.events.begin(), prior_events.begin(),
                         prior_events.end());
    report.warnings.insert(report.warnings.begin(), prior_warnings.begin(),
                           prior_warnings.end());
    return report;
  }
}

// Script-file front: each item in order, groups concurrently.
inline BuildReport run_forge(const CanonPath& root, const BuildOptions& opts,
                             const std::vector<ScriptItem>& items,
                             const std::filesystem::path& db_file = {}) {
  return run_forge(
      root, opts,
      [&](Run& run) {
        for (const ScriptItem& item : items) {
          if (item.parallel) {
            run.parallel(item.commands);
          } else {
            for (const ScriptCommand& sc : item.commands) run.cmd(sc);
          }
        }
      },
      db_file);
}

// Plan-driven deterministic run; no restarts, no worker pool.
inline BuildReport run_forge_plan(const CanonPath& root,
                                  const BuildOptions& opts,
                                  const std::vector<ScriptCommand>& script,
                                  const std::vector<PlanStep>& plan,
                                  const std::filesystem::path& db_file = {}) {
  SubstTable subst;
  subst.add(root, "ROOT");
  std::filesystem::path dbf =
      db_file.empty() ? root.fs() / ".forge" / "trace.db" : db_file;
  TraceDb db(dbf, subst);
  std::optional<SharedCache> cache;
  if (opts.shared_cache) cache.emplace(*opts.shared_cache, subst);
  Engine eng(root, opts, db, cache ? &*cache : nullptr, false);
  return eng.run_plan(script, plan);
}

}  // namespace forge
