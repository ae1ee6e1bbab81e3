#pragma once

// A miniature, fully deterministic model of the build engine: commands
// with declared read and write sets over a handful of small files, driven
// through every legal interleaving by brute force. Each schedule is
// replayed symbolically (reads sampled at start, writes landing at
// finish) and hazards are recomputed from first principles, so the model
// cross-checks the real ledger and engine rather than reusing them.

#include <cstdlib>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "forge/engine.hpp"

namespace forge::oracle {

inline std::string file_name(int id) {
  return "f" + std::to_string(id) + ".txt";
}

// ---- symbolic commands ----
//
// Contents are decimal digit strings (and hex digests once hashed), so
// every operation maps byte for byte onto a built-in verb: Const onto
// write, Copy onto copy, Concat onto concat, Hash onto hashsum.

enum class SymOp { Const, Copy, Concat, Hash };

struct SymCommand {
  SymOp op = SymOp::Const;
  std::vector<int> reads;  // sorted file ids, never containing the write
  int write = 0;
  std::string value;  // Const payload
  bool speculated = false;

  std::vector<std::string> argv() const {
    switch (op) {
      case SymOp::Const: return {"write", file_name(write), value};
      case SymOp::Copy: return {"copy", file_name(reads.at(0)),
                                file_name(write)};
      case SymOp::Concat: {
        std::vector<std::string> a{"concat", file_name(write)};
        for (int r : reads) a.push_back(file_name(r));
        return a;
      }
      case SymOp::Hash: return {"hashsum", file_name(write),
                                file_name(reads.at(0))};
    }
    throw Error("bad symbolic op");
  }

  std::string line() const {
    std::string out;
    for (const std::string& t : argv()) {
      if (!out.empty()) out += " ";
      out += t;
    }
    return out;
  }

  std::string apply(const std::vector<std::string>& in) const {
    switch (op) {
      case SymOp::Const: return value;
      case SymOp::Copy: return in.at(0);
      case SymOp::Concat: {
        std::string joined;
        for (const std::string& s : in) joined += s;
        return joined;
      }
      case SymOp::Hash: return ContentHash::of_bytes(in.at(0)).hex() + "\n";
    }
    throw Error("bad symbolic op");
  }
};

// ---- schedules ----

struct SymEvent {
  int inst;
  bool start;
};
using Schedule = std::vector<SymEvent>;

inline Schedule sequential_schedule(int n) {
  Schedule s;
  for (int i = 0; i < n; i++) {
    s.push_back({i, true});
    s.push_back({i, false});
  }
  return s;
}

inline std::string schedule_text(const Schedule& s) {
  std::string out;
  for (const SymEvent& e : s) {
    if (!out.empty()) out += " ";
    out += (e.start ? "S" : "F") + std::to_string(e.inst);
  }
  return out;
}

// The symmetry key: which order instances started in, and which order
// they finished in. Distinct schedules can share a profile.
inline std::pair<std::vector<int>, std::vector<int>> start_finish_profile(
    const Schedule& s) {
  std::vector<int> starts, finishes;
  for (const SymEvent& e : s) (e.start ? starts : finishes).push_back(e.inst);
  return {starts, finishes};
}

// ---- symbolic execution ----

struct SymHazard {
  HazardKind kind;
  int file;
  int lo;  // lower instance index of the pair
  int hi;

  friend bool operator<(const SymHazard& a, const SymHazard& b) {
    return std::tie(a.kind, a.file, a.lo, a.hi) <
           std::tie(b.kind, b.file, b.lo, b.hi);
  }
  friend bool operator==(const SymHazard& a, const SymHazard& b) {
    return std::tie(a.kind, a.file, a.lo, a.hi) ==
           std::tie(b.kind, b.file, b.lo, b.hi);
  }
};

inline std::string to_string(const SymHazard& h) {
  return std::string(to_string(h.kind)) + " " + file_name(h.file) + " (" +
         std::to_string(h.lo) + "," + std::to_string(h.hi) + ")";
}

using SymState = std::map<int, std::string>;

struct SymResult {
  SymState state;
  std::set<SymHazard> hazards;
};

inline SymState default_init(int n_files) {
  SymState s;
  for (int f = 0; f < n_files; f++) s[f] = std::to_string(f + 1);
  return s;
}

inline SymResult run_symbolic(const std::vector<SymCommand>& cmds,
                              const Schedule& sched, const SymState& init,
                              int threads) {
  int n = static_cast<int>(cmds.size());
  std::vector<int> start_tick(n, -1), finish_tick(n, -1);
  std::vector<std::vector<std::string>> sampled(n);
  SymState state = init;
  int open = 0;

  int tick = 0;
  for (const SymEvent& e : sched) {
    tick++;
    if (e.inst < 0 || e.inst >= n)
      throw UsageError("schedule names instance " + std::to_string(e.inst));
    if (e.start) {
      if (start_tick[e.inst] >= 0)
        throw UsageError("instance started twice: " + std::to_string(e.inst));
      if (++open > threads) throw UsageError("schedule exceeds thread limit");
      start_tick[e.inst] = tick;
      for (int r : cmds[e.inst].reads) {
        auto it = state.find(r);
        if (it == state.end())
          throw UsageError("read of an unseeded file: " + file_name(r));
        sampled[e.inst].push_back(it->second);
      }
    } else {
      if (start_tick[e.inst] < 0)
        throw UsageError("instance finished before starting: " +
                         std::to_string(e.inst));
      if (finish_tick[e.inst] >= 0)
        throw UsageError("instance finished twice: " + std::to_string(e.inst));
      open--;
      finish_tick[e.inst] = tick;
      state[cmds[e.inst].write] = cmds[e.inst].apply(sampled[e.inst]);
    }
  }
  for (int i = 0; i < n; i++)
    if (finish_tick[i] < 0)
      throw UsageError("schedule never finishes instance " +
                       std::to_string(i));

  // Hazards, recomputed pairwise. A write pair always collides; a read
  // against a write collides unless the write finished strictly before
  // the read started, in which case only an unpromoted speculated writer
  // feeding a required reader is still wrong.
  SymResult out;
  out.state = std::move(state);
  std::map<int, std::vector<int>> writers, readers;
  for (int i = 0; i < n; i++) {
    writers[cmds[i].write].push_back(i);
    for (int r : cmds[i].reads) readers[r].push_back(i);
  }
  auto norm = [&](HazardKind k, int f, int a, int b) {
    out.hazards.insert({k, f, std::min(a, b), std::max(a, b)});
  };
  for (const auto& [f, ws] : writers) {
    for (size_t x = 0; x < ws.size(); x++)
      for (size_t y = x + 1; y < ws.size(); y++)
        norm(HazardKind::WriteWrite, f, ws[x], ws[y]);
    auto rit = readers.find(f);
    if (rit == readers.end()) continue;
    for (int r : rit->second) {
      for (int w : ws) {
        if (finish_tick[w] < start_tick[r]) {
          if (cmds[w].speculated && !cmds[r].speculated)
            norm(HazardKind::SpeculativeWriteRead, f, w, r);
        } else {
          norm(HazardKind::ReadWrite, f, r, w);
        }
      }
    }
  }
  return out;
}

// ---- exhaustive schedule enumeration ----

namespace detail {

template <class Fn>
inline long long schedules_rec(int n, const std::vector<bool>& spec,
                               bool required_sequential, int threads,
                               long long bound, Schedule& cur,
                               std::vector<int>& phase, int open,
                               long long count, Fn&& fn) {
  // phase: 0 = unstarted, 1 = open, 2 = finished
  bool done = true;
  for (int i = 0; i < n; i++)
    if (phase[i] != 2) done = false;
  if (done) {
    if (++count > bound)
      throw UsageError("schedule enumeration exceeds the bound of " +
                       std::to_string(bound));
    fn(const_cast<const Schedule&>(cur));
    return count;
  }
  for (int i = 0; i < n; i++) {
    if (phase[i] != 1) continue;
    phase[i] = 2;
    cur.push_back({i, false});
    count = schedules_rec(n, spec, required_sequential, threads, bound, cur,
                          phase, open - 1, count, fn);
    cur.pop_back();
    phase[i] = 1;
  }
  if (open < threads) {
    for (int i = 0; i < n; i++) {
      if (phase[i] != 0) continue;
      if (required_sequential && !spec[i]) {
        bool prior_done = true;
        for (int j = 0; j < i; j++)
          if (!spec[j] && phase[j] != 2) prior_done = false;
        if (!prior_done) continue;
      }
      phase[i] = 1;
      cur.push_back({i, true});
      count = schedules_rec(n, spec, required_sequential, threads, bound, cur,
                            phase, open + 1, count, fn);
      cur.pop_back();
      phase[i] = 0;
    }
  }
  return count;
}

}  // namespace detail

// Visits every legal schedule of n instances. When required_sequential
// is set, non-speculated instances may only start in index order after
// all earlier ones finished; speculated instances roam freely.
template <class Fn>
inline long long for_each_schedule(const std::vector<bool>& speculated,
                                   bool required_sequential, int threads,
                                   long long bound, Fn&& fn) {
  int n = static_cast<int>(speculated.size());
  if (n > 6) throw UsageError("schedule enumeration is capped at 6 commands");
  if (threads < 1) throw UsageError("schedule enumeration needs a thread");
  Schedule cur;
  std::vector<int> phase(n, 0);
  return detail::schedules_rec(n, speculated, required_sequential, threads,
                               bound, cur, phase, 0, 0,
                               std::forward<Fn>(fn));
}

inline std::vector<Schedule> enumerate_schedules(int n_cmds, int threads,
                                                 long long bound) {
  std::vector<Schedule> out;
  for_each_schedule(std::vector<bool>(n_cmds, false), false, threads, bound,
                    [&](const Schedule& s) { out.push_back(s); });
  return out;
}

// ---- script generators ----

struct SymScript {
  std::vector<SymCommand> cmds;
  int n_files = 0;  // file universe the script may touch
};

namespace detail {

inline int pick(std::mt19937& rng, int n) {
  return static_cast<int>(rng() % static_cast<unsigned>(n));
}

inline SymCommand make_cmd(std::mt19937& rng, int write,
                           const std::vector<int>& readable, int salt) {
  SymCommand c;
  c.write = write;
  int choices = readable.empty() ? 1 : (readable.size() >= 2 ? 4 : 3);
  switch (pick(rng, choices)) {
    case 0:
      c.op = SymOp::Const;
      c.value = std::to_string(10 + salt);
      break;
    case 1:
      c.op = SymOp::Copy;
      c.reads = {readable[pick(rng, static_cast<int>(readable.size()))]};
      break;
    case 2:
      c.op = SymOp::Hash;
      c.reads = {readable[pick(rng, static_cast<int>(readable.size()))]};
      break;
    default: {
      c.op = SymOp::Concat;
      int a = pick(rng, static_cast<int>(readable.size()));
      int b = pick(rng, static_cast<int>(readable.size() - 1));
      if (b >= a) b++;
      c.reads = {readable[a], readable[b]};
      std::sort(c.reads.begin(), c.reads.end());
      break;
    }
  }
  return c;
}

}  // namespace detail

// A script whose sequential run is hazard free: one writer per file, and
// nothing reads a file that a later command writes.
inline SymScript gen_hazard_free(std::mt19937& rng, int max_cmds,
                                 int n_files) {
  int n = 2 + detail::pick(rng, std::max(1, max_cmds - 1));
  n = std::min({n, max_cmds, n_files});
  std::vector<int> files(n_files);
  for (int f = 0; f < n_files; f++) files[f] = f;
  for (int f = n_files - 1; f > 0; f--)
    std::swap(files[f], files[detail::pick(rng, f + 1)]);
  std::vector<int> writes(files.begin(), files.begin() + n);

  SymScript s;
  s.n_files = n_files;
  for (int k = 0; k < n; k++) {
    std::vector<int> readable;
    for (int f = 0; f < n_files; f++) {
      bool future = false;
      for (int j = k; j < n; j++)
        if (writes[j] == f) future = true;
      if (!future) readable.push_back(f);
    }
    s.cmds.push_back(detail::make_cmd(rng, writes[k], readable, k));
  }
  return s;
}

// A hazard-free script with one deliberate defect: either an early read
// of a later command's output, or a second writer of the same file.
inline SymScript gen_hazardous(std::mt19937& rng, int max_cmds, int n_files) {
  SymScript s = gen_hazard_free(rng, std::max(2, max_cmds), n_files);
  int n = static_cast<int>(s.cmds.size());
  int i = detail::pick(rng, n - 1);
  int j = i + 1 + detail::pick(rng, n - i - 1);
  if (detail::pick(rng, 2) == 0) {
    // read-then-write: command i now also consumes j's output
    SymCommand& c = s.cmds[i];
    c.op = SymOp::Concat;
    c.reads.push_back(s.cmds[j].write);
    std::sort(c.reads.begin(), c.reads.end());
    c.reads.erase(std::unique(c.reads.begin(), c.reads.end()), c.reads.end());
    c.value.clear();
  } else {
    // double write: command i now clobbers j's output
    SymCommand& c = s.cmds[i];
    c.op = SymOp::Const;
    c.reads.clear();
    c.value = std::to_string(40 + i);
    c.write = s.cmds[j].write;
  }
  return s;
}

// Speculated commands confined to a private file zone, independent of
// each other, for the "appending disjoint work changes nothing" claim.
inline std::vector<SymCommand> gen_spec_tail(std::mt19937& rng, int zone_lo,
                                             int count) {
  std::vector<SymCommand> tail;
  for (int k = 0; k < count; k++) {
    SymCommand c;
    c.speculated = true;
    c.write = zone_lo + k;
    if (count == 1 && detail::pick(rng, 2) == 0) {
      c.op = detail::pick(rng, 2) == 0 ? SymOp::Copy : SymOp::Hash;
      c.reads = {zone_lo + 1};
    } else {
      c.op = SymOp::Const;
      c.value = std::to_string(70 + k);
    }
    tail.push_back(c);
  }
  return tail;
}

// Speculated commands over the full file range, free to collide with the
// script: the raw material for hazard-agreement checks. Internally the
// block stays sequentially clean so it can seed a previous-run database.
inline std::vector<SymCommand> gen_spec_block(std::mt19937& rng,
                                              const SymScript& s, int count,
                                              int universe) {
  std::set<std::string> lines;
  for (const SymCommand& c : s.cmds) lines.insert(c.line());
  std::vector<SymCommand> block;
  std::set<int> block_writes;
  std::set<int> block_reads;
  for (int k = 0; k < count; k++) {
    for (int attempt = 0; attempt < 50; attempt++) {
      int w = detail::pick(rng, universe);
      // Writing a file an earlier block command read or wrote would make
      // the block hazardous on its own; it has to seed a previous run
      // cleanly.
      if (block_writes.count(w) || block_reads.count(w)) continue;
      std::vector<int> readable;
      for (int f = 0; f < universe; f++)
        if (f != w && !block_writes.count(f)) readable.push_back(f);
      SymCommand c = detail::make_cmd(rng, w, readable, 80 + k);
      c.speculated = true;
      if (!lines.insert(c.line()).second) continue;
      block_writes.insert(w);
      block_reads.insert(c.reads.begin(), c.reads.end());
      block.push_back(c);
      break;
    }
  }
  return block;
}

// ---- realization against the real engine ----

namespace detail {

class ScratchDir {
 public:
  ScratchDir() {
    std::string t =
        (std::filesystem::temp_directory_path() / "forge-oracle-XXXXXX")
            .string();
    if (!::mkdtemp(t.data())) throw Error("mkdtemp failed");
    root_ = canonicalize_abs(t);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(root_.fs(), ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const CanonPath& canon() const { return root_; }

 private:
  CanonPath root_;
};

inline void seed_files(const CanonPath& root, const SymState& init) {
  for (const auto& [f, v] : init)
    write_file(canonicalize(file_name(f), root), v);
}

inline int parse_file_id(const CanonPath& p) {
  std::string base = p.fs().filename().string();
  if (base.size() < 6 || base[0] != 'f' || base.substr(base.size() - 4) != ".txt")
    return -1;
  return std::atoi(base.substr(1, base.size() - 5).c_str());
}

}  // namespace detail

// Executes the speculative block once so its traces and run record exist,
// then hands back the database bytes for replay in fresh trees.
inline std::string seed_previous_run(const std::vector<SymCommand>& block,
                                     const SymState& init) {
  detail::ScratchDir a;
  detail::seed_files(a.canon(), init);
  std::vector<ScriptItem> items;
  for (const SymCommand& c : block)
    items.push_back({{ScriptCommand{c.argv()}}, false});
  BuildOptions o;
  BuildReport r = run_forge(a.canon(), o, items);
  if (r.status != BuildReport::Status::Ok)
    throw Error("speculation block failed to seed: " + r.error);
  return read_file(canonicalize(".forge/trace.db", a.canon()));
}

struct Realized {
  BuildReport report;
  SymState state;
  std::set<SymHazard> hazards;
  std::string trouble;  // nonempty when the run itself went wrong
};

// Replays one schedule through the real engine in a fresh tree: required
// commands via plan Start/Finish, speculated ones via forced speculation.
inline Realized realize(const std::vector<SymCommand>& cmds,
                        const Schedule& sched, const SymState& init,
                        const std::string& db_bytes) {
  detail::ScratchDir b;
  detail::seed_files(b.canon(), init);
  std::filesystem::create_directories(b.canon().fs() / ".forge");
  if (!db_bytes.empty())
    write_file(canonicalize(".forge/trace.db", b.canon()), db_bytes);

  std::map<std::string, int> index_of;
  std::vector<ScriptCommand> script;
  for (size_t i = 0; i < cmds.size(); i++) {
    index_of[cmds[i].line()] = static_cast<int>(i);
    if (!cmds[i].speculated) script.push_back(ScriptCommand{cmds[i].argv()});
  }
  std::vector<PlanStep> plan;
  for (const SymEvent& e : sched) {
    const SymCommand& c = cmds[e.inst];
    PlanStep::Op op = e.start ? (c.speculated ? PlanStep::Op::ForceSpec
                                              : PlanStep::Op::Start)
                              : PlanStep::Op::Finish;
    plan.push_back({op, c.line()});
  }

  Realized out;
  BuildOptions o;
  out.report = run_forge_plan(b.canon(), o, script, plan);
  if (out.report.status != BuildReport::Status::Ok) {
    out.trouble = "engine replay not ok: " + out.report.error;
    return out;
  }
  for (const Hazard& h : out.report.hazards) {
    int f = detail::parse_file_id(h.file);
    auto a = index_of.find(h.first.line);
    auto c = index_of.find(h.second.line);
    if (f < 0 || a == index_of.end() || c == index_of.end()) {
      out.trouble = "engine hazard names a stranger: " + h.describe();
      return out;
    }
    out.hazards.insert({h.kind, f, std::min(a->second, c->second),
                        std::max(a->second, c->second)});
  }
  for (const auto& [f, v] : init) {
    auto data = read_file_if_exists(canonicalize(file_name(f), b.canon()));
    out.state[f] = data ? *data : "<absent>";
  }
  return out;
}

// ---- claim checking over generated corpora ----

struct CorpusOptions {
  unsigned seed = 1;
  int scripts = 60;
  int max_cmds = 4;
  int n_files = 4;  // script zone; two more ids serve as the private zone
  int threads = 2;
  long long bound = 200000;
  bool engine_agreement = false;
  int engine_schedules = 2;  // replays per script when agreeing
};

struct ClaimsReport {
  int scripts = 0;
  long long schedules = 0;
  int engine_runs = 0;
  std::vector<std::string> counterexamples;

  bool ok() const { return counterexamples.empty(); }
  std::string summary() const {
    std::ostringstream os;
    os << scripts << " scripts, " << schedules << " schedules, "
       << engine_runs << " engine replays: ";
    if (ok()) {
      os << "all claims hold";
    } else {
      os << counterexamples.size() << " counterexamples";
      for (const std::string& c : counterexamples) os << "\n  " << c;
    }
    return os.str();
  }
};

namespace detail {

inline std::string script_text(const std::vector<SymCommand>& cmds) {
  std::string out;
  for (const SymCommand& c : cmds) {
    if (!out.empty()) out += "; ";
    if (c.speculated) out += "~";
    out += c.line();
  }
  return out;
}

inline std::vector<bool> spec_mask(const std::vector<SymCommand>& cmds) {
  std::vector<bool> m;
  for (const SymCommand& c : cmds) m.push_back(c.speculated);
  return m;
}

}  // namespace detail

// Hazard-free schedules of a clean script all reach the sequential state.
inline void check_state_identity(const SymScript& s, const SymState& init,
                                 const CorpusOptions& o, ClaimsReport& rep) {
  auto seq = run_symbolic(s.cmds, sequential_schedule(s.cmds.size()), init,
                          o.threads);
  if (!seq.hazards.empty()) {
    rep.counterexamples.push_back("generator leaked a hazard: " +
                                  detail::script_text(s.cmds));
    return;
  }
  rep.schedules += for_each_schedule(
      detail::spec_mask(s.cmds), false, o.threads, o.bound,
      [&](const Schedule& sched) {
        auto r = run_symbolic(s.cmds, sched, init, o.threads);
        if (r.hazards.empty() && r.state != seq.state)
          rep.counterexamples.push_back(
              "state diverged without a hazard: " +
              detail::script_text(s.cmds) + " under " + schedule_text(sched));
      });
}

// Appending speculated commands over a disjoint file zone never moves the
// script's own files, wherever speculation lands in the schedule.
inline void check_disjoint_speculation(const SymScript& s,
                                       const std::vector<SymCommand>& tail,
                                       const SymState& init,
                                       const CorpusOptions& o,
                                       ClaimsReport& rep) {
  auto seq = run_symbolic(s.cmds, sequential_schedule(s.cmds.size()), init,
                          o.threads);
  std::vector<SymCommand> combined = s.cmds;
  combined.insert(combined.end(), tail.begin(), tail.end());
  rep.schedules += for_each_schedule(
      detail::spec_mask(combined), true, o.threads, o.bound,
      [&](const Schedule& sched) {
        auto r = run_symbolic(combined, sched, init, o.threads);
        if (!r.hazards.empty()) {
          rep.counterexamples.push_back(
              "disjoint speculation hazarded: " +
              detail::script_text(combined) + " under " +
              schedule_text(sched));
          return;
        }
        for (int f = 0; f < s.n_files; f++) {
          if (r.state.at(f) != seq.state.at(f)) {
            rep.counterexamples.push_back(
                "disjoint speculation moved " + file_name(f) + ": " +
                detail::script_text(combined) + " under " +
                schedule_text(sched));
            return;
          }
        }
      });
}

// A script that hazards sequentially keeps hazarding in every schedule
// that still runs its commands in order, however speculation interleaves.
inline void check_hazard_preservation(const SymScript& s,
                                      const std::vector<SymCommand>& tail,
                                      const SymState& init,
                                      const CorpusOptions& o,
                                      ClaimsReport& rep) {
  auto seq = run_symbolic(s.cmds, sequential_schedule(s.cmds.size()), init,
                          o.threads);
  if (seq.hazards.empty()) {
    rep.counterexamples.push_back("generator lost the hazard: " +
                                  detail::script_text(s.cmds));
    return;
  }
  std::vector<SymCommand> combined = s.cmds;
  combined.insert(combined.end(), tail.begin(), tail.end());
  rep.schedules += for_each_schedule(
      detail::spec_mask(combined), true, o.threads, o.bound,
      [&](const Schedule& sched) {
        auto r = run_symbolic(combined, sched, init, o.threads);
        if (r.hazards.empty())
          rep.counterexamples.push_back(
              "hazard vanished: " + detail::script_text(combined) +
              " under " + schedule_text(sched));
      });
}

// The engine, driven through the same schedule, must find exactly the
// hazards the model predicts and leave exactly the predicted bytes.
inline void check_engine_agreement(const std::vector<SymCommand>& combined,
                                   const SymState& init,
                                   const CorpusOptions& o,
                                   ClaimsReport& rep) {
  std::vector<SymCommand> block;
  for (const SymCommand& c : combined)
    if (c.speculated) block.push_back(c);
  std::string db = block.empty() ? std::string()
                                 : seed_previous_run(block, init);

  long long total = for_each_schedule(detail::spec_mask(combined), true,
                                      o.threads, o.bound,
                                      [](const Schedule&) {});
  std::set<long long> picks;
  for (int k = 0; k < o.engine_schedules; k++)
    picks.insert(total <= o.engine_schedules
                     ? std::min<long long>(k, total - 1)
                     : (total - 1) * k / (o.engine_schedules - 1 > 0
                                              ? o.engine_schedules - 1
                                              : 1));

  long long at = 0;
  for_each_schedule(
      detail::spec_mask(combined), true, o.threads, o.bound,
      [&](const Schedule& sched) {
        if (!picks.count(at++)) return;
        auto want = run_symbolic(combined, sched, init, o.threads);
        Realized got = realize(combined, sched, init, db);
        rep.engine_runs++;
        if (!got.trouble.empty()) {
          rep.counterexamples.push_back(
              got.trouble + " for " + detail::script_text(combined) +
              " under " + schedule_text(sched));
          return;
        }
        if (got.hazards != want.hazards) {
          std::string msg = "hazard sets disagree for " +
                            detail::script_text(combined) + " under " +
                            schedule_text(sched) + "; model:";
          for (const SymHazard& h : want.hazards)
            msg += " [" + to_string(h) + "]";
          msg += " engine:";
          for (const SymHazard& h : got.hazards)
            msg += " [" + to_string(h) + "]";
          rep.counterexamples.push_back(msg);
          return;
        }
        for (const auto& [f, v] : want.state) {
          if (got.state.at(f) != v) {
            rep.counterexamples.push_back(
                "bytes disagree at " + file_name(f) + " for " +
                detail::script_text(combined) + " under " +
                schedule_text(sched));
            return;
          }
        }
      });
}

inline ClaimsReport check_claims(const CorpusOptions& o) {
  ClaimsReport rep;
  // The whole universe stays within six files: scripts may span n_files
  // of them, and the top two double as the private speculation zone for
  // the disjointness claim (whose scripts keep out of that zone).
  int universe = std::min(o.n_files + 2, 6);
  int zone_lo = universe - 2;
  SymState init = default_init(universe);
  for (int i = 0; i < o.scripts; i++) {
    std::mt19937 rng(o.seed * 1000003u + static_cast<unsigned>(i));
    SymScript clean = gen_hazard_free(rng, o.max_cmds, o.n_files);
    check_state_identity(clean, init, o, rep);

    SymScript zoned =
        gen_hazard_free(rng, std::min(o.max_cmds, zone_lo), zone_lo);
    int room = 6 - static_cast<int>(zoned.cmds.size());
    auto tail = gen_spec_tail(rng, zone_lo, std::min(2, room));
    check_disjoint_speculation(zoned, tail, init, o, rep);

    SymScript dirty = gen_hazardous(rng, o.max_cmds, o.n_files);
    int room6 = 6 - static_cast<int>(dirty.cmds.size());
    auto tail6 = gen_spec_tail(rng, zone_lo, std::min(1, room6));
    check_hazard_preservation(dirty, tail6, init, o, rep);

    if (o.engine_agreement) {
      const SymScript& base = (i % 2) ? dirty : clean;
      int spare = 6 - static_cast<int>(base.cmds.size());
      auto block = gen_spec_block(rng, base, std::min(2, spare), universe);
      std::vector<SymCommand> combined = base.cmds;
      combined.insert(combined.end(), block.begin(), block.end());
      check_engine_agreement(combined, init, o, rep);
    }
    rep.scripts++;
    if (rep.counterexamples.size() >= 10) break;  // enough to debug with
  }
  return rep;
}

}  // namespace forge::oracle
