#pragma once

// Hazard detection over one build's command instances. The ledger hands
// out logical ticks at every start and finish, collects each instance's
// accesses when its trace is ingested, and reports three kinds of
// ordering violations:
//
//   read-write          a file's writer did not finish before a reader of
//                       that file started (covers plain write-after-read)
//   write-write         two instances wrote the same file
//   speculative-write-read  a required instance read a file whose writer
//                       was speculated and not yet promoted
//
// It also decides what each hazard permits as recovery, and it gates
// persistence: a trace may be stored only once every temporally
// overlapping instance has finished and no known hazard touches the
// instance's files.

#include <mutex>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "forge/trace.hpp"

namespace forge {

enum class HazardKind { ReadWrite, WriteWrite, SpeculativeWriteRead };
enum class Recovery { Fatal, Restartable, Continuable };
enum class Provenance { Required, Speculated };

inline const char* to_string(HazardKind k) {
  switch (k) {
    case HazardKind::ReadWrite: return "read-write";
    case HazardKind::WriteWrite: return "write-write";
    case HazardKind::SpeculativeWriteRead: return "speculative-write-read";
  }
  return "?";
}

inline const char* to_string(Recovery r) {
  switch (r) {
    case Recovery::Fatal: return "fatal";
    case Recovery::Restartable: return "restartable";
    case Recovery::Continuable: return "continuable";
  }
  return "?";
}

inline const char* to_string(Provenance p) {
  return p == Provenance::Required ? "required" : "speculated";
}

using Tick = std::uint64_t;
using InstanceId = std::uint64_t;

// Proof that the ledger cleared an instance's trace for persistence.
// Only the ledger mints these; the trace store demands one to record.
class HazardClearance {
 public:
  InstanceId instance() const { return id_; }

 private:
  friend class Ledger;
  explicit HazardClearance(InstanceId id) : id_(id) {}
  InstanceId id_;
};

// One run of a command within the current build.
struct CmdInstance {
  InstanceId id = 0;
  Command command;
  Provenance provenance = Provenance::Required;
  bool promoted = false;  // speculated instance the script later demanded
  std::optional<int> script_pos;
  Tick start = 0;
  std::optional<Tick> finish;
  bool ingested = false;
  std::set<CanonPath> reads;
  std::set<CanonPath> writes;

  std::set<CanonPath> files() const {
    std::set<CanonPath> out = reads;
    out.insert(writes.begin(), writes.end());
    return out;
  }
  bool required_now() const {
    return provenance == Provenance::Required || promoted;
  }
  bool speculating_now() const {
    return provenance == Provenance::Speculated && !promoted;
  }
};

// Snapshot of one side of a hazard, stable for reporting.
struct HazardParty {
  InstanceId id = 0;
  std::string line;
  Provenance provenance = Provenance::Required;
  bool promoted = false;
};

struct Hazard {
  HazardKind kind;
  CanonPath file;
  // ReadWrite: first = reader, second = writer. SpeculativeWriteRead:
  // first = speculated writer, second = required reader. WriteWrite:
  // ordered by start tick.
  HazardParty first;
  HazardParty second;
  Recovery recovery = Recovery::Fatal;

  std::string describe() const {
    return std::string(to_string(kind)) + " hazard on " + file.str() + ": '" +
           first.line + "' and '" + second.line + "' (" + to_string(recovery) +
           ")";
  }
};

class Ledger {
 public:
  // Assigns the start tick. Speculated instances flip the build into
  // "speculation happened" mode for classification.
  InstanceId begin_instance(const Command& cmd, Provenance prov,
                            std::optional<int> script_pos = std::nullopt) {
    std::lock_guard lk(mu_);
    CmdInstance inst;
    InstanceId id = next_id_++;
    inst.id = id;
    inst.command = cmd;
    inst.provenance = prov;
    inst.script_pos = script_pos;
    inst.start = ++now_;
    if (prov == Provenance::Speculated) any_spec_ = true;
    instances_.emplace(id, std::move(inst));
    return id;
  }

  void finish_instance(InstanceId id) {
    std::lock_guard lk(mu_);
    CmdInstance& inst = at(id);
    if (inst.finish) throw Error("instance finished twice");
    inst.finish = ++now_;
  }

  // Record the instance's accesses and report any hazards they complete.
  // Events are attributed at finish, carrying the [start, finish]
  // interval; detection is symmetric, so replaying the same finished
  // instances in any order finds the same hazard set.
  std::vector<Hazard> ingest(InstanceId id, const Trace& trace) {
    std::lock_guard lk(mu_);
    if (finalized_) throw Error("ingest after build finalization");
    CmdInstance& inst = at(id);
    if (!inst.finish) throw Error("ingest before the instance finished");
    if (inst.ingested) throw Error("instance ingested twice");
    if (!(trace.command_key == inst.command.key))
      throw Error("trace belongs to a different command");
    for (const auto& [p, d] : trace.reads) inst.reads.insert(p);
    for (const auto& [p, d] : trace.writes) inst.writes.insert(p);
    inst.ingested = true;

    std::vector<Hazard> fresh;
    for (const CanonPath& f : inst.writes) {
      for (InstanceId wid : writers_[f]) {
        if (wid == id) continue;
        const CmdInstance& other = at(wid);
        const CmdInstance& a = earlier(other, inst);
        const CmdInstance& b = &a == &other ? inst : other;
        push_hazard(fresh, HazardKind::WriteWrite, f, a, b);
      }
      for (InstanceId rid : readers_[f]) {
        const CmdInstance& r = at(rid);
        if (!finished_before(inst, r)) {
          push_hazard(fresh, HazardKind::ReadWrite, f, r, inst);
        } else if (inst.speculating_now() && r.required_now()) {
          push_hazard(fresh, HazardKind::SpeculativeWriteRead, f, inst, r);
        }
      }
      writers_[f].push_back(id);
    }
    for (const CanonPath& f : inst.reads) {
      for (InstanceId wid : writers_[f]) {
        const CmdInstance& w = at(wid);
        if (!finished_before(w, inst)) {
          push_hazard(fresh, HazardKind::ReadWrite, f, inst, w);
        } else if (w.speculating_now() && inst.required_now()) {
          push_hazard(fresh, HazardKind::SpeculativeWriteRead, f, w, inst);
        }
      }
      readers_[f].push_back(id);
    }

    for (Hazard& h : fresh) h.recovery = classify(h);

    // A required instance touching results poisoned by an earlier
    // tolerated hazard escalates that hazard: continuing is no longer
    // safe. Poison laid down by this very ingest does not count; those
    // hazards were just classified with this instance in view.
    if (inst.required_now()) {
      for (const CanonPath& f : inst.files()) {
        auto it = poison_source_.find(f);
        if (it == poison_source_.end()) continue;
        Hazard again = hazards_[it->second];
        again.recovery = Recovery::Restartable;
        if (seen_.insert(dedup_key(again)).second) fresh.push_back(again);
      }
    }

    size_t base = hazards_.size();
    hazards_.insert(hazards_.end(), fresh.begin(), fresh.end());
    for (size_t i = 0; i < fresh.size(); i++) {
      if (fresh[i].recovery == Recovery::Continuable)
        poison(fresh[i], base + i);
    }
    return fresh;
  }

  // The script demanded a command a speculated instance already covers.
  void promote(InstanceId id, int script_pos) {
    std::lock_guard lk(mu_);
    CmdInstance& inst = at(id);
    if (inst.provenance != Provenance::Speculated)
      throw Error("only speculated instances can be promoted");
    inst.promoted = true;
    inst.script_pos = script_pos;
  }

  // Granted once every overlapping instance has finished and no known
  // hazard touches this instance's files. A solo sequential instance
  // clears as soon as the next tick has passed.
  std::optional<HazardClearance> clearance(InstanceId id) {
    std::lock_guard lk(mu_);
    const CmdInstance& inst = at(id);
    if (!inst.finish || !inst.ingested) return std::nullopt;
    if (poisoned_instances_.count(id)) return std::nullopt;
    for (const auto& [jid, j] : instances_) {
      if (jid == id || j.finish) continue;
      if (j.start < *inst.finish) return std::nullopt;  // overlapping, live
    }
    for (const Hazard& h : hazards_) {
      if (inst.reads.count(h.file) || inst.writes.count(h.file))
        return std::nullopt;
    }
    return HazardClearance(id);
  }

  void finalize() {
    std::lock_guard lk(mu_);
    finalized_ = true;
  }

  bool any_speculation() const {
    std::lock_guard lk(mu_);
    return any_spec_;
  }

  bool poisoned_instance(InstanceId id) const {
    std::lock_guard lk(mu_);
    return poisoned_instances_.count(id) > 0;
  }

  bool poisoned_key(const ContentHash& key) const {
    std::lock_guard lk(mu_);
    return poisoned_keys_.count(key.hex()) > 0;
  }

  std::vector<Hazard> hazards() const {
    std::lock_guard lk(mu_);
    return hazards_;
  }

  CmdInstance instance(InstanceId id) const {
    std::lock_guard lk(mu_);
    return at(id);
  }

  Tick now() const {
    std::lock_guard lk(mu_);
    return now_;
  }

 private:
  CmdInstance& at(InstanceId id) {
    auto it = instances_.find(id);
    if (it == instances_.end()) throw Error("unknown instance id");
    return it->second;
  }
  const CmdInstance& at(InstanceId id) const {
    return const_cast<Ledger*>(this)->at(id);
  }

  // Did a's write interval fully precede b's start?
  static bool finished_before(const CmdInstance& a, const CmdInstance& b) {
    return a.finish && *a.finish < b.start;
  }

  static const CmdInstance& earlier(const CmdInstance& a,
                                    const CmdInstance& b) {
    if (a.start != b.start) return a.start < b.start ? a : b;
    return a.id < b.id ? a : b;
  }

  static HazardParty party(const CmdInstance& i) {
    return HazardParty{i.id, i.command.line(), i.provenance, i.promoted};
  }

  std::tuple<int, std::string, InstanceId, InstanceId, int> dedup_key(
      const Hazard& h) const {
    return {static_cast<int>(h.kind), h.file.str(),
            std::min(h.first.id, h.second.id),
            std::max(h.first.id, h.second.id),
            static_cast<int>(h.recovery)};
  }

  void push_hazard(std::vector<Hazard>& out, HazardKind kind,
                   const CanonPath& f, const CmdInstance& first,
                   const CmdInstance& second) {
    Hazard h{kind, f, party(first), party(second), Recovery::Fatal};
    auto probe = std::make_tuple(static_cast<int>(kind), f.str(),
                                 std::min(first.id, second.id),
                                 std::max(first.id, second.id), -1);
    if (!pairs_.insert(probe).second) return;
    out.push_back(std::move(h));
  }

  // The recovery ladder. Without speculation a hazard is immediately
  // fatal. With speculation, a hazard confined to speculated results can
  // be tolerated (the results are quarantined); anything else restarts
  // the build without speculation.
  Recovery classify(const Hazard& h) const {
    if (!any_spec_) return Recovery::Fatal;
    auto spec = [&](const HazardParty& p) {
      const CmdInstance& i = at(p.id);
      return i.speculating_now();
    };
    if (h.kind == HazardKind::WriteWrite && spec(h.first) && spec(h.second))
      return Recovery::Continuable;
    if (h.kind == HazardKind::ReadWrite && spec(h.first))  // reader
      return Recovery::Continuable;
    return Recovery::Restartable;
  }

  void poison(const Hazard& h, size_t idx) {
    for (const HazardParty* p : {&h.first, &h.second}) {
      const CmdInstance& i = at(p->id);
      if (!i.speculating_now()) continue;
      poisoned_instances_.insert(i.id);
      poisoned_keys_.insert(i.command.key.hex());
      for (const CanonPath& f : i.writes) poison_source_.emplace(f, idx);
    }
    poison_source_.emplace(h.file, idx);
  }

  mutable std::mutex mu_;
  std::map<InstanceId, CmdInstance> instances_;
  std::map<CanonPath, std::vector<InstanceId>> readers_;
  std::map<CanonPath, std::vector<InstanceId>> writers_;
  std::vector<Hazard> hazards_;
  std::set<std::tuple<int, std::string, InstanceId, InstanceId, int>> pairs_;
  std::set<std::tuple<int, std::string, InstanceId, InstanceId, int>> seen_;
  std::map<CanonPath, size_t> poison_source_;
  std::set<InstanceId> poisoned_instances_;
  std::set<std::string> poisoned_keys_;
  Tick now_ = 0;
  InstanceId next_id_ = 1;
  bool any_spec_ = false;
  bool finalized_ = false;
};

}  // namespace forge
