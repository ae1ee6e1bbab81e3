#include "forge/hazard.hpp"

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "testsupport.hpp"

using namespace forge;
using forge::test::TempDir;
using forge::test::mk_command;

namespace {

// Builds traces straight from path lists; hazard detection never looks at
// real file contents, only at who touched what and when.
Trace mktrace(const Command& c, const TempDir& d,
              const std::vector<std::string>& reads,
              const std::vector<std::string>& writes) {
  Trace t;
  t.command_key = c.key;
  for (const auto& r : reads)
    t.reads.emplace(d.sub(r), FileDigest::of(ContentHash::of_bytes("v:" + r)));
  for (const auto& w : writes)
    t.writes.emplace(d.sub(w),
                     FileDigest::of(ContentHash::of_bytes("v:" + w)));
  return t;
}

struct Sim {
  TempDir d;
  Ledger led;
  int serial = 0;

  Command cmd(const std::string& label) {
    return mk_command({"write", label, "x"}, d.canon());
  }

  // Run one instance start-to-finish with nothing overlapping.
  std::vector<Hazard> seq(const std::string& label,
                          const std::vector<std::string>& reads,
                          const std::vector<std::string>& writes,
                          Provenance prov = Provenance::Required,
                          InstanceId* out_id = nullptr) {
    Command c = cmd(label + "#" + std::to_string(serial++));
    InstanceId id = led.begin_instance(c, prov);
    led.finish_instance(id);
    if (out_id) *out_id = id;
    return led.ingest(id, mktrace(c, d, reads, writes));
  }
};

using Triple = std::tuple<int, std::string, InstanceId, InstanceId>;

Triple triple(const Hazard& h) {
  return {static_cast<int>(h.kind), h.file.str(),
          std::min(h.first.id, h.second.id),
          std::max(h.first.id, h.second.id)};
}

}  // namespace

TEST_CASE("Ledger: two writers of one file is a write-write hazard") {
  Sim s;
  CHECK(s.seq("one", {}, {"foo.txt"}).empty());
  auto hs = s.seq("two", {}, {"foo.txt"});
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kind == HazardKind::WriteWrite);
  CHECK(hs[0].file == s.d.sub("foo.txt"));
  CHECK(hs[0].recovery == Recovery::Fatal);  // no speculation this build
}

TEST_CASE("Ledger: write after read is a read-write hazard") {
  Sim s;
  // Mirrors the circular checksum pair: reads foo writes bar, then reads
  // bar writes foo.
  CHECK(s.seq("fwd", {"foo.txt"}, {"bar.txt"}).empty());
  auto hs = s.seq("back", {"bar.txt"}, {"foo.txt"});
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kind == HazardKind::ReadWrite);
  CHECK(hs[0].file == s.d.sub("foo.txt"));
  CHECK(hs[0].first.id != hs[0].second.id);
  CHECK(hs[0].recovery == Recovery::Fatal);
}

TEST_CASE("Ledger: writer finishing before the reader starts is ordered") {
  Sim s;
  CHECK(s.seq("producer", {}, {"a.o"}).empty());
  CHECK(s.seq("consumer", {"a.o"}, {"a.out"}).empty());
}

TEST_CASE("Ledger: overlapping writer and reader hazard both ways") {
  Sim s;
  // Reader starts while the writer is still running: not ordered, even
  // though the write was ingested first.
  Command w = s.cmd("writer");
  Command r = s.cmd("reader");
  InstanceId wi = s.led.begin_instance(w, Provenance::Required);
  InstanceId ri = s.led.begin_instance(r, Provenance::Required);
  s.led.finish_instance(wi);
  s.led.finish_instance(ri);
  CHECK(s.led.ingest(wi, mktrace(w, s.d, {}, {"f.txt"})).empty());
  auto hs = s.led.ingest(ri, mktrace(r, s.d, {"f.txt"}, {}));
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kind == HazardKind::ReadWrite);
  CHECK(hs[0].first.id == ri);   // reader
  CHECK(hs[0].second.id == wi);  // writer
}

TEST_CASE("Ledger: speculative write read") {
  Sim s;
  InstanceId wid;
  CHECK(s.seq("spec-write", {}, {"input.c"}, Provenance::Speculated, &wid)
            .empty());
  auto hs = s.seq("compile", {"input.c"}, {"main.o"});
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].kind == HazardKind::SpeculativeWriteRead);
  CHECK(hs[0].file == s.d.sub("input.c"));
  CHECK(hs[0].first.id == wid);
  CHECK(hs[0].recovery == Recovery::Restartable);
}

TEST_CASE("Ledger: promotion clears future speculative-write-read") {
  Sim s;
  InstanceId wid;
  s.seq("spec-write", {}, {"gen.h"}, Provenance::Speculated, &wid);
  s.led.promote(wid, 0);
  CHECK(s.seq("compile", {"gen.h"}, {"gen.o"}).empty());
  // Hazards already raised would have stood; promotion is not retroactive
  // detection, it only changes how future reads are judged.
}

TEST_CASE("Ledger: speculated reader of a speculated write is not a "
          "speculative-write-read") {
  Sim s;
  s.seq("spec-write", {}, {"t.txt"}, Provenance::Speculated);
  CHECK(s.seq("spec-read", {"t.txt"}, {"u.txt"}, Provenance::Speculated)
            .empty());
}

TEST_CASE("Ledger: classification ladder") {
  SECTION("write-write between speculated instances is continuable") {
    Sim s;
    s.seq("a", {}, {"f"}, Provenance::Speculated);
    auto hs = s.seq("b", {}, {"f"}, Provenance::Speculated);
    REQUIRE(hs.size() == 1);
    CHECK(hs[0].recovery == Recovery::Continuable);
  }
  SECTION("read-write with a speculated reader is continuable") {
    Sim s;
    Command w = s.cmd("w");
    Command r = s.cmd("r");
    InstanceId wi = s.led.begin_instance(w, Provenance::Required);
    InstanceId ri = s.led.begin_instance(r, Provenance::Speculated);
    s.led.finish_instance(wi);
    s.led.finish_instance(ri);
    s.led.ingest(wi, mktrace(w, s.d, {}, {"f"}));
    auto hs = s.led.ingest(ri, mktrace(r, s.d, {"f"}, {}));
    REQUIRE(hs.size() == 1);
    CHECK(hs[0].kind == HazardKind::ReadWrite);
    CHECK(hs[0].recovery == Recovery::Continuable);
  }
  SECTION("mixed write-write restarts") {
    Sim s;
    s.seq("spec", {}, {"f"}, Provenance::Speculated);
    auto hs = s.seq("req", {}, {"f"});
    REQUIRE(hs.size() == 1);
    CHECK(hs[0].recovery == Recovery::Restartable);
  }
  SECTION("required-only hazards still restart once speculation happened") {
    Sim s;
    s.seq("bystander", {}, {"elsewhere"}, Provenance::Speculated);
    s.seq("a", {}, {"f"});
    auto hs = s.seq("b", {}, {"f"});
    REQUIRE(hs.size() == 1);
    CHECK(hs[0].kind == HazardKind::WriteWrite);
    CHECK(hs[0].recovery == Recovery::Restartable);
  }
}

TEST_CASE("Ledger: continuable results are quarantined and escalate") {
  Sim s;
  // Two speculated writers collide: tolerated, but their results are
  // poisoned.
  InstanceId a, b;
  s.seq("spec-a", {}, {"f", "side.txt"}, Provenance::Speculated, &a);
  auto hs = s.seq("spec-b", {}, {"f"}, Provenance::Speculated, &b);
  REQUIRE(hs.size() == 1);
  REQUIRE(hs[0].recovery == Recovery::Continuable);
  CHECK(s.led.poisoned_instance(a));
  CHECK(s.led.poisoned_instance(b));
  CHECK(s.led.poisoned_key(s.led.instance(a).command.key));
  // Poisoned instances never clear.
  CHECK_FALSE(s.led.clearance(a).has_value());

  // A later required command touching a poisoned file escalates.
  auto esc = s.seq("consumer", {"side.txt"}, {"out.txt"});
  REQUIRE_FALSE(esc.empty());
  CHECK(esc.back().recovery == Recovery::Restartable);
}

TEST_CASE("Ledger: clearance for a solo sequential command") {
  Sim s;
  InstanceId id;
  s.seq("solo", {"in"}, {"out"}, Provenance::Required, &id);
  auto c = s.led.clearance(id);
  REQUIRE(c.has_value());
  CHECK(c->instance() == id);
}

TEST_CASE("Ledger: clearance waits for overlapping instances") {
  Sim s;
  Command a = s.cmd("a");
  Command b = s.cmd("b");
  InstanceId ai = s.led.begin_instance(a, Provenance::Required);
  InstanceId bi = s.led.begin_instance(b, Provenance::Required);
  s.led.finish_instance(ai);
  s.led.ingest(ai, mktrace(a, s.d, {}, {"a.out"}));
  // b started before a finished and is still live: a must wait.
  CHECK_FALSE(s.led.clearance(ai).has_value());
  s.led.finish_instance(bi);
  s.led.ingest(bi, mktrace(b, s.d, {}, {"b.out"}));
  CHECK(s.led.clearance(ai).has_value());
  CHECK(s.led.clearance(bi).has_value());
}

TEST_CASE("Ledger: hazards withhold clearance from touched instances") {
  Sim s;
  // c runs alone first and stays clean.
  InstanceId ci;
  s.seq("c", {}, {"c.out"}, Provenance::Required, &ci);
  // a and b overlap and collide on f.
  Command a = s.cmd("a");
  Command b = s.cmd("b");
  InstanceId ai = s.led.begin_instance(a, Provenance::Required);
  InstanceId bi = s.led.begin_instance(b, Provenance::Required);
  s.led.finish_instance(ai);
  s.led.finish_instance(bi);
  s.led.ingest(ai, mktrace(a, s.d, {}, {"f"}));
  auto hs = s.led.ingest(bi, mktrace(b, s.d, {}, {"f"}));
  REQUIRE(hs.size() == 1);
  CHECK_FALSE(s.led.clearance(ai).has_value());
  CHECK_FALSE(s.led.clearance(bi).has_value());
  CHECK(s.led.clearance(ci).has_value());
}

TEST_CASE("Ledger: contract violations") {
  Sim s;
  Command a = s.cmd("a");
  InstanceId ai = s.led.begin_instance(a, Provenance::Required);
  CHECK_THROWS_AS(s.led.ingest(ai, mktrace(a, s.d, {}, {})), Error);
  s.led.finish_instance(ai);
  CHECK_THROWS_AS(s.led.finish_instance(ai), Error);
  Command other = s.cmd("other");
  CHECK_THROWS_AS(s.led.ingest(ai, mktrace(other, s.d, {}, {})), Error);
  s.led.ingest(ai, mktrace(a, s.d, {}, {}));
  CHECK_THROWS_AS(s.led.ingest(ai, mktrace(a, s.d, {}, {})), Error);
  CHECK_THROWS_AS(s.led.promote(ai, 0), Error);  // not speculated

  s.led.finalize();
  Command late = s.cmd("late");
  InstanceId li = s.led.begin_instance(late, Provenance::Required);
  s.led.finish_instance(li);
  CHECK_THROWS_AS(s.led.ingest(li, mktrace(late, s.d, {}, {})), Error);
}

TEST_CASE("Ledger: sequential well-ordered scripts raise nothing") {
  // Writer-before-reader, one writer per file: no hazards, whatever the
  // mix of reads.
  std::mt19937 rng(20260822);
  for (int iter = 0; iter < 40; iter++) {
    Sim s;
    std::vector<std::string> written;
    for (int i = 0; i < 6; i++) {
      std::vector<std::string> reads;
      for (const auto& w : written)
        if (rng() % 2) reads.push_back(w);
      std::string fresh = "w" + std::to_string(i);
      CHECK(s.seq("cmd" + std::to_string(i), reads, {fresh}).empty());
      written.push_back(fresh);
    }
  }
}

TEST_CASE("Ledger: ingest order does not change the hazard set") {
  std::mt19937 rng(7);
  for (int iter = 0; iter < 30; iter++) {
    // Random instances over a tiny file universe, with a random valid
    // start/finish interleaving. Replay the same layout, varying only
    // the order traces are ingested.
    int n = 4;
    std::vector<std::vector<std::string>> reads(n), writes(n);
    std::vector<Provenance> prov(n);
    for (int i = 0; i < n; i++) {
      prov[i] = rng() % 3 == 0 ? Provenance::Speculated : Provenance::Required;
      std::vector<int> files{0, 1, 2, 3};
      std::shuffle(files.begin(), files.end(), rng);
      writes[i].push_back("f" + std::to_string(files[0]));
      if (rng() % 2) reads[i].push_back("f" + std::to_string(files[1]));
      if (rng() % 2) reads[i].push_back("f" + std::to_string(files[2]));
    }
    std::vector<int> events;  // instance index twice: start then finish
    for (int i = 0; i < n; i++) {
      events.push_back(i);
      events.push_back(i);
    }
    std::shuffle(events.begin(), events.end(), rng);

    std::vector<std::vector<InstanceId>> orders;
    std::vector<InstanceId> base{0, 1, 2, 3};
    for (int k = 0; k < 4; k++) {
      auto o = base;
      std::shuffle(o.begin(), o.end(), rng);
      orders.push_back(o);
    }

    TempDir d;
    std::vector<Command> cmds;
    for (int i = 0; i < n; i++)
      cmds.push_back(
          mk_command({"write", "c" + std::to_string(i), "x"}, d.canon()));

    std::set<Triple> expected;
    bool first_run = true;
    for (const auto& order : orders) {
      Ledger led;
      std::vector<InstanceId> ids(n, 0);
      std::set<int> started;
      for (int e : events) {
        if (!started.count(e)) {
          ids[e] = led.begin_instance(cmds[e], prov[e]);
          started.insert(e);
        } else {
          led.finish_instance(ids[e]);
        }
      }
      std::set<Triple> got;
      for (InstanceId idx : order) {
        led.ingest(ids[idx], mktrace(cmds[idx], d, reads[idx], writes[idx]));
      }
      for (const Hazard& h : led.hazards()) got.insert(triple(h));
      if (first_run) {
        expected = got;
        first_run = false;
      } else {
        CHECK(got == expected);
      }
    }
  }
}

TEST_CASE("Hazard: describe names the file and both parties") {
  Sim s;
  s.seq("one", {}, {"foo.txt"});
  auto hs = s.seq("two", {}, {"foo.txt"});
  REQUIRE(hs.size() == 1);
  std::string msg = hs[0].describe();
  CHECK(msg.find("write-write") != std::string::npos);
  CHECK(msg.find("foo.txt") != std::string::npos);
}
