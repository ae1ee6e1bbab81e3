#include "forge/fsutil.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <random>

namespace fs = std::filesystem;
using namespace forge;

namespace {

// Scratch directory removed on scope exit.
struct TempDir {
  fs::path path;
  TempDir() {
    auto base = fs::temp_directory_path() / "forge-test";
    fs::create_directories(base);
    path = base / ("d" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  CanonPath canon() const { return canonicalize_abs(path.string()); }
  CanonPath sub(const std::string& rel) const {
    return canonicalize(rel, canon());
  }
};

}  // namespace

TEST_CASE("ContentHash: frozen vectors") {
  // Computed with an independent implementation (Python hashlib).
  CHECK(ContentHash::of_bytes("").hex() ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(ContentHash::of_bytes("abc").hex() ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(ContentHash::of_bytes("1\n").hex() ==
        "4355a46b19d348dc2f57c046f8ef63d4538ebb936000f3c9ee954a27460dd865");
}

TEST_CASE("ContentHash: equality tracks contents only") {
  CHECK(ContentHash::of_bytes("same") == ContentHash::of_bytes("same"));
  CHECK(ContentHash::of_bytes("a") != ContentHash::of_bytes("b"));
  auto h = ContentHash::of_bytes("roundtrip");
  auto back = ContentHash::from_hex(h.hex());
  REQUIRE(back.has_value());
  CHECK(*back == h);
  CHECK_FALSE(ContentHash::from_hex("xyz").has_value());
  CHECK_FALSE(ContentHash::from_hex(std::string(64, 'g')).has_value());
}

TEST_CASE("FileDigest: absence marker") {
  auto d = FileDigest::absent();
  CHECK_FALSE(d.present());
  CHECK(d.text() == "absent");
  CHECK(FileDigest::from_text("absent") == d);
  auto h = FileDigest::of(ContentHash::of_bytes("x"));
  CHECK(h.present());
  CHECK(FileDigest::from_text(h.text()) == h);
  CHECK(d != h);
  CHECK_THROWS_AS(d.hash(), Error);
}

TEST_CASE("canonicalize: relative against cwd") {
  auto cwd = canonicalize_abs("/work");
  CHECK(canonicalize("a/./b", cwd).str() == "/work/a/b");
  CHECK(canonicalize("a/../c", cwd).str() == "/work/c");
  CHECK(canonicalize("./x", cwd).str() == "/work/x");
}

TEST_CASE("canonicalize: absolute forms") {
  auto cwd = canonicalize_abs("/work");
  CHECK(canonicalize("/w/x/../y", cwd).str() == "/w/y");
  CHECK(canonicalize("/w//x", cwd).str() == "/w/x");
  CHECK(canonicalize("/w/x/", cwd).str() == "/w/x");
  CHECK(canonicalize("/", cwd).str() == "/");
  CHECK(canonicalize("/..", cwd).str() == "/");
}

TEST_CASE("canonicalize: idempotent") {
  auto cwd = canonicalize_abs("/some/dir");
  for (const char* raw : {"x/y/../z", "/a/b/./c", "deep/.././p", "/"}) {
    auto once = canonicalize(raw, cwd);
    auto twice = canonicalize(once.str(), cwd);
    CHECK(once == twice);
  }
}

TEST_CASE("canonicalize: errors") {
  CHECK_THROWS_AS(canonicalize("", canonicalize_abs("/w")), Error);
  CHECK_THROWS_AS(canonicalize_abs("rel/path"), Error);
  CHECK_THROWS_AS(canonicalize("rel", CanonPath()), Error);
}

TEST_CASE("SubstTable: basic substitution and expansion") {
  SubstTable t;
  t.add(canonicalize_abs("/home/u"), "HOME");
  auto p = canonicalize_abs("/home/u/proj/a.o");
  CHECK(t.substitute(p) == "$HOME/proj/a.o");
  CHECK(t.expand("$HOME/proj/a.o") == p);
}

TEST_CASE("SubstTable: longest prefix wins, ties to table order") {
  SubstTable t;
  t.add(canonicalize_abs("/home"), "H");
  t.add(canonicalize_abs("/home/u/proj"), "P");
  t.add(canonicalize_abs("/home/u"), "U");
  CHECK(t.substitute(canonicalize_abs("/home/u/proj/x")) == "$P/x");
  CHECK(t.substitute(canonicalize_abs("/home/u/y")) == "$U/y");
  CHECK(t.substitute(canonicalize_abs("/home/z")) == "$H/z");

  SubstTable tie;
  tie.add(canonicalize_abs("/same"), "A");
  tie.add(canonicalize_abs("/same"), "B");
  CHECK(tie.substitute(canonicalize_abs("/same/x")) == "$A/x");
}

TEST_CASE("SubstTable: prefix matches whole components only") {
  SubstTable t;
  t.add(canonicalize_abs("/home/u"), "U");
  CHECK(t.substitute(canonicalize_abs("/home/uu/x")) == "/home/uu/x");
  CHECK(t.substitute(canonicalize_abs("/home/u")) == "$U");
}

TEST_CASE("SubstTable: unlisted paths pass through, dollars escaped") {
  SubstTable t;
  t.add(canonicalize_abs("/base"), "B");
  auto odd = canonicalize_abs("/tmp/price$list");
  auto text = t.substitute(odd);
  CHECK(text == "/tmp/price$$list");
  CHECK(t.expand(text) == odd);
  // Under a prefix, a literal dollar in the tail still round-trips.
  auto odd2 = canonicalize_abs("/base/a$b");
  CHECK(t.substitute(odd2) == "$B/a$$b");
  CHECK(t.expand("$B/a$$b") == odd2);
}

TEST_CASE("SubstTable: expand rejects unknown variables") {
  SubstTable t;
  t.add(canonicalize_abs("/base"), "B");
  try {
    t.expand("$NOPE/x");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("$NOPE") != std::string::npos);
  }
  CHECK_THROWS_AS(t.expand("$/x"), Error);
  CHECK_THROWS_AS(t.expand("relative/only"), Error);
}

TEST_CASE("SubstTable: round trip is the identity on listed paths") {
  SubstTable t;
  t.add(canonicalize_abs("/home/u"), "HOME");
  t.add(canonicalize_abs("/home/u/deep/nest"), "NEST");
  for (const char* raw :
       {"/home/u/a", "/home/u/deep/nest/b.o", "/other/c", "/home/u"}) {
    auto p = canonicalize_abs(raw);
    CHECK(t.expand(t.substitute(p)) == p);
  }
}

TEST_CASE("glob_match: full-path fnmatch semantics") {
  auto p = canonicalize_abs("/w/build/x.log");
  CHECK(glob_match("*.log", p));
  CHECK(glob_match("*/build/*", p));
  CHECK_FALSE(glob_match("*.tmp", p));
}

TEST_CASE("file helpers: read, write, hash") {
  TempDir d;
  auto f = d.sub("a.txt");
  write_file(f, "abc");
  CHECK(read_file(f) == "abc");
  auto h = hash_file(f);
  REQUIRE(h.has_value());
  CHECK(h->hex() ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  auto missing = d.sub("nope.txt");
  CHECK_FALSE(read_file_if_exists(missing).has_value());
  CHECK_FALSE(hash_file(missing).has_value());
  CHECK(digest_file(missing) == FileDigest::absent());
  CHECK_THROWS_AS(read_file(missing), Error);
  CHECK_THROWS_AS(read_file(d.canon()), Error);  // directory
}

TEST_CASE("file helpers: atomic write replaces contents") {
  TempDir d;
  auto f = d.sub("out.bin");
  write_file_atomic(f, "first");
  write_file_atomic(f, "second");
  CHECK(read_file(f) == "second");
  // No stray temp files left behind.
  size_t entries = 0;
  for (auto& e : fs::directory_iterator(d.path)) {
    (void)e;
    entries++;
  }
  CHECK(entries == 1);
}

TEST_CASE("file helpers: write creates parent directories") {
  TempDir d;
  auto f = d.sub("nested/deep/file.txt");
  write_file(f, "x");
  CHECK(read_file(f) == "x");
}
