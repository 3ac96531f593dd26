#include <gtest/gtest.h>

#include "absteer/common.hpp"
#include "test_util.hpp"

using namespace absteer;

TEST(Strings, CollapseWhitespace) {
  EXPECT_EQ(collapse_whitespace("  a \t b\n\nc  "), "a b c");
  EXPECT_EQ(collapse_whitespace(""), "");
  EXPECT_EQ(collapse_whitespace(" \n "), "");
}

TEST(Strings, SplitLinesKeepsEmptyAndStripsCr) {
  EXPECT_EQ(split_lines("a\r\nb\n"), (std::vector<std::string>{"a", "b", ""}));
  EXPECT_EQ(split_lines(""), (std::vector<std::string>{""}));
}

TEST(Hashing, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hashing, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Rng, SplitMixReferenceSequence) {
  Rng rng(0);
  EXPECT_EQ(rng.next(), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(rng.next(), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(rng.next(), 0x06c45d188009454fULL);
}

TEST(Rng, RangesAndDeterminism) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const auto k = a.index(7);
    EXPECT_EQ(k, b.index(7));
    EXPECT_LT(k, 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng rng(3);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Errors, KindAndDetailSurvive) {
  try {
    throw Error(ErrorKind::protocol, "bad body", "raw");
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::protocol);
    EXPECT_EQ(e.detail(), "raw");
    EXPECT_NE(std::string(e.what()).find("bad body"), std::string::npos);
  }
}

TEST(Files, AtomicWriteRoundTrip) {
  absteer::testing::TempDir dir("common");
  const auto p = dir / "sub/out.bin";
  const std::string data("a\0b\nc", 5);
  write_file_atomic(p, data);
  EXPECT_EQ(read_file(p), data);
  EXPECT_FALSE(std::filesystem::exists(dir / "sub/out.bin.tmp"));
  write_file_atomic(p, "second");
  EXPECT_EQ(read_file(p), "second");
}

TEST(Files, MissingFileIsIoError) {
  try {
    read_file("/nonexistent/absteer/file");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Jsonl, ParsesSkipsBlankLinesAndNamesBadLine) {
  const auto rows = parse_jsonl("{\"a\":1}\n\n{\"a\":2}\n", "mem");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["a"], 2);
  EXPECT_EQ(to_jsonl(rows), "{\"a\":1}\n{\"a\":2}\n");
  try {
    parse_jsonl("{\"a\":1}\n{oops\n", "mem");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Json, InvalidJsonIsConfigError) {
  try {
    parse_json("{", "cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}
