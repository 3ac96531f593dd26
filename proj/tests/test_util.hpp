#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "absteer/common.hpp"
#include "absteer/report_struct.hpp"

namespace absteer::testing {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(ABSTEER_FIXTURE_DIR) / name; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(fnv1a64(tag) ^ static_cast<std::uint64_t>(::getpid()));
    path_ = std::filesystem::temp_directory_path() / ("absteer_" + tag + "_" + std::to_string(rng.next() % 1000000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

inline CommandResult run_command(const std::string& command) {
  CommandResult r;
  FILE* pipe = ::popen((command + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string random_word(Rng& rng) {
  static const char* kSyllables[] = {"ra", "lo", "ne", "mi", "cu", "ta", "ve", "so", "pi", "du"};
  std::string w;
  const size_t n = 1 + rng.index(3);
  for (size_t i = 0; i < n; ++i) w += kSyllables[rng.index(10)];
  return w;
}

inline std::string random_sentence(Rng& rng, size_t min_words = 2, size_t max_words = 8) {
  std::string s;
  const size_t n = min_words + rng.index(max_words - min_words + 1);
  for (size_t i = 0; i < n; ++i) s += (i ? " " : "") + random_word(rng);
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s + ".";
}

inline EntryStatus random_status(Rng& rng) {
  static const EntryStatus kAll[] = {EntryStatus::abnormal, EntryStatus::normal, EntryStatus::uncategorized,
                                     EntryStatus::repetitive};
  return kAll[rng.index(4)];
}

/// Entries drawn from the default taxonomy's regions.
inline StructuredReport random_report(Rng& rng, size_t max_entries = 8) {
  const auto& regions = RegionTaxonomy::default_taxonomy().regions();
  StructuredReport r;
  r.case_id = "case_" + std::to_string(rng.index(100000));
  const size_t n = rng.index(max_entries + 1);
  for (size_t i = 0; i < n; ++i)
    r.entries.push_back({regions[rng.index(regions.size())], random_sentence(rng), random_status(rng)});
  return r;
}

inline StructuredReport abnormal_only(const StructuredReport& r) {
  StructuredReport out;
  out.case_id = r.case_id;
  for (const auto& e : r.entries)
    if (e.status == EntryStatus::abnormal) out.entries.push_back(e);
  return out;
}

}  // namespace absteer::testing
