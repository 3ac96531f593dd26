#include <gtest/gtest.h>

#include "absteer/negatives.hpp"
#include "absteer/synthcorpus.hpp"
#include "test_util.hpp"

using namespace absteer;

namespace {

const LabelSet& labels() { return LabelSet::default_labels(); }
const RegionTaxonomy& tax() { return RegionTaxonomy::default_taxonomy(); }

SynthConfig only(const std::string& label) {
  SynthConfig c = SynthConfig::default_config();
  std::vector<CatalogEntry> kept;
  for (const auto& e : c.catalog)
    if (e.label == label) kept.push_back(e);
  c.catalog = kept;
  c.abnormality_rate = 1.0;
  return c;
}

std::vector<std::string> csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

}  // namespace

TEST(GenCase, ZeroRateIsBoilerplateOnly) {
  SynthConfig c = SynthConfig::default_config();
  c.abnormality_rate = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = gen_case(c, seed, labels(), tax());
    EXPECT_EQ(s.truth, LabelVector(labels().size(), 0));
    EXPECT_TRUE(s.findings.empty());
    std::string expected;
    for (const auto& region : tax().regions())
      for (const auto& b : c.boilerplate)
        if (b.region == region) expected += (expected.empty() ? "" : " ") + b.text;
    EXPECT_EQ(s.r_full, expected);
    for (const auto& e : s.structured.entries) EXPECT_EQ(e.status, EntryStatus::normal);
  }
}

TEST(GenCase, InjectedPleuralEffusionSurvivesStructuring) {
  const auto c = only("Pleural effusion");
  ASSERT_EQ(c.catalog.size(), 1u);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = gen_case(c, seed, labels(), tax());
    EXPECT_EQ(s.truth[labels().index_of("Pleural effusion")], 1);
    const auto r = structure_report(s.r_full, tax());
    EXPECT_TRUE(std::any_of(r.entries.begin(), r.entries.end(), [](const StructuredEntry& e) {
      return e.region == "Pleura" && e.status == EntryStatus::abnormal;
    })) << s.r_full;
  }
}

TEST(GenCase, FindingChangesOnlyNearbyBands) {
  const auto c = only("Cardiomegaly");
  const auto& e = c.catalog.front();
  const auto sizes = band_sizes(c.dims[0], 16);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto with = gen_case(c, seed, labels(), tax());
    const auto twin = gen_case(c, seed, labels(), tax(), false);
    EXPECT_EQ(with.r_full, twin.r_full);
    const auto fa = pool_features(window_hu(with.volume)), fb = pool_features(window_hu(twin.volume));
    size_t z = 0, differing_inside = 0;
    for (size_t b = 0; b < 16; ++b) {
      const double lo = static_cast<double>(z), hi = static_cast<double>(z + sizes[b]);
      const bool reachable = hi > static_cast<double>(e.band_lo) - e.radius && lo < static_cast<double>(e.band_hi) + e.radius;
      const bool differs = fa[2 * b] != fb[2 * b] || fa[2 * b + 1] != fb[2 * b + 1];
      if (!reachable) EXPECT_FALSE(differs) << "band " << b;
      if (differs) ++differing_inside;
      z += sizes[b];
    }
    EXPECT_GE(differing_inside, 1u);
  }
}

TEST(GenCase, Deterministic) {
  const auto c = SynthConfig::default_config();
  const auto a = gen_case(c, 42, labels(), tax()), b = gen_case(c, 42, labels(), tax());
  EXPECT_EQ(a.volume.voxels, b.volume.voxels);
  EXPECT_EQ(a.r_full, b.r_full);
  EXPECT_EQ(a.structured, b.structured);
  const auto other = gen_case(c, 43, labels(), tax());
  EXPECT_NE(a.volume.voxels, other.volume.voxels);
}

TEST(GenCase, SelfConsistencyOn250Cases) {
  const auto c = SynthConfig::default_config();
  size_t abnormal = 0;
  for (size_t i = 0; i < 250; ++i) {
    const auto s = gen_case(c, c.seed ^ i, labels(), tax());
    EXPECT_EQ(label_report(s.r_full, labels()), s.truth) << s.r_full;
    auto structured = structure_report(s.r_full, tax());
    std::vector<std::string> want, got;
    for (const auto& e : s.structured.entries)
      if (e.status == EntryStatus::abnormal) want.push_back(e.region);
    for (const auto& e : structured.entries)
      if (e.status == EntryStatus::abnormal) got.push_back(e.region);
    EXPECT_EQ(got, want) << s.r_full;
    abnormal += !s.findings.empty();
  }
  EXPECT_GT(abnormal, 150u);
}

TEST(GenCase, EveryCatalogLabelIsCorruptible) {
  // each finding sentence must give negatives something to swap
  const auto c = SynthConfig::default_config();
  for (const auto& e : c.catalog)
    for (const auto& t : e.templates) {
      StructuredReport r{"x", {{e.region, t, EntryStatus::abnormal}}};
      EXPECT_NO_THROW(corrupt_report(r, ConfusabilityMap::default_map(), 1)) << t;
    }
}

TEST(SynthConfig, ValidationAndJsonRoundTrip) {
  const auto c = SynthConfig::default_config();
  EXPECT_NO_THROW(c.validate(labels()));
  EXPECT_EQ(SynthConfig::from_json(c.to_json()).to_json(), c.to_json());
  auto bad = c;
  bad.catalog[0].label = "Not a label";
  EXPECT_THROW(bad.validate(labels()), Error);
  bad = c;
  bad.catalog[0].band_hi = c.dims[0] + 1;
  EXPECT_THROW(bad.validate(labels()), Error);
  bad = c;
  bad.abnormality_rate = 1.5;
  EXPECT_THROW(bad.validate(labels()), Error);
  EXPECT_THROW(SynthConfig::from_json(json{{"catalog", 3}}), Error);
}

TEST(GenDataset, LayoutCountsAndSplit) {
  absteer::testing::TempDir dir("synth");
  const auto c = SynthConfig::default_config();
  const auto summary = gen_dataset(10, c, dir.path());
  EXPECT_EQ(summary.train_ids.size(), 8u);
  EXPECT_EQ(summary.test_ids.size(), 2u);
  size_t vols = 0;
  for (const auto& f : std::filesystem::directory_iterator(dir / "vols")) vols += f.path().extension() == ".raw";
  EXPECT_EQ(vols, 10u);
  const auto reports = read_jsonl_file(dir / "reports.jsonl");
  ASSERT_EQ(reports.size(), 10u);
  EXPECT_EQ(reports[0]["case_id"], "case_0000");
  EXPECT_EQ(reports[8]["split"], "test");
  EXPECT_EQ(read_jsonl_file(dir / "structured.jsonl").size(), 10u);
  const auto v = read_volume(dir / "vols" / "case_0003.json");
  EXPECT_EQ(v.dims, c.dims);

  const auto lines = split_lines(read_file(dir / "truth.csv"));
  EXPECT_EQ(csv_row(lines[0]), labels().names());
  std::vector<size_t> column_sums(labels().size(), 0);
  for (size_t i = 1; i <= 10; ++i) {
    const auto row = csv_row(lines[i]);
    ASSERT_EQ(row.size(), labels().size());
    for (size_t k = 0; k < row.size(); ++k) column_sums[k] += std::stoul(row[k]);
    // truth row agrees with the labeler on the written report
    LabelVector truth;
    for (const auto& x : row) truth.push_back(std::stoi(x));
    EXPECT_EQ(label_report(reports[i - 1]["text"].get<std::string>(), labels()), truth);
  }
  for (size_t k = 0; k < labels().size(); ++k) {
    auto it = summary.finding_counts.find(labels().names()[k]);
    EXPECT_EQ(column_sums[k], it == summary.finding_counts.end() ? 0u : it->second) << labels().names()[k];
  }
  const json manifest = read_json_file(dir / "manifest.json");
  EXPECT_EQ(manifest["config_hash"], sha256_hex(c.to_json().dump()));
  EXPECT_EQ(manifest["n"], 10);
}

TEST(GenDataset, RerunIsIdentical) {
  absteer::testing::TempDir a("synth_a"), b("synth_b");
  const auto c = SynthConfig::default_config();
  gen_dataset(6, c, a.path());
  gen_dataset(6, c, b.path());
  for (const char* f : {"manifest.json", "reports.jsonl", "structured.jsonl", "truth.csv", "vols/case_0005.raw"})
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  auto other = c;
  other.seed = 8;
  absteer::testing::TempDir d("synth_d");
  EXPECT_NE(gen_dataset(6, other, d.path()).config_hash, sha256_hex(c.to_json().dump()));
}

TEST(GenDataset, Errors) {
  absteer::testing::TempDir dir("synth_err");
  write_file_atomic(dir / "file", "x");
  try {
    gen_dataset(2, SynthConfig::default_config(), dir / "file" / "sub");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
  EXPECT_THROW(gen_dataset(0, SynthConfig::default_config(), dir / "x"), Error);
}

TEST(ShippedData, FilesEqualEmbeddedDefaults) {
  const std::filesystem::path data = ABSTEER_DATA_DIR;
  EXPECT_EQ(read_json_file(data / "taxonomy.json"), json::parse(kDefaultTaxonomyJson));
  EXPECT_EQ(read_json_file(data / "confusability.json"), json::parse(kDefaultConfusabilityJson));
  EXPECT_EQ(read_json_file(data / "labels.json"), json::parse(kDefaultLabelsJson));
  EXPECT_EQ(read_json_file(data / "synth.json"), json::parse(kDefaultSynthJson));
  EXPECT_NO_THROW(RegionTaxonomy::from_json(read_json_file(data / "taxonomy.json")));
  EXPECT_NO_THROW(LabelSet::from_json(read_json_file(data / "labels.json")));
}
