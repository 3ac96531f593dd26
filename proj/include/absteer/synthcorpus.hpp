#pragma once

// Synthetic paired volumes and reports. Each abnormality is a bright
// spherical blob placed in a label-specific depth range, so depth-band
// statistics of the windowed volume carry information about the findings.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "absteer/common.hpp"
#include "absteer/metrics.hpp"
#include "absteer/report_struct.hpp"
#include "absteer/volprep.hpp"

namespace absteer {

struct CatalogEntry {
  std::string label;
  std::string region;
  size_t band_lo = 0;  // depth range [band_lo, band_hi) for blob centres
  size_t band_hi = 1;
  double intensity_hu = 0.0;
  double radius = 2.0;  // voxels
  std::vector<std::string> templates;
};

struct BoilerplateSentence {
  std::string region;
  std::string text;
  std::vector<std::string> excluded_by;  // omitted when any of these labels is injected
};

struct SynthConfig {
  std::vector<CatalogEntry> catalog;
  std::vector<BoilerplateSentence> boilerplate;
  Dims3 dims{96, 24, 24};
  Spacing3 spacing{1.0, 1.0, 1.0};
  double abnormality_rate = 0.8;  // probability that a case has any finding
  size_t max_findings = 2;
  double background_hu = -850.0;
  double noise_hu = 15.0;
  std::vector<std::vector<std::string>> exclusive_groups;  // labels never injected together
  std::uint64_t seed = 7;

  static SynthConfig from_json(const json& j);
  static SynthConfig default_config();
  json to_json() const;

  void validate(const LabelSet& labels) const {
    std::set<std::string> names(labels.names().begin(), labels.names().end());
    for (const auto& e : catalog) {
      if (!names.count(e.label)) throw Error(ErrorKind::config, "catalog label '" + e.label + "' is not in the label set");
      if (!(e.band_lo < e.band_hi && e.band_hi <= dims[0]))
        throw Error(ErrorKind::config, "band range of '" + e.label + "' must lie within [0, depth)");
      if (e.templates.empty()) throw Error(ErrorKind::config, "catalog label '" + e.label + "' has no templates");
      if (!(e.radius > 0.0)) throw Error(ErrorKind::config, "blob radius must be positive");
    }
    if (!(abnormality_rate >= 0.0 && abnormality_rate <= 1.0))
      throw Error(ErrorKind::config, "abnormality_rate must lie in [0, 1]");
    if (max_findings < 1) throw Error(ErrorKind::config, "max_findings must be >= 1");
  }

  const CatalogEntry* find(const std::string& label) const {
    for (const auto& e : catalog)
      if (e.label == label) return &e;
    return nullptr;
  }
};

inline json SynthConfig::to_json() const {
  json cat = json::array();
  for (const auto& e : catalog)
    cat.push_back({{"label", e.label},
                   {"region", e.region},
                   {"band", {e.band_lo, e.band_hi}},
                   {"intensity_hu", e.intensity_hu},
                   {"radius", e.radius},
                   {"templates", e.templates}});
  json bp = json::array();
  for (const auto& b : boilerplate) bp.push_back({{"region", b.region}, {"text", b.text}, {"excluded_by", b.excluded_by}});
  return json{{"catalog", cat},
              {"boilerplate", bp},
              {"dims", dims},
              {"spacing", spacing},
              {"abnormality_rate", abnormality_rate},
              {"max_findings", max_findings},
              {"background_hu", background_hu},
              {"noise_hu", noise_hu},
              {"exclusive_groups", exclusive_groups},
              {"seed", seed}};
}

inline SynthConfig SynthConfig::from_json(const json& j) {
  try {
    SynthConfig c;
    for (const auto& e : j.at("catalog")) {
      CatalogEntry ce;
      ce.label = e.at("label").get<std::string>();
      ce.region = e.at("region").get<std::string>();
      const auto band = e.at("band").get<std::vector<size_t>>();
      if (band.size() != 2) throw Error(ErrorKind::config, "band must be [lo, hi]");
      ce.band_lo = band[0];
      ce.band_hi = band[1];
      ce.intensity_hu = e.at("intensity_hu").get<double>();
      ce.radius = e.at("radius").get<double>();
      ce.templates = e.at("templates").get<std::vector<std::string>>();
      c.catalog.push_back(std::move(ce));
    }
    for (const auto& b : j.value("boilerplate", json::array()))
      c.boilerplate.push_back({b.at("region").get<std::string>(), b.at("text").get<std::string>(),
                               b.value("excluded_by", std::vector<std::string>{})});
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::vector<size_t>>();
      if (d.size() != 3) throw Error(ErrorKind::config, "dims must have 3 entries");
      c.dims = {d[0], d[1], d[2]};
    }
    if (j.contains("spacing")) {
      const auto s = j.at("spacing").get<std::vector<double>>();
      if (s.size() != 3) throw Error(ErrorKind::config, "spacing must have 3 entries");
      c.spacing = {s[0], s[1], s[2]};
    }
    c.abnormality_rate = j.value("abnormality_rate", c.abnormality_rate);
    c.max_findings = j.value("max_findings", c.max_findings);
    c.background_hu = j.value("background_hu", c.background_hu);
    c.noise_hu = j.value("noise_hu", c.noise_hu);
    c.exclusive_groups = j.value("exclusive_groups", c.exclusive_groups);
    c.seed = j.value("seed", c.seed);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed synth config: ") + e.what());
  }
}

inline constexpr std::string_view kDefaultSynthJson = R"json({
  "catalog": [
    {"label": "Consolidation", "region": "Lung", "band": [67, 70], "intensity_hu": 150, "radius": 3,
     "templates": ["Consolidation in the right lower lobe.", "Consolidation in the left lower lobe."]},
    {"label": "Atelectasis", "region": "Lung", "band": [72, 75], "intensity_hu": -450, "radius": 3,
     "templates": ["Atelectasis in the right lower lobe.", "Atelectasis in the left lower lobe."]},
    {"label": "Lung opacity", "region": "Lung", "band": [15, 18], "intensity_hu": -450, "radius": 3,
     "templates": ["Opacity in the right upper lobe.", "Opacity in the left upper lobe."]},
    {"label": "Lung nodule", "region": "Lung", "band": [19, 22], "intensity_hu": 150, "radius": 3,
     "templates": ["Nodule in the right upper lobe.", "Nodule in the left upper lobe."]},
    {"label": "Emphysema", "region": "Lung", "band": [3, 6], "intensity_hu": -500, "radius": 5,
     "templates": ["Emphysema in the upper lobes.", "Emphysema in both upper lobes."]},
    {"label": "Mosaic attenuation pattern", "region": "Lung", "band": [7, 10], "intensity_hu": 100, "radius": 5,
     "templates": ["Mosaic attenuation pattern in the upper lobes.", "Mosaic attenuation pattern in both upper lobes."]},
    {"label": "Pulmonary fibrotic sequela", "region": "Lung", "band": [79, 82], "intensity_hu": 150, "radius": 3,
     "templates": ["Pulmonary fibrotic sequela in the lower lobes.", "Pulmonary fibrotic sequela in both lower lobes."]},
    {"label": "Interlobular septal thickening", "region": "Lung", "band": [84, 87], "intensity_hu": -450, "radius": 3,
     "templates": ["Interlobular septal thickening in the lower lobes.", "Interlobular septal thickening in both lower lobes."]},
    {"label": "Bronchiectasis", "region": "Trachea and Bronchi", "band": [27, 30], "intensity_hu": -450, "radius": 3,
     "templates": ["Bronchiectasis in the segmental bronchi.", "Bronchiectasis along the central airways."]},
    {"label": "Peribronchial thickening", "region": "Trachea and Bronchi", "band": [31, 34], "intensity_hu": 150, "radius": 3,
     "templates": ["Peribronchial thickening in the segmental bronchi.", "Peribronchial thickening along the central airways."]},
    {"label": "Lymphadenopathy", "region": "Mediastinum", "band": [39, 42], "intensity_hu": -350, "radius": 3,
     "templates": ["Lymphadenopathy in the subcarinal station.", "Lymphadenopathy in the prevascular station."]},
    {"label": "Arterial wall calcification", "region": "Mediastinum", "band": [43, 46], "intensity_hu": 200, "radius": 3,
     "templates": ["Arterial wall calcification in the aortic arch.", "Arterial wall calcification in the descending aorta."]},
    {"label": "Cardiomegaly", "region": "Heart", "band": [51, 54], "intensity_hu": 40, "radius": 4,
     "templates": ["Cardiomegaly is present.", "Cardiomegaly is seen."]},
    {"label": "Pericardial effusion", "region": "Heart", "band": [55, 58], "intensity_hu": -400, "radius": 3,
     "templates": ["Pericardial effusion is present.", "Pericardial effusion is seen."]},
    {"label": "Coronary artery wall calcification", "region": "Heart", "band": [60, 63], "intensity_hu": 200, "radius": 3,
     "templates": ["Coronary artery wall calcification is present.", "Coronary artery wall calcification is seen."]},
    {"label": "Hiatal hernia", "region": "Esophagus", "band": [88, 91], "intensity_hu": -20, "radius": 3,
     "templates": ["Hiatal hernia is present.", "Hiatal hernia is seen."]},
    {"label": "Pleural effusion", "region": "Pleura", "band": [91, 94], "intensity_hu": 10, "radius": 4,
     "templates": ["Pleural effusion in the right hemithorax.", "Pleural effusion in the left hemithorax."]},
    {"label": "Medical material", "region": "Others", "band": [0, 96], "intensity_hu": 200, "radius": 2,
     "templates": ["Medical material consistent with surgical clips.", "Medical material consistent with a catheter."]}
  ],
  "boilerplate": [
    {"region": "Lung", "text": "Parenchymal attenuation is otherwise unremarkable."},
    {"region": "Trachea and Bronchi", "text": "Airway lumens are patent."},
    {"region": "Mediastinum", "text": "Mediastinal structures are unremarkable.", "excluded_by": ["Lymphadenopathy"]},
    {"region": "Heart", "text": "Cardiac size is normal.", "excluded_by": ["Cardiomegaly"]},
    {"region": "Esophagus", "text": "Esophageal course is unremarkable."},
    {"region": "Pleura", "text": "Pleural spaces are unremarkable.", "excluded_by": ["Pleural effusion"]},
    {"region": "Bone", "text": "Osseous structures are unremarkable."},
    {"region": "Thyroid", "text": "Thyroid gland is unremarkable."},
    {"region": "Abdomen", "text": "Abdominal organs are unremarkable."}
  ],
  "dims": [96, 24, 24],
  "spacing": [1.0, 1.0, 1.0],
  "abnormality_rate": 0.8,
  "max_findings": 2,
  "background_hu": -850,
  "noise_hu": 15,
  "exclusive_groups": [["Consolidation", "Atelectasis", "Lung opacity", "Lung nodule"],
                       ["Emphysema", "Mosaic attenuation pattern"],
                       ["Pulmonary fibrotic sequela", "Interlobular septal thickening"],
                       ["Bronchiectasis", "Peribronchial thickening"],
                       ["Lymphadenopathy", "Arterial wall calcification"],
                       ["Cardiomegaly", "Pericardial effusion", "Coronary artery wall calcification"]],
  "seed": 7
})json";

inline SynthConfig SynthConfig::default_config() { return from_json(json::parse(kDefaultSynthJson)); }

struct SynthCase {
  Volume volume;
  std::string r_full;
  StructuredReport structured;
  LabelVector truth;
  std::vector<std::string> findings;  // injected labels, catalog order
};

/// Deterministic per (config, case_seed). With `paint_findings` false the
/// same random draws are made but no blob is written, giving the
/// background-only twin of the case.
inline SynthCase gen_case(const SynthConfig& config, std::uint64_t case_seed, const LabelSet& labels,
                          const RegionTaxonomy& taxonomy, bool paint_findings = true) {
  Rng rng(case_seed);
  SynthCase out;

  // Smooth background: coarse Gaussian noise upsampled trilinearly.
  const Dims3 coarse_dims{std::max<size_t>(2, config.dims[0] / 6), std::max<size_t>(2, config.dims[1] / 6),
                          std::max<size_t>(2, config.dims[2] / 6)};
  Volume coarse(coarse_dims, {1.0, 1.0, 1.0}, VoxelKind::hu);
  for (double& v : coarse.voxels) v = config.background_hu + config.noise_hu * rng.normal();
  out.volume = resample(coarse, config.dims);
  out.volume.spacing = config.spacing;

  // Findings.
  if (rng.uniform() < config.abnormality_rate && !config.catalog.empty()) {
    const size_t want = 1 + static_cast<size_t>(rng.index(config.max_findings));
    std::vector<size_t> order(config.catalog.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    std::set<size_t> chosen;
    auto conflicts = [&](const std::string& label) {
      for (const auto& group : config.exclusive_groups) {
        if (std::find(group.begin(), group.end(), label) == group.end()) continue;
        for (size_t c : chosen)
          if (std::find(group.begin(), group.end(), config.catalog[c].label) != group.end()) return true;
      }
      return false;
    };
    for (size_t idx : order) {
      if (chosen.size() == want) break;
      if (!conflicts(config.catalog[idx].label)) chosen.insert(idx);
    }
    for (size_t idx : chosen) out.findings.push_back(config.catalog[idx].label);
  }

  std::map<std::string, std::string> sentence_for;
  for (const auto& label : out.findings) {
    const CatalogEntry& e = *config.find(label);
    sentence_for[label] = e.templates[rng.index(e.templates.size())];
    const double r = e.radius;
    const double cz = static_cast<double>(e.band_lo) + rng.uniform() * static_cast<double>(e.band_hi - e.band_lo);
    const double cy = rng.uniform(std::min(r, config.dims[1] / 2.0), std::max(config.dims[1] - r, config.dims[1] / 2.0));
    const double cx = rng.uniform(std::min(r, config.dims[2] / 2.0), std::max(config.dims[2] - r, config.dims[2] / 2.0));
    if (!paint_findings) continue;
    auto& vol = out.volume;
    for (size_t z = 0; z < vol.depth(); ++z)
      for (size_t y = 0; y < vol.height(); ++y)
        for (size_t x = 0; x < vol.width(); ++x) {
          const double dz = static_cast<double>(z) + 0.5 - cz, dy = static_cast<double>(y) + 0.5 - cy,
                       dx = static_cast<double>(x) + 0.5 - cx;
          if (dz * dz + dy * dy + dx * dx <= r * r) vol.at(z, y, x) = e.intensity_hu;
        }
  }
  for (double& v : out.volume.voxels) v = std::nearbyint(std::clamp(v, -1024.0, 3071.0));

  // Report text in taxonomy region order: findings, then that region's
  // boilerplate unless a finding contradicts it.
  std::set<std::string> injected(out.findings.begin(), out.findings.end());
  for (const auto& region : taxonomy.regions()) {
    for (const auto& e : config.catalog) {
      if (e.region != region || !injected.count(e.label)) continue;
      out.structured.entries.push_back({region, sentence_for[e.label], EntryStatus::abnormal});
    }
    for (const auto& b : config.boilerplate) {
      if (b.region != region) continue;
      bool excluded = false;
      for (const auto& l : b.excluded_by) excluded |= injected.count(l) != 0;
      if (!excluded) out.structured.entries.push_back({region, b.text, EntryStatus::normal});
    }
  }
  for (const auto& e : out.structured.entries) {
    if (!out.r_full.empty()) out.r_full.push_back(' ');
    out.r_full += e.text;
  }
  out.truth.assign(labels.size(), 0);
  for (const auto& label : out.findings) out.truth[labels.index_of(label)] = 1;
  return out;
}

inline std::string synth_case_id(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", index);
  return buf;
}

struct DatasetSummary {
  size_t n = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::map<std::string, size_t> finding_counts;
  std::string config_hash;
};

/// Writes vols/<case>.json+.raw, reports.jsonl, structured.jsonl, truth.csv
/// and manifest.json under `dir`. The first 80% of case indices form the
/// training split.
inline DatasetSummary gen_dataset(size_t n, const SynthConfig& config, const std::filesystem::path& dir,
                                  const LabelSet& labels = LabelSet::default_labels(),
                                  const RegionTaxonomy& taxonomy = RegionTaxonomy::default_taxonomy()) {
  if (n < 1) throw Error(ErrorKind::config, "dataset size must be >= 1");
  config.validate(labels);
  std::error_code ec;
  std::filesystem::create_directories(dir / "vols", ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + (dir / "vols").string() + ": " + ec.message());

  DatasetSummary summary;
  summary.n = n;
  summary.config_hash = sha256_hex(config.to_json().dump());
  const size_t n_train = (n * 4) / 5;
  std::vector<json> reports, structured;
  std::string csv;
  for (size_t i = 0; i < labels.size(); ++i) csv += (i ? "," : "") + labels.names()[i];
  csv += "\n";
  for (size_t i = 0; i < n; ++i) {
    const std::string id = synth_case_id(i);
    SynthCase c = gen_case(config, config.seed ^ static_cast<std::uint64_t>(i), labels, taxonomy);
    c.structured.case_id = id;
    const std::string split = i < n_train ? "train" : "test";
    (i < n_train ? summary.train_ids : summary.test_ids).push_back(id);
    write_raw_volume(c.volume, dir / "vols" / (id + ".json"));
    reports.push_back({{"case_id", id}, {"text", c.r_full}, {"split", split}});
    structured.push_back(to_json(c.structured));
    for (size_t k = 0; k < c.truth.size(); ++k) csv += (k ? "," : "") + std::to_string(c.truth[k]);
    csv += "\n";
    for (const auto& f : c.findings) ++summary.finding_counts[f];
  }
  write_file_atomic(dir / "reports.jsonl", to_jsonl(reports));
  write_file_atomic(dir / "structured.jsonl", to_jsonl(structured));
  write_file_atomic(dir / "truth.csv", csv);
  json manifest{{"n", n},
                {"seed", config.seed},
                {"config_hash", summary.config_hash},
                {"config", config.to_json()},
                {"split", {{"train", summary.train_ids}, {"test", summary.test_ids}}},
                {"finding_counts", summary.finding_counts}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

}  // namespace absteer
