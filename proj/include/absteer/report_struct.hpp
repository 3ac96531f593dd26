#pragma once

// Report structuring: sentence segmentation, lexicon-based region
// assignment, repetition detection, and the "(Region: finding)" rendering
// of abnormality-centric reports.

#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "absteer/common.hpp"

namespace absteer {

inline constexpr std::string_view kOthersRegion = "Others";
inline constexpr std::string_view kNoAbnormalityLine = "(No abnormality detected.)";

enum class EntryStatus { abnormal, normal, uncategorized, repetitive };

inline std::string to_string(EntryStatus s) {
  switch (s) {
    case EntryStatus::abnormal: return "abnormal";
    case EntryStatus::normal: return "normal";
    case EntryStatus::uncategorized: return "uncategorized";
    case EntryStatus::repetitive: return "repetitive";
  }
  return "abnormal";
}

inline EntryStatus parse_status(std::string_view s) {
  if (s == "abnormal") return EntryStatus::abnormal;
  if (s == "normal") return EntryStatus::normal;
  if (s == "uncategorized") return EntryStatus::uncategorized;
  if (s == "repetitive") return EntryStatus::repetitive;
  throw Error(ErrorKind::parse, "unknown entry status '" + std::string(s) + "'");
}

struct StructuredEntry {
  std::string region;
  std::string text;
  EntryStatus status = EntryStatus::abnormal;

  bool operator==(const StructuredEntry&) const = default;
};

struct StructuredReport {
  std::string case_id;
  std::vector<StructuredEntry> entries;

  bool operator==(const StructuredReport&) const = default;

  std::vector<StructuredEntry> abnormal_entries() const {
    std::vector<StructuredEntry> out;
    for (const auto& e : entries)
      if (e.status == EntryStatus::abnormal) out.push_back(e);
    return out;
  }
};

/// Anatomical region list plus the lexicons that drive rule-based
/// assignment. The last region is the "Others" overflow bucket.
class RegionTaxonomy {
 public:
  RegionTaxonomy(std::vector<std::string> regions,
                 std::map<std::string, std::vector<std::string>> lexicon,
                 std::vector<std::string> normal_patterns,
                 std::vector<std::string> abnormality_keywords)
      : regions_(std::move(regions)),
        lexicon_(std::move(lexicon)),
        normal_patterns_(std::move(normal_patterns)),
        abnormality_keywords_(std::move(abnormality_keywords)) {
    std::set<std::string> seen;
    for (const auto& r : regions_) {
      if (r.empty()) throw Error(ErrorKind::config, "empty region name");
      if (!seen.insert(r).second) throw Error(ErrorKind::config, "duplicate region '" + r + "'");
    }
    if (!seen.count(std::string(kOthersRegion))) regions_.emplace_back(kOthersRegion);
    for (auto& [region, phrases] : lexicon_) {
      if (!contains(region))
        throw Error(ErrorKind::config, "lexicon references undeclared region '" + region + "'");
      for (auto& p : phrases) p = to_lower(p);
    }
    for (auto& k : abnormality_keywords_) k = to_lower(k);
    for (const auto& p : normal_patterns_) {
      try {
        compiled_normals_.emplace_back(p, std::regex::ECMAScript | std::regex::optimize);
      } catch (const std::regex_error& e) {
        throw Error(ErrorKind::config, "bad normal pattern '" + p + "': " + e.what());
      }
    }
  }

  static RegionTaxonomy from_json(const json& j);
  static const RegionTaxonomy& default_taxonomy();

  json to_json() const {
    return json{{"regions", regions_},
                {"lexicon", lexicon_},
                {"normal_patterns", normal_patterns_},
                {"abnormality_keywords", abnormality_keywords_}};
  }

  const std::vector<std::string>& regions() const { return regions_; }
  const std::map<std::string, std::vector<std::string>>& lexicon() const { return lexicon_; }
  const std::vector<std::string>& abnormality_keywords() const { return abnormality_keywords_; }

  bool contains(std::string_view region) const {
    return std::find(regions_.begin(), regions_.end(), region) != regions_.end();
  }

  /// `lowered` must already be lowercase.
  bool is_normal_statement(const std::string& lowered) const {
    for (const auto& re : compiled_normals_)
      if (std::regex_search(lowered, re)) return true;
    return false;
  }

 private:
  std::vector<std::string> regions_;
  std::map<std::string, std::vector<std::string>> lexicon_;
  std::vector<std::string> normal_patterns_;
  std::vector<std::string> abnormality_keywords_;
  std::vector<std::regex> compiled_normals_;
};

inline constexpr std::string_view kDefaultTaxonomyJson = R"json({
  "regions": ["Lung", "Trachea and Bronchi", "Mediastinum", "Heart", "Esophagus",
              "Pleura", "Bone", "Thyroid", "Breast", "Abdomen", "Others"],
  "lexicon": {
    "Lung": ["lung", "lobe", "pulmonary", "parenchyma", "emphysema", "consolidation",
             "atelectasis", "mosaic attenuation", "interlobular", "fibrotic", "ground-glass"],
    "Trachea and Bronchi": ["trachea", "bronch", "airway"],
    "Mediastinum": ["mediastin", "lymph", "aort", "hilar"],
    "Heart": ["heart", "cardi", "coronary", "pericard"],
    "Esophagus": ["esophag", "hiatal"],
    "Pleura": ["pleura", "hemithorax"],
    "Bone": ["bone", "osseous", "vertebra", "ribs", "spine", "sternum"],
    "Thyroid": ["thyroid"],
    "Breast": ["breast"],
    "Abdomen": ["abdom", "liver", "kidney", "spleen", "adrenal", "gallbladder", "pancrea"]
  },
  "normal_patterns": ["^no\\b", "\\bis normal\\b", "\\bare normal\\b", "\\bwithin normal limits\\b",
                      "\\bunremarkable\\b", "\\bnot observed\\b", "\\bnot detected\\b",
                      "\\bno evidence of\\b", "\\bpatent\\b"],
  "abnormality_keywords": ["material", "lesion", "mass", "nodule", "calcification", "thickening",
                           "effusion", "opacity", "hernia", "fracture", "cyst", "enlarge",
                           "abnormal", "hypodens", "hyperdens"]
})json";

inline RegionTaxonomy RegionTaxonomy::from_json(const json& j) {
  try {
    auto regions = j.at("regions").get<std::vector<std::string>>();
    std::map<std::string, std::vector<std::string>> lexicon;
    if (j.contains("lexicon")) lexicon = j.at("lexicon").get<std::map<std::string, std::vector<std::string>>>();
    std::vector<std::string> normals;
    if (j.contains("normal_patterns")) normals = j.at("normal_patterns").get<std::vector<std::string>>();
    std::vector<std::string> keywords;
    if (j.contains("abnormality_keywords"))
      keywords = j.at("abnormality_keywords").get<std::vector<std::string>>();
    return RegionTaxonomy(std::move(regions), std::move(lexicon), std::move(normals), std::move(keywords));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed taxonomy: ") + e.what());
  }
}

inline const RegionTaxonomy& RegionTaxonomy::default_taxonomy() {
  static const RegionTaxonomy taxonomy = from_json(json::parse(kDefaultTaxonomyJson));
  return taxonomy;
}

// ---------------------------------------------------------------------------
// Operations

/// Splits on '.', '!' or '?' followed by whitespace or end of text. Inner
/// whitespace of each sentence is collapsed. "1.5 cm" never splits because
/// the period is followed by a digit.
inline std::vector<std::string> segment_sentences(std::string_view text) {
  std::vector<std::string> sentences;
  size_t start = 0;
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    if (i + 1 < text.size() && !is_space(text[i + 1])) continue;
    std::string s = collapse_whitespace(text.substr(start, i + 1 - start));
    if (!s.empty()) sentences.push_back(std::move(s));
    start = i + 1;
  }
  std::string tail = collapse_whitespace(text.substr(start));
  if (!tail.empty()) sentences.push_back(std::move(tail));
  return sentences;
}

/// Lowercase, punctuation stripped, whitespace collapsed.
inline std::string normalize_sentence(std::string_view sentence) {
  std::string stripped;
  stripped.reserve(sentence.size());
  for (char c : sentence) {
    if (is_punct(c)) continue;
    stripped.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return collapse_whitespace(stripped);
}

/// Indices whose normalized form already occurred at a smaller index.
inline std::set<size_t> detect_repetitive(const std::vector<std::string>& sentences) {
  std::set<size_t> out;
  std::set<std::string> seen;
  for (size_t i = 0; i < sentences.size(); ++i) {
    if (!seen.insert(normalize_sentence(sentences[i])).second) out.insert(i);
  }
  return out;
}

struct RegionAssignment {
  std::string region;
  EntryStatus status = EntryStatus::abnormal;

  bool operator==(const RegionAssignment&) const = default;
};

/// First region in taxonomy order whose lexicon fires wins. Sentences with
/// no lexicon hit fall into "Others": abnormal when an abnormality keyword
/// fires, uncategorized otherwise. A normal-statement pattern downgrades a
/// hit to status normal.
inline RegionAssignment assign_region(std::string_view sentence, const RegionTaxonomy& taxonomy) {
  const std::string lowered = to_lower(collapse_whitespace(sentence));
  const bool normal = taxonomy.is_normal_statement(lowered);
  for (const auto& region : taxonomy.regions()) {
    auto it = taxonomy.lexicon().find(region);
    if (it == taxonomy.lexicon().end()) continue;
    for (const auto& phrase : it->second) {
      if (!phrase.empty() && lowered.find(phrase) != std::string::npos)
        return {region, normal ? EntryStatus::normal : EntryStatus::abnormal};
    }
  }
  for (const auto& keyword : taxonomy.abnormality_keywords()) {
    if (!keyword.empty() && lowered.find(keyword) != std::string::npos)
      return {std::string(kOthersRegion), normal ? EntryStatus::normal : EntryStatus::abnormal};
  }
  return {std::string(kOthersRegion), EntryStatus::uncategorized};
}

inline StructuredReport structure_report(std::string_view text, const RegionTaxonomy& taxonomy,
                                         std::string case_id = {}) {
  StructuredReport report;
  report.case_id = std::move(case_id);
  const auto sentences = segment_sentences(text);
  const auto repeats = detect_repetitive(sentences);
  for (size_t i = 0; i < sentences.size(); ++i) {
    RegionAssignment a = assign_region(sentences[i], taxonomy);
    if (repeats.count(i)) a.status = EntryStatus::repetitive;
    report.entries.push_back({std::move(a.region), sentences[i], a.status});
  }
  return report;
}

inline std::string render_ab(const StructuredReport& report) {
  std::string out;
  for (const auto& e : report.entries) {
    if (e.status != EntryStatus::abnormal) continue;
    if (!out.empty()) out.push_back('\n');
    out += "(" + e.region + ": " + e.text + ")";
  }
  if (out.empty()) out = std::string(kNoAbnormalityLine);
  return out;
}

/// Inverse of render_ab. A single trailing newline is tolerated.
inline StructuredReport parse_ab(std::string_view text) {
  StructuredReport report;
  auto lines = split_lines(text);
  if (lines.size() > 1 && lines.back().empty()) lines.pop_back();
  for (size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    const std::string where = "line " + std::to_string(i + 1);
    if (line == kNoAbnormalityLine) {
      if (lines.size() != 1)
        throw Error(ErrorKind::parse, where + ": no-abnormality marker must be the only line");
      continue;
    }
    if (line.size() < 2 || line.front() != '(' || line.back() != ')')
      throw Error(ErrorKind::parse, where + ": expected '(<Region>: <text>)'");
    const std::string_view body(line.data() + 1, line.size() - 2);
    const size_t colon = body.find(": ");
    if (colon == std::string_view::npos || colon == 0)
      throw Error(ErrorKind::parse, where + ": missing region separator");
    std::string finding(body.substr(colon + 2));
    if (finding.empty()) throw Error(ErrorKind::parse, where + ": empty finding text");
    report.entries.push_back({std::string(body.substr(0, colon)), std::move(finding), EntryStatus::abnormal});
  }
  return report;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const StructuredReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"region", e.region}, {"text", e.text}, {"status", to_string(e.status)}});
  return json{{"case_id", r.case_id}, {"entries", std::move(entries)}};
}

inline StructuredReport structured_report_from_json(const json& j) {
  try {
    StructuredReport r;
    r.case_id = j.at("case_id").get<std::string>();
    for (const auto& e : j.at("entries")) {
      r.entries.push_back({e.at("region").get<std::string>(), e.at("text").get<std::string>(),
                           parse_status(e.at("status").get<std::string>())});
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed structured report: ") + e.what());
  }
}

}  // namespace absteer
