#pragma once

// Hard-negative construction: swap one abnormality term for a confusable
// same-region alternative while leaving the sentence template intact.

#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "absteer/common.hpp"
#include "absteer/report_struct.hpp"

namespace absteer {

inline constexpr std::string_view kDefaultPrompt = "Detect abnormalities, then write the report.";

/// region -> canonical abnormality (lowercase) -> alternatives.
class ConfusabilityMap {
 public:
  using Table = std::map<std::string, std::map<std::string, std::vector<std::string>>>;

  ConfusabilityMap(Table table, const RegionTaxonomy& taxonomy) : table_(std::move(table)) {
    Table lowered;
    for (const auto& [region, terms] : table_) {
      if (!taxonomy.contains(region))
        throw Error(ErrorKind::config, "confusability map references unknown region '" + region + "'");
      for (const auto& [term, alternatives] : terms) {
        const std::string key = to_lower(term);
        if (key.empty()) throw Error(ErrorKind::config, "empty abnormality key in region '" + region + "'");
        if (alternatives.empty())
          throw Error(ErrorKind::config, "abnormality '" + term + "' has no alternatives");
        for (const auto& alt : alternatives) {
          if (to_lower(alt) == key)
            throw Error(ErrorKind::config, "alternative equals its key: '" + term + "' in " + region);
          if (alt.empty()) throw Error(ErrorKind::config, "empty alternative for '" + term + "'");
        }
        lowered[region][key] = alternatives;
      }
    }
    table_ = std::move(lowered);
  }

  static ConfusabilityMap from_json(const json& j, const RegionTaxonomy& taxonomy) {
    try {
      return ConfusabilityMap(j.get<Table>(), taxonomy);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, std::string("malformed confusability map: ") + e.what());
    }
  }
  static const ConfusabilityMap& default_map();

  json to_json() const { return json(table_); }
  const Table& table() const { return table_; }

  bool covers(std::string_view region) const { return table_.count(std::string(region)) != 0; }

  const std::map<std::string, std::vector<std::string>>* terms_for(std::string_view region) const {
    auto it = table_.find(std::string(region));
    return it == table_.end() ? nullptr : &it->second;
  }

 private:
  Table table_;
};

inline constexpr std::string_view kDefaultConfusabilityJson = R"json({
  "Lung": {
    "consolidation": ["atelectasis"],
    "atelectasis": ["consolidation"],
    "lung opacity": ["lung nodule"],
    "lung nodule": ["lung opacity"],
    "opacity": ["nodule"],
    "nodule": ["opacity"],
    "emphysema": ["mosaic attenuation pattern"],
    "mosaic attenuation pattern": ["emphysema"],
    "pulmonary fibrotic sequela": ["interlobular septal thickening"],
    "interlobular septal thickening": ["pulmonary fibrotic sequela"]
  },
  "Trachea and Bronchi": {
    "bronchiectasis": ["peribronchial thickening"],
    "peribronchial thickening": ["bronchiectasis"]
  },
  "Mediastinum": {
    "lymphadenopathy": ["arterial wall calcification"],
    "arterial wall calcification": ["lymphadenopathy"]
  },
  "Heart": {
    "cardiomegaly": ["pericardial effusion", "coronary artery wall calcification"],
    "pericardial effusion": ["cardiomegaly", "coronary artery wall calcification"],
    "coronary artery wall calcification": ["cardiomegaly", "pericardial effusion"]
  },
  "Esophagus": {
    "hiatal hernia": ["esophageal wall thickening"]
  },
  "Pleura": {
    "pleural effusion": ["pleural thickening"]
  },
  "Others": {
    "medical material": ["foreign body"]
  }
})json";

inline const ConfusabilityMap& ConfusabilityMap::default_map() {
  static const ConfusabilityMap map =
      from_json(json::parse(kDefaultConfusabilityJson), RegionTaxonomy::default_taxonomy());
  return map;
}

struct TermMatch {
  size_t position = 0;
  size_t length = 0;
  const std::vector<std::string>* alternatives = nullptr;
};

/// Longest case-insensitive map key occurring in `text`; ties go to the
/// earliest position, then to the lexicographically smaller key.
inline std::optional<TermMatch> find_abnormality_term(
    std::string_view text, const std::map<std::string, std::vector<std::string>>& terms) {
  const std::string lowered = to_lower(text);
  std::optional<TermMatch> best;
  for (const auto& [key, alternatives] : terms) {
    const size_t pos = lowered.find(key);
    if (pos == std::string::npos) continue;
    if (!best || key.size() > best->length || (key.size() == best->length && pos < best->position))
      best = TermMatch{pos, key.size(), &alternatives};
  }
  return best;
}

/// Replaces the matched span and copies the case of the original first letter.
inline std::string replace_term(std::string_view text, const TermMatch& match, std::string alternative) {
  if (!alternative.empty()) {
    const unsigned char first = static_cast<unsigned char>(text[match.position]);
    auto& a = reinterpret_cast<unsigned char&>(alternative[0]);
    a = std::isupper(first) ? static_cast<unsigned char>(std::toupper(a))
                            : static_cast<unsigned char>(std::tolower(a));
  }
  std::string out(text.substr(0, match.position));
  out += alternative;
  out += text.substr(match.position + match.length);
  return out;
}

/// Swaps the abnormality term of exactly `k` eligible abnormal entries.
/// Entries are picked without replacement and alternatives uniformly, both
/// from a PRNG seeded with `seed`.
inline StructuredReport corrupt_report(const StructuredReport& report, const ConfusabilityMap& map,
                                       std::uint64_t seed, size_t k = 1) {
  if (k == 0) throw Error(ErrorKind::config, "k must be at least 1");
  std::vector<std::pair<size_t, TermMatch>> eligible;
  for (size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    if (e.status != EntryStatus::abnormal) continue;
    const auto* terms = map.terms_for(e.region);
    if (!terms) continue;
    if (auto m = find_abnormality_term(e.text, *terms)) eligible.emplace_back(i, *m);
  }
  if (eligible.size() < k) {
    throw Error(ErrorKind::no_negative, "case '" + report.case_id + "' has " +
                                            std::to_string(eligible.size()) +
                                            " corruptible entries, need " + std::to_string(k));
  }
  Rng rng(seed);
  // Partial Fisher-Yates over the eligible list.
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(rng.index(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  StructuredReport out = report;
  for (size_t i = 0; i < k; ++i) {
    const auto& [index, match] = eligible[i];
    const auto& alts = *match.alternatives;
    const std::string& alt = alts[static_cast<size_t>(rng.index(alts.size()))];
    out.entries[index].text = replace_term(report.entries[index].text, match, alt);
  }
  return out;
}

struct PreferencePair {
  std::string case_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::uint64_t seed = 0;

  bool operator==(const PreferencePair&) const = default;
};

inline json to_json(const PreferencePair& p) {
  return json{{"case_id", p.case_id}, {"prompt", p.prompt}, {"chosen", p.chosen},
              {"rejected", p.rejected}, {"seed", p.seed}};
}

inline PreferencePair preference_pair_from_json(const json& j) {
  try {
    return {j.at("case_id").get<std::string>(), j.at("prompt").get<std::string>(),
            j.at("chosen").get<std::string>(), j.at("rejected").get<std::string>(),
            j.at("seed").get<std::uint64_t>()};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed preference pair: ") + e.what());
  }
}

struct PairBuildResult {
  std::vector<PreferencePair> pairs;
  std::vector<std::string> skipped;  // case ids without a corruptible entry
};

inline std::uint64_t derive_case_seed(std::uint64_t seed, std::string_view case_id) {
  return seed ^ fnv1a64(case_id);
}

inline PairBuildResult build_preference_pairs(const std::vector<StructuredReport>& dataset,
                                              const ConfusabilityMap& map, std::uint64_t seed,
                                              size_t k = 1,
                                              std::string_view prompt = kDefaultPrompt) {
  PairBuildResult result;
  for (const auto& report : dataset) {
    const std::uint64_t case_seed = derive_case_seed(seed, report.case_id);
    try {
      StructuredReport fake = corrupt_report(report, map, case_seed, k);
      result.pairs.push_back(
          {report.case_id, std::string(prompt), render_ab(report), render_ab(fake), case_seed});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::no_negative) throw;
      result.skipped.push_back(report.case_id);
    }
  }
  return result;
}

}  // namespace absteer
