#pragma once

// Report evaluation: sentence-level BLEU-1..4, ROUGE-L, an exact-match
// METEOR variant, a rule-based 18-label abnormality labeler, and
// micro/macro/weighted/sample precision-recall-F1.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "absteer/common.hpp"
#include "absteer/cot.hpp"
#include "absteer/report_struct.hpp"

namespace absteer {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// NLG metrics

namespace detail {

inline std::map<std::vector<std::string>, size_t> ngram_counts(const Tokens& t, size_t n) {
  std::map<std::vector<std::string>, size_t> counts;
  if (t.size() < n) return counts;
  for (size_t i = 0; i + n <= t.size(); ++i) ++counts[std::vector<std::string>(t.begin() + i, t.begin() + i + n)];
  return counts;
}

inline size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

}  // namespace detail

/// Modified n-gram precision for a single order.
inline double clipped_precision(const Tokens& candidate, const Tokens& reference, size_t n) {
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  size_t matched = 0, total = 0;
  for (const auto& [gram, count] : cand) {
    total += count;
    auto it = ref.find(gram);
    if (it != ref.end()) matched += std::min(count, it->second);
  }
  return detail::ratio(static_cast<double>(matched), static_cast<double>(total));
}

/// Sentence BLEU without smoothing: any zero precision gives 0.
inline double bleu(const Tokens& candidate, const Tokens& reference, size_t max_n) {
  if (max_n < 1 || max_n > 4) throw Error(ErrorKind::config, "BLEU order must be in 1..4");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (size_t n = 1; n <= max_n; ++n) {
    const double p = clipped_precision(candidate, reference, n);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PRF rouge_l(const Tokens& candidate, const Tokens& reference) {
  const double l = static_cast<double>(detail::lcs_length(candidate, reference));
  PRF out;
  out.precision = detail::ratio(l, static_cast<double>(candidate.size()));
  out.recall = detail::ratio(l, static_cast<double>(reference.size()));
  out.f1 = detail::harmonic(out.precision, out.recall);
  return out;
}

struct MeteorAlignment {
  size_t matches = 0;
  size_t chunks = 0;
};

/// Exact-match unigram alignment built from longest common runs first.
/// Every round links the longest run of still-unmatched positions that is
/// contiguous in both sequences (earliest candidate position, then earliest
/// reference position, on ties), so the match count reaches the maximum
/// sum_w min(count_c(w), count_r(w)). Chunks are then counted as maximal
/// runs of links that are adjacent in both sequences.
inline MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  std::vector<long> link(candidate.size(), -1);
  std::vector<bool> used_r(reference.size(), false);
  MeteorAlignment out;
  while (true) {
    size_t best_len = 0, best_i = 0, best_j = 0;
    for (size_t i = 0; i < candidate.size(); ++i) {
      if (link[i] >= 0) continue;
      for (size_t j = 0; j < reference.size(); ++j) {
        size_t len = 0;
        while (i + len < candidate.size() && j + len < reference.size() && link[i + len] < 0 &&
               !used_r[j + len] && candidate[i + len] == reference[j + len])
          ++len;
        if (len > best_len) {
          best_len = len;
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_len == 0) break;
    for (size_t k = 0; k < best_len; ++k) {
      link[best_i + k] = static_cast<long>(best_j + k);
      used_r[best_j + k] = true;
    }
    out.matches += best_len;
  }
  long prev = -2;
  for (long l : link) {
    if (l >= 0 && l != prev + 1) ++out.chunks;
    prev = l < 0 ? -2 : l;
  }
  return out;
}

/// F_mean = 10PR / (R + 9P), penalty = 0.5 (chunks / matches)^3.
inline double meteor_lite(const Tokens& candidate, const Tokens& reference) {
  const auto a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return f_mean * (1.0 - penalty);
}

// ---------------------------------------------------------------------------
// Clinical efficacy labels

class LabelSet {
 public:
  LabelSet(std::vector<std::string> names, std::map<std::string, std::vector<std::string>> lexicon,
           std::vector<std::string> negations)
      : names_(std::move(names)), lexicon_(std::move(lexicon)), negations_(std::move(negations)) {
    std::set<std::string> seen;
    for (const auto& n : names_)
      if (!seen.insert(n).second) throw Error(ErrorKind::config, "duplicate label '" + n + "'");
    for (auto& [label, phrases] : lexicon_) {
      if (!seen.count(label)) throw Error(ErrorKind::config, "lexicon references undeclared label '" + label + "'");
      for (auto& p : phrases) p = to_lower(p);
    }
    for (auto& n : negations_) {
      n = to_lower(n);
      negation_res_.emplace_back("\\b" + escape(n) + "\\b", std::regex::ECMAScript | std::regex::optimize);
    }
  }

  static LabelSet from_json(const json& j) {
    try {
      return LabelSet(j.at("labels").get<std::vector<std::string>>(),
                      j.at("lexicon").get<std::map<std::string, std::vector<std::string>>>(),
                      j.value("negations", std::vector<std::string>{}));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, std::string("malformed label set: ") + e.what());
    }
  }
  static const LabelSet& default_labels();

  json to_json() const { return json{{"labels", names_}, {"lexicon", lexicon_}, {"negations", negations_}}; }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }
  size_t index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw Error(ErrorKind::config, "unknown label '" + name + "'");
    return static_cast<size_t>(it - names_.begin());
  }
  const std::map<std::string, std::vector<std::string>>& lexicon() const { return lexicon_; }

  /// True when a negation cue occurs in `lowered_prefix`.
  bool negated(const std::string& lowered_prefix) const {
    for (const auto& re : negation_res_)
      if (std::regex_search(lowered_prefix, re)) return true;
    return false;
  }

 private:
  static std::string escape(const std::string& s) {
    static const std::string special = R"(\^$.|?*+()[]{})";
    std::string out;
    for (char c : s) {
      if (special.find(c) != std::string::npos) out.push_back('\\');
      out.push_back(c);
    }
    return out;
  }

  std::vector<std::string> names_;
  std::map<std::string, std::vector<std::string>> lexicon_;
  std::vector<std::string> negations_;
  std::vector<std::regex> negation_res_;
};

inline constexpr std::string_view kDefaultLabelsJson = R"json({
  "labels": ["Medical material", "Arterial wall calcification", "Cardiomegaly", "Pericardial effusion",
             "Coronary artery wall calcification", "Hiatal hernia", "Lymphadenopathy", "Emphysema",
             "Atelectasis", "Lung nodule", "Lung opacity", "Pulmonary fibrotic sequela", "Pleural effusion",
             "Mosaic attenuation pattern", "Peribronchial thickening", "Consolidation", "Bronchiectasis",
             "Interlobular septal thickening"],
  "lexicon": {
    "Medical material": ["medical material", "surgical clips", "pacemaker", "catheter"],
    "Arterial wall calcification": ["arterial wall calcification", "aortic calcification"],
    "Cardiomegaly": ["cardiomegaly", "enlarged heart"],
    "Pericardial effusion": ["pericardial effusion"],
    "Coronary artery wall calcification": ["coronary artery wall calcification", "coronary calcification"],
    "Hiatal hernia": ["hiatal hernia"],
    "Lymphadenopathy": ["lymphadenopathy", "enlarged lymph node"],
    "Emphysema": ["emphysema"],
    "Atelectasis": ["atelectasis"],
    "Lung nodule": ["lung nodule", "pulmonary nodule", "nodule"],
    "Lung opacity": ["lung opacity", "ground-glass opacity", "opacity"],
    "Pulmonary fibrotic sequela": ["pulmonary fibrotic sequela", "fibrotic sequela"],
    "Pleural effusion": ["pleural effusion"],
    "Mosaic attenuation pattern": ["mosaic attenuation pattern", "mosaic attenuation"],
    "Peribronchial thickening": ["peribronchial thickening"],
    "Consolidation": ["consolidation"],
    "Bronchiectasis": ["bronchiectasis"],
    "Interlobular septal thickening": ["interlobular septal thickening", "septal thickening"]
  },
  "negations": ["no", "without", "not observed", "ruled out"]
})json";

inline const LabelSet& LabelSet::default_labels() {
  static const LabelSet labels = from_json(json::parse(kDefaultLabelsJson));
  return labels;
}

using LabelVector = std::vector<int>;
using LabelMatrix = std::vector<LabelVector>;

/// Label i is 1 when one of its trigger phrases occurs in some sentence
/// without a negation cue earlier in that sentence.
inline LabelVector label_report(std::string_view text, const LabelSet& labels) {
  LabelVector out(labels.size(), 0);
  for (const auto& sentence : segment_sentences(text)) {
    const std::string lowered = to_lower(sentence);
    for (size_t i = 0; i < labels.size(); ++i) {
      if (out[i]) continue;
      auto it = labels.lexicon().find(labels.names()[i]);
      if (it == labels.lexicon().end()) continue;
      for (const auto& phrase : it->second) {
        for (size_t pos = lowered.find(phrase); pos != std::string::npos; pos = lowered.find(phrase, pos + 1)) {
          if (!labels.negated(lowered.substr(0, pos))) {
            out[i] = 1;
            break;
          }
        }
        if (out[i]) break;
      }
    }
  }
  return out;
}

enum class AverageMode { micro, macro, weighted, sample };

inline std::string to_string(AverageMode m) {
  switch (m) {
    case AverageMode::micro: return "micro";
    case AverageMode::macro: return "macro";
    case AverageMode::weighted: return "weighted";
    case AverageMode::sample: return "sample";
  }
  return "micro";
}

/// Any 0/0 ratio is defined as 0.
inline PRF ce_metrics(const LabelMatrix& pred, const LabelMatrix& truth, AverageMode mode) {
  if (pred.size() != truth.size()) throw Error(ErrorKind::shape, "prediction and truth row counts differ");
  const size_t width = truth.empty() ? 0 : truth.front().size();
  for (size_t r = 0; r < truth.size(); ++r)
    if (pred[r].size() != width || truth[r].size() != width)
      throw Error(ErrorKind::shape, "label matrix rows have inconsistent widths at row " + std::to_string(r));
  using detail::harmonic;
  using detail::ratio;
  PRF out;
  switch (mode) {
    case AverageMode::micro: {
      double tp = 0, fp = 0, fn = 0;
      for (size_t r = 0; r < truth.size(); ++r)
        for (size_t c = 0; c < width; ++c) {
          tp += pred[r][c] && truth[r][c];
          fp += pred[r][c] && !truth[r][c];
          fn += !pred[r][c] && truth[r][c];
        }
      out.precision = ratio(tp, tp + fp);
      out.recall = ratio(tp, tp + fn);
      out.f1 = harmonic(out.precision, out.recall);
      return out;
    }
    case AverageMode::macro:
    case AverageMode::weighted: {
      double total_support = 0.0;
      std::vector<PRF> per(width);
      std::vector<double> support(width, 0.0);
      for (size_t c = 0; c < width; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (size_t r = 0; r < truth.size(); ++r) {
          tp += pred[r][c] && truth[r][c];
          fp += pred[r][c] && !truth[r][c];
          fn += !pred[r][c] && truth[r][c];
        }
        per[c].precision = ratio(tp, tp + fp);
        per[c].recall = ratio(tp, tp + fn);
        per[c].f1 = harmonic(per[c].precision, per[c].recall);
        support[c] = tp + fn;
        total_support += support[c];
      }
      const bool weighted = mode == AverageMode::weighted;
      const double denom = weighted ? total_support : static_cast<double>(width);
      if (denom == 0.0) return out;
      for (size_t c = 0; c < width; ++c) {
        const double w = weighted ? support[c] : 1.0;
        out.precision += w * per[c].precision;
        out.recall += w * per[c].recall;
        out.f1 += w * per[c].f1;
      }
      out.precision /= denom;
      out.recall /= denom;
      out.f1 /= denom;
      return out;
    }
    case AverageMode::sample: {
      if (truth.empty()) return out;
      for (size_t r = 0; r < truth.size(); ++r) {
        double tp = 0, fp = 0, fn = 0;
        for (size_t c = 0; c < width; ++c) {
          tp += pred[r][c] && truth[r][c];
          fp += pred[r][c] && !truth[r][c];
          fn += !pred[r][c] && truth[r][c];
        }
        const double p = ratio(tp, tp + fp), rc = ratio(tp, tp + fn);
        out.precision += p;
        out.recall += rc;
        out.f1 += harmonic(p, rc);
      }
      const double n = static_cast<double>(truth.size());
      out.precision /= n;
      out.recall /= n;
      out.f1 /= n;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run evaluation

struct CaseText {
  std::string case_id;
  std::string text;
};

inline std::vector<CaseText> case_texts_from_jsonl(const std::vector<json>& rows) {
  std::vector<CaseText> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    try {
      out.push_back({r.at("case_id").get<std::string>(), r.at("text").get<std::string>()});
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, std::string("record needs string case_id and text: ") + e.what());
    }
  }
  return out;
}

struct EvalResult {
  size_t n_cases = 0;
  std::array<double, 4> bleu{};  // BLEU-1..4
  double meteor = 0.0;
  double rouge_l = 0.0;
  std::map<std::string, PRF> ce;  // keyed by averaging mode

  json to_json() const {
    json ce_json = json::object();
    for (const auto& [mode, prf] : ce)
      ce_json[mode] = {{"precision", prf.precision}, {"recall", prf.recall}, {"f1", prf.f1}};
    return json{{"n_cases", n_cases},
                {"nlg",
                 {{"bleu1", bleu[0]},
                  {"bleu2", bleu[1]},
                  {"bleu3", bleu[2]},
                  {"bleu4", bleu[3]},
                  {"meteor_lite", meteor},
                  {"rouge_l", rouge_l}}},
                {"ce", ce_json}};
  }

  /// Plain-text table; `percent` scales scores by 100.
  std::string table(bool percent = false) const {
    const double k = percent ? 100.0 : 1.0;
    std::ostringstream os;
    os << std::fixed << std::setprecision(percent ? 2 : 4);
    const int w = percent ? 7 : 8;
    const std::vector<std::string> head = {"BL-1", "BL-2", "BL-3", "BL-4", "MT-R(lite)", "RG-L"};
    os << "NLG Metrics\n";
    for (const auto& h : head) os << std::setw(std::max<int>(w, static_cast<int>(h.size()) + 1)) << h;
    os << "\n";
    const std::vector<double> vals = {bleu[0], bleu[1], bleu[2], bleu[3], meteor, rouge_l};
    for (size_t i = 0; i < vals.size(); ++i)
      os << std::setw(std::max<int>(w, static_cast<int>(head[i].size()) + 1)) << vals[i] * k;
    os << "\n\n";
    os << std::left << std::setw(12) << "CE" << std::right << std::setw(w + 2) << "P" << std::setw(w + 2) << "R"
       << std::setw(w + 2) << "F1" << "\n";
    for (const char* mode : {"micro", "macro", "weighted", "sample"}) {
      auto it = ce.find(mode);
      if (it == ce.end()) continue;
      std::string name = mode;
      name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
      os << std::left << std::setw(12) << name << std::right << std::setw(w + 2) << it->second.precision * k
         << std::setw(w + 2) << it->second.recall * k << std::setw(w + 2) << it->second.f1 * k << "\n";
    }
    return os.str();
  }
};

/// NLG scores are averaged over cases; CE metrics use label matrices from
/// label_report on both sides. Case ids must match one-to-one.
inline EvalResult evaluate_run(const std::vector<CaseText>& candidates, const std::vector<CaseText>& references,
                               const LabelSet& labels) {
  if (candidates.empty()) throw Error(ErrorKind::alignment, "candidate set is empty");
  std::map<std::string, const CaseText*> by_id;
  for (const auto& c : candidates)
    if (!by_id.emplace(c.case_id, &c).second)
      throw Error(ErrorKind::alignment, "duplicate candidate case_id '" + c.case_id + "'", c.case_id);
  std::vector<std::string> missing_candidates, missing_references;
  std::set<std::string> ref_ids;
  for (const auto& r : references) {
    ref_ids.insert(r.case_id);
    if (!by_id.count(r.case_id)) missing_candidates.push_back(r.case_id);
  }
  for (const auto& c : candidates)
    if (!ref_ids.count(c.case_id)) missing_references.push_back(c.case_id);
  if (!missing_candidates.empty() || !missing_references.empty() || ref_ids.size() != references.size()) {
    std::string ids;
    for (const auto& id : missing_candidates) ids += (ids.empty() ? "" : ",") + id;
    for (const auto& id : missing_references) ids += (ids.empty() ? "" : ",") + id;
    throw Error(ErrorKind::alignment,
                std::to_string(missing_candidates.size()) + " references without candidates, " +
                    std::to_string(missing_references.size()) + " candidates without references: " + ids,
                ids);
  }
  EvalResult res;
  res.n_cases = references.size();
  LabelMatrix pred, truth;
  const double n = static_cast<double>(references.size());
  for (const auto& r : references) {
    const CaseText& c = *by_id.at(r.case_id);
    const Tokens ct = split_tokens(c.text), rt = split_tokens(r.text);
    for (size_t k = 0; k < 4; ++k) res.bleu[k] += bleu(ct, rt, k + 1) / n;
    res.meteor += meteor_lite(ct, rt) / n;
    res.rouge_l += rouge_l(ct, rt).f1 / n;
    pred.push_back(label_report(c.text, labels));
    truth.push_back(label_report(r.text, labels));
  }
  for (auto mode : {AverageMode::micro, AverageMode::macro, AverageMode::weighted, AverageMode::sample})
    res.ce[to_string(mode)] = ce_metrics(pred, truth, mode);
  return res;
}

}  // namespace absteer
