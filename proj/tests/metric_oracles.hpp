#pragma once

#include "absteer/metrics.hpp"

#include <sstream>

namespace absteer::testing {

/// Whitespace split, matching how the NLG fixture was tokenized.
inline Tokens words(const std::string& s) {
  Tokens out;
  std::istringstream is(s);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

// Per-label 2x2 confusion tables, recomputed from scratch.
struct Confusion {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline double frac(long num, long den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }
inline double f1_of(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

inline PRF ce_oracle(const LabelMatrix& pred, const LabelMatrix& truth, AverageMode mode) {
  const size_t rows = truth.size(), cols = truth.empty() ? 0 : truth[0].size();
  std::vector<std::vector<Confusion>> cell(rows, std::vector<Confusion>(cols));
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) {
      Confusion& k = cell[r][c];
      if (pred[r][c] == 1 && truth[r][c] == 1) k.tp = 1;
      if (pred[r][c] == 1 && truth[r][c] == 0) k.fp = 1;
      if (pred[r][c] == 0 && truth[r][c] == 1) k.fn = 1;
      if (pred[r][c] == 0 && truth[r][c] == 0) k.tn = 1;
    }
  auto pooled = [&](auto pick) {
    Confusion s;
    for (size_t r = 0; r < rows; ++r)
      for (size_t c = 0; c < cols; ++c)
        if (pick(r, c)) {
          s.tp += cell[r][c].tp;
          s.fp += cell[r][c].fp;
          s.fn += cell[r][c].fn;
        }
    return s;
  };
  PRF out;
  if (mode == AverageMode::micro) {
    const Confusion s = pooled([](size_t, size_t) { return true; });
    out.precision = frac(s.tp, s.tp + s.fp);
    out.recall = frac(s.tp, s.tp + s.fn);
    out.f1 = f1_of(out.precision, out.recall);
    return out;
  }
  const bool per_label = mode != AverageMode::sample;
  const size_t groups = per_label ? cols : rows;
  double sp = 0, sr = 0, sf = 0, total_w = 0;
  for (size_t g = 0; g < groups; ++g) {
    const Confusion s = pooled([&](size_t r, size_t c) { return per_label ? c == g : r == g; });
    const double p = frac(s.tp, s.tp + s.fp), rc = frac(s.tp, s.tp + s.fn);
    const double w = mode == AverageMode::weighted ? static_cast<double>(s.tp + s.fn) : 1.0;
    sp += w * p;
    sr += w * rc;
    sf += w * f1_of(p, rc);
    total_w += w;
  }
  if (total_w == 0.0) return out;
  return {sp / total_w, sr / total_w, sf / total_w};
}

inline LabelMatrix random_matrix(Rng& rng, size_t rows, size_t cols, double density) {
  LabelMatrix m(rows, LabelVector(cols, 0));
  for (auto& row : m)
    for (auto& x : row) x = rng.uniform() < density ? 1 : 0;
  return m;
}

}  // namespace absteer::testing
