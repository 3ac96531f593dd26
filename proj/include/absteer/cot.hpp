#pragma once

// Word/punctuation tokenizer, vocabulary, chain-of-thought sample
// construction (target = R_AB ++ SEP ++ R_Full ++ EOS), and the summed
// generation NLL.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "absteer/common.hpp"

namespace absteer {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kSep = 4;
inline constexpr size_t kNumReserved = 5;

/// Lowercases and splits on whitespace; each ASCII punctuation character is
/// its own token.
inline std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      tokens.emplace_back(1, c);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return tokens;
}

class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// `words` excludes the reserved tokens, which always occupy ids 0..4.
  explicit Vocab(const std::vector<std::string>& words) {
    tokens_ = {"<pad>", "<unk>", "<bos>", "<eos>", "<sep>"};
    tokens_.insert(tokens_.end(), words.begin(), words.end());
    for (size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw Error(ErrorKind::config, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }

  static Vocab from_json(const json& j) {
    std::vector<std::string> all;
    try {
      all = j.at("tokens").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, std::string("malformed vocab: ") + e.what());
    }
    const Vocab reserved;
    if (all.size() < kNumReserved || !std::equal(reserved.tokens_.begin(), reserved.tokens_.end(), all.begin()))
      throw Error(ErrorKind::config, "vocab must start with the reserved tokens");
    return Vocab(std::vector<std::string>(all.begin() + kNumReserved, all.end()));
  }

  json to_json() const { return json{{"tokens", tokens_}}; }

  size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Tokens with frequency >= min_count, ordered by descending frequency then
/// lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& corpus, size_t min_count) {
  if (min_count < 1) throw Error(ErrorKind::config, "min_count must be >= 1");
  std::map<std::string, size_t> counts;
  for (const auto& text : corpus)
    for (auto& t : split_tokens(text)) ++counts[t];
  std::vector<std::pair<std::string, size_t>> kept;
  for (auto& [token, n] : counts)
    if (n >= min_count) kept.emplace_back(token, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [token, n] : kept) words.push_back(token);
  return Vocab(words);
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& t : split_tokens(text)) ids.push_back(vocab.id(t));
  return ids;
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// previous token and opening brackets to the next. Reserved tokens other
/// than UNK are dropped.
inline std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  bool glue_next = false;
  for (TokenId id : ids) {
    if (id != kUnk && id < kNumReserved) continue;
    const std::string& tok = vocab.token(id);
    const bool closing = tok.size() == 1 && std::string_view(".,:;!?)]%").find(tok[0]) != std::string_view::npos;
    if (!out.empty() && !closing && !glue_next) out.push_back(' ');
    out += tok;
    glue_next = tok == "(" || tok == "[";
  }
  return out;
}

struct CoTSample {
  std::string case_id;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<double> feature;
};

struct CoTOptions {
  bool mask_abnormality_segment = false;  // ablation: supervise only R_Full
};

inline CoTSample build_cot_sample(std::string_view prompt, std::string_view r_ab, std::string_view r_full,
                                  std::vector<double> feature, const Vocab& vocab,
                                  std::string case_id = {}, CoTOptions options = {}) {
  CoTSample s;
  s.case_id = std::move(case_id);
  s.input_ids = tokenize(prompt, vocab);
  const auto ab = tokenize(r_ab, vocab);
  const auto full = tokenize(r_full, vocab);
  s.target_ids = ab;
  s.target_ids.push_back(kSep);
  s.target_ids.insert(s.target_ids.end(), full.begin(), full.end());
  s.target_ids.push_back(kEos);
  s.loss_mask.assign(s.target_ids.size(), 1);
  if (options.mask_abnormality_segment) std::fill(s.loss_mask.begin(), s.loss_mask.begin() + ab.size(), 0);
  s.feature = std::move(feature);
  return s;
}

inline json to_json(const CoTSample& s) {
  json mask = json::array();
  for (auto m : s.loss_mask) mask.push_back(static_cast<int>(m));
  return json{{"case_id", s.case_id}, {"input_ids", s.input_ids}, {"target_ids", s.target_ids},
              {"loss_mask", std::move(mask)}, {"feature", s.feature}};
}

inline CoTSample cot_sample_from_json(const json& j) {
  try {
    CoTSample s;
    s.case_id = j.at("case_id").get<std::string>();
    s.input_ids = j.at("input_ids").get<std::vector<TokenId>>();
    s.target_ids = j.at("target_ids").get<std::vector<TokenId>>();
    for (int m : j.at("loss_mask").get<std::vector<int>>()) s.loss_mask.push_back(m ? 1 : 0);
    s.feature = j.at("feature").get<std::vector<double>>();
    if (s.loss_mask.size() != s.target_ids.size())
      throw Error(ErrorKind::shape, "loss_mask and target_ids differ in length for " + s.case_id);
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed CoT sample: ") + e.what());
  }
}

/// -sum_t mask_t * logprobs[t][target_t], in nats.
inline double nll_loss(std::span<const std::vector<double>> token_logprobs, std::span<const TokenId> target_ids,
                       std::span<const std::uint8_t> loss_mask) {
  if (token_logprobs.size() != target_ids.size() || loss_mask.size() != target_ids.size())
    throw Error(ErrorKind::shape, "nll_loss: logprobs/targets/mask lengths differ");
  double loss = 0.0;
  for (size_t t = 0; t < target_ids.size(); ++t) {
    if (target_ids[t] >= token_logprobs[t].size())
      throw Error(ErrorKind::shape, "nll_loss: target id out of range at position " + std::to_string(t));
    if (loss_mask[t]) loss -= token_logprobs[t][target_ids[t]];
  }
  return loss;
}

}  // namespace absteer
