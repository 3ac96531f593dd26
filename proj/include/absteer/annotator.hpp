#pragma once

// Annotation service client. The remote path speaks a provider-agnostic
// JSON protocol (POST <endpoint>/v1/annotate); the rules path answers the
// same requests locally through report_struct and the confusability map.

#include <chrono>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"

#include "absteer/common.hpp"
#include "absteer/negatives.hpp"
#include "absteer/report_struct.hpp"

namespace absteer {

inline constexpr const char* kAnnotatorUrlEnv = "ABSTEER_ANNOTATOR_URL";

enum class AnnotationTask { assign_region, suggest_confusable };

inline std::string to_string(AnnotationTask t) {
  return t == AnnotationTask::assign_region ? "assign_region" : "suggest_confusable";
}

struct AnnotationRequest {
  AnnotationTask task = AnnotationTask::assign_region;
  std::vector<std::string> sentences;
  std::optional<std::string> context;

  void validate() const {
    if (task == AnnotationTask::assign_region && sentences.empty())
      throw Error(ErrorKind::config, "assign_region request needs at least one sentence");
    if (task == AnnotationTask::suggest_confusable && !context)
      throw Error(ErrorKind::config, "suggest_confusable request needs a context region");
  }

  json to_json() const {
    json j{{"task", to_string(task)}, {"sentences", sentences}};
    j["context"] = context ? json(*context) : json(nullptr);
    return j;
  }

  static AnnotationRequest from_json(const json& j) {
    try {
      AnnotationRequest r;
      const auto task = j.at("task").get<std::string>();
      if (task == "assign_region") r.task = AnnotationTask::assign_region;
      else if (task == "suggest_confusable") r.task = AnnotationTask::suggest_confusable;
      else throw Error(ErrorKind::protocol, "unknown task '" + task + "'");
      r.sentences = j.at("sentences").get<std::vector<std::string>>();
      if (j.contains("context") && !j.at("context").is_null()) r.context = j.at("context").get<std::string>();
      return r;
    } catch (const json::exception& e) {
      throw Error(ErrorKind::protocol, std::string("malformed annotation request: ") + e.what());
    }
  }
};

struct Assignment {
  size_t index = 0;
  std::string region;            // assign_region
  std::string status;            // assign_region
  std::string replacement_text;  // suggest_confusable

  bool operator==(const Assignment&) const = default;
};

struct AnnotationResponse {
  std::vector<Assignment> assignments;

  bool operator==(const AnnotationResponse&) const = default;

  json to_json(AnnotationTask task) const {
    json list = json::array();
    for (const auto& a : assignments) {
      if (task == AnnotationTask::assign_region)
        list.push_back({{"index", a.index}, {"region", a.region}, {"status", a.status}});
      else
        list.push_back({{"index", a.index}, {"replacement_text", a.replacement_text}});
    }
    return json{{"assignments", std::move(list)}};
  }
};

/// Checks the payload against the request and returns assignments sorted by
/// index. Any violation is a protocol error carrying the raw body.
inline AnnotationResponse parse_annotation_response(const std::string& body, const AnnotationRequest& request) {
  auto fail = [&](const std::string& why) -> Error { return Error(ErrorKind::protocol, why, body); };
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw fail(std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("assignments") || !j["assignments"].is_array())
    throw fail("response lacks an 'assignments' array");
  const size_t n = request.sentences.size();
  const auto& list = j["assignments"];
  if (list.size() != n)
    throw fail("expected " + std::to_string(n) + " assignments, got " + std::to_string(list.size()));
  AnnotationResponse out;
  out.assignments.resize(n);
  std::vector<bool> seen(n, false);
  for (const auto& item : list) {
    if (!item.is_object() || !item.contains("index") || !item["index"].is_number_unsigned())
      throw fail("assignment without a valid index");
    const auto index = item["index"].get<size_t>();
    if (index >= n || seen[index]) throw fail("assignment indices must cover 0..n-1 exactly once");
    seen[index] = true;
    Assignment a;
    a.index = index;
    if (request.task == AnnotationTask::assign_region) {
      if (!item.contains("region") || !item["region"].is_string() || item["region"].get<std::string>().empty())
        throw fail("assignment " + std::to_string(index) + " lacks a region");
      if (!item.contains("status") || !item["status"].is_string())
        throw fail("assignment " + std::to_string(index) + " lacks a status");
      a.region = item["region"].get<std::string>();
      a.status = item["status"].get<std::string>();
      try {
        parse_status(a.status);
      } catch (const Error&) {
        throw fail("assignment " + std::to_string(index) + " has unknown status '" + a.status + "'");
      }
    } else {
      if (!item.contains("replacement_text") || !item["replacement_text"].is_string())
        throw fail("assignment " + std::to_string(index) + " lacks replacement_text");
      a.replacement_text = item["replacement_text"].get<std::string>();
    }
    out.assignments[index] = std::move(a);
  }
  return out;
}

/// Deterministic local answer to an annotation request.
inline AnnotationResponse annotate_rules(const AnnotationRequest& request, const RegionTaxonomy& taxonomy,
                                         const ConfusabilityMap& map) {
  request.validate();
  AnnotationResponse out;
  if (request.task == AnnotationTask::assign_region) {
    for (size_t i = 0; i < request.sentences.size(); ++i) {
      const auto a = assign_region(request.sentences[i], taxonomy);
      out.assignments.push_back({i, a.region, to_string(a.status), {}});
    }
    return out;
  }
  const auto* terms = map.terms_for(*request.context);
  if (!terms) throw Error(ErrorKind::coverage, "confusability map has no region '" + *request.context + "'");
  for (size_t i = 0; i < request.sentences.size(); ++i) {
    const auto match = find_abnormality_term(request.sentences[i], *terms);
    if (!match)
      throw Error(ErrorKind::coverage, "no mapped abnormality for region '" + *request.context + "' in '" +
                                           request.sentences[i] + "'");
    out.assignments.push_back(
        {i, {}, {}, replace_term(request.sentences[i], *match, match->alternatives->front())});
  }
  return out;
}

/// Remote annotation client. Immutable after construction; every call opens
/// its own connection, so one instance may be shared across threads.
class AnnotatorClient {
 public:
  struct Options {
    double timeout_seconds = 30.0;
    std::optional<std::string> bearer_token;
    std::chrono::milliseconds retry_backoff{1000};
  };

  explicit AnnotatorClient(const std::string& endpoint) : AnnotatorClient(endpoint, Options{}) {}

  AnnotatorClient(const std::string& endpoint, Options options) : options_(std::move(options)) {
    const size_t scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos || endpoint.compare(0, scheme_end, "http") != 0)
      throw Error(ErrorKind::config, "annotator endpoint must be an http:// URL: '" + endpoint + "'");
    const size_t path_start = endpoint.find('/', scheme_end + 3);
    origin_ = endpoint.substr(0, path_start);
    std::string base = path_start == std::string::npos ? std::string() : endpoint.substr(path_start);
    while (!base.empty() && base.back() == '/') base.pop_back();
    path_ = base + "/v1/annotate";
    if (origin_.size() <= scheme_end + 3) throw Error(ErrorKind::config, "annotator endpoint has no host");
  }

  /// One retry after a fixed backoff on transport failure; protocol errors
  /// are returned immediately.
  AnnotationResponse annotate(const AnnotationRequest& request) const {
    request.validate();
    const std::string body = request.to_json().dump();
    try {
      return attempt(request, body);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::transport) throw;
    }
    std::this_thread::sleep_for(options_.retry_backoff);
    return attempt(request, body);
  }

  const std::string& path() const { return path_; }

 private:
  AnnotationResponse attempt(const AnnotationRequest& request, const std::string& body) const {
    httplib::Client client(origin_);
    const auto secs = static_cast<time_t>(options_.timeout_seconds);
    const auto usecs = static_cast<time_t>((options_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (options_.bearer_token) headers.emplace("Authorization", "Bearer " + *options_.bearer_token);
    auto result = client.Post(path_, headers, body, "application/json");
    if (!result)
      throw Error(ErrorKind::transport, "POST " + origin_ + path_ + " failed: " + httplib::to_string(result.error()));
    if (result->status != 200)
      throw Error(ErrorKind::protocol, "annotator returned HTTP " + std::to_string(result->status), result->body);
    return parse_annotation_response(result->body, request);
  }

  Options options_;
  std::string origin_;
  std::string path_;
};

inline AnnotationResponse annotate_remote(const AnnotationRequest& request, const std::string& endpoint,
                                          double timeout_seconds) {
  AnnotatorClient::Options options;
  options.timeout_seconds = timeout_seconds;
  return AnnotatorClient(endpoint, options).annotate(request);
}

/// Remote when ABSTEER_ANNOTATOR_URL is set, rules otherwise.
inline AnnotationResponse annotate(const AnnotationRequest& request, const RegionTaxonomy& taxonomy,
                                   const ConfusabilityMap& map) {
  const char* url = std::getenv(kAnnotatorUrlEnv);
  if (url && *url) return AnnotatorClient(url).annotate(request);
  return annotate_rules(request, taxonomy, map);
}

/// structure_report with region assignment delegated to an annotation call.
template <typename AnnotateFn>
StructuredReport structure_report_annotated(std::string_view text, std::string case_id, AnnotateFn&& annotate_fn) {
  StructuredReport report;
  report.case_id = std::move(case_id);
  AnnotationRequest request;
  request.task = AnnotationTask::assign_region;
  request.sentences = segment_sentences(text);
  if (request.sentences.empty()) return report;
  const auto repeats = detect_repetitive(request.sentences);
  const AnnotationResponse response = annotate_fn(request);
  for (size_t i = 0; i < request.sentences.size(); ++i) {
    const auto& a = response.assignments.at(i);
    const EntryStatus status = repeats.count(i) ? EntryStatus::repetitive : parse_status(a.status);
    report.entries.push_back({a.region, request.sentences[i], status});
  }
  return report;
}

}  // namespace absteer
