// absteer: pipeline driver. Every subcommand reads its section of the JSON
// config (--config), applies flag overrides, runs one module chain and writes
// a run manifest next to its primary output.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <deque>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "absteer/annotator.hpp"
#include "absteer/common.hpp"
#include "absteer/cot.hpp"
#include "absteer/dpo.hpp"
#include "absteer/metrics.hpp"
#include "absteer/negatives.hpp"
#include "absteer/report_struct.hpp"
#include "absteer/synthcorpus.hpp"
#include "absteer/toymodel.hpp"
#include "absteer/volprep.hpp"

namespace fs = std::filesystem;
using namespace absteer;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

// One subcommand. Every key of `defaults` is also a --flag (underscores
// become dashes) and a key of the matching config section.
struct Command {
  std::string name;
  json defaults;
  CLI::App* app = nullptr;
  std::map<std::string, std::string> raw;
  std::map<std::string, bool> switches;
  std::map<std::string, CLI::Option*> options;

  std::string section() const {
    std::string s = name;
    std::replace(s.begin(), s.end(), '-', '_');
    return s;
  }
};

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

json coerce(const json& def, const json& value, const std::string& where) {
  const auto bad = [&] { return Error(ErrorKind::config, where + ": expected " + def.type_name()); };
  if (def.is_boolean()) {
    if (!value.is_boolean()) throw bad();
    return value;
  }
  if (def.is_string()) {
    if (!value.is_string()) throw bad();
    return value;
  }
  if (def.is_number_unsigned() || def.is_number_integer()) {
    if (value.is_number_unsigned()) return value;
    if (value.is_number_integer() && value.get<std::int64_t>() >= 0) return value.get<std::uint64_t>();
    throw Error(ErrorKind::config, where + ": expected a non-negative integer");
  }
  if (def.is_number()) {
    if (!value.is_number()) throw bad();
    return value.get<double>();
  }
  throw bad();
}

json parse_flag(const json& def, const std::string& text, const std::string& where) {
  if (def.is_string()) return text;
  try {
    size_t used = 0;
    if (def.is_number_unsigned() || def.is_number_integer()) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      const auto v = std::stoull(text, &used);
      if (used == text.size()) return v;
    } else if (def.is_number()) {
      const double v = std::stod(text, &used);
      if (used == text.size()) return v;
    }
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::config, where + ": cannot parse '" + text + "'");
}

json resolve(const Command& cmd, const Globals& g) {
  json cfg = cmd.defaults;
  if (!g.config_path.empty()) {
    const json file = read_json_file(g.config_path);
    if (!file.is_object()) throw Error(ErrorKind::config, g.config_path + ": config must be a JSON object");
    if (file.contains(cmd.section())) {
      const json& sec = file.at(cmd.section());
      if (!sec.is_object()) throw Error(ErrorKind::config, "config section '" + cmd.section() + "' is not an object");
      for (const auto& [k, v] : sec.items()) {
        if (!cmd.defaults.contains(k))
          throw Error(ErrorKind::config, "unknown key '" + k + "' in config section '" + cmd.section() + "'");
        cfg[k] = coerce(cmd.defaults.at(k), v, cmd.section() + "." + k);
      }
    }
  }
  for (const auto& [k, opt] : cmd.options) {
    if (opt->count() == 0) continue;
    if (cmd.defaults.at(k).is_boolean())
      cfg[k] = cmd.switches.at(k);
    else
      cfg[k] = parse_flag(cmd.defaults.at(k), cmd.raw.at(k), flag_name(k));
  }
  if (g.seed && cfg.contains("seed")) cfg["seed"] = *g.seed;
  if (g.threads && cfg.contains("threads")) cfg["threads"] = *g.threads;
  return cfg;
}

std::string need(const json& cfg, const std::string& key) {
  const std::string v = cfg.at(key).get<std::string>();
  if (v.empty()) throw Error(ErrorKind::config, "missing required " + flag_name(key));
  return v;
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

class Run {
 public:
  Run(std::string command, json config)
      : start_(std::chrono::steady_clock::now()), command_(std::move(command)), config_(std::move(config)) {}

  json seeds = json::object();
  json inputs = json::object();
  json outputs = json::object();
  json stats = json::object();

  void finish(const fs::path& manifest_path) const {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m{{"command", command_},
           {"tool_version", kToolVersion},
           {"config", config_},
           {"config_hash", sha256_hex(config_.dump())},
           {"seeds", seeds},
           {"inputs", inputs},
           {"outputs", outputs},
           {"stats", stats},
           {"wall_time_seconds", wall}};
    write_file_atomic(manifest_path, m.dump(2) + "\n");
  }

 private:
  std::chrono::steady_clock::time_point start_;
  std::string command_;
  json config_;
};

RegionTaxonomy load_taxonomy(const json& cfg) {
  const std::string p = cfg.at("taxonomy").get<std::string>();
  return p.empty() ? RegionTaxonomy::default_taxonomy() : RegionTaxonomy::from_json(read_json_file(p));
}

LabelSet load_labels(const json& cfg) {
  const std::string p = cfg.at("labels").get<std::string>();
  return p.empty() ? LabelSet::default_labels() : LabelSet::from_json(read_json_file(p));
}

ConfusabilityMap load_map(const json& cfg, const RegionTaxonomy& taxonomy) {
  const std::string p = cfg.at("confusability").get<std::string>();
  return p.empty() ? ConfusabilityMap::default_map() : ConfusabilityMap::from_json(read_json_file(p), taxonomy);
}

Vocab load_vocab(const std::string& path) {
  try {
    return Vocab::from_json(read_json_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, path + ": malformed vocabulary: " + e.what());
  }
}

std::string field(const json& row, const char* key, const std::string& what) {
  if (!row.contains(key) || !row.at(key).is_string())
    throw Error(ErrorKind::parse, what + ": record lacks string field '" + key + "'");
  return row.at(key).get<std::string>();
}

std::string split_of(const json& row) { return row.value("split", std::string()); }

// case_id -> (split, feature)
struct FeatureTable {
  std::map<std::string, std::pair<std::string, FeatureVector>> rows;
  std::vector<std::string> order;

  static FeatureTable load(const std::string& path) {
    FeatureTable t;
    for (const json& r : read_jsonl_file(path)) {
      const std::string id = field(r, "case_id", path);
      if (!r.contains("feature") || !r.at("feature").is_array())
        throw Error(ErrorKind::parse, path + ": record " + id + " lacks a feature array");
      t.order.push_back(id);
      t.rows[id] = {split_of(r), r.at("feature").get<FeatureVector>()};
    }
    return t;
  }

  const FeatureVector& feature(const std::string& id) const {
    auto it = rows.find(id);
    if (it == rows.end()) throw Error(ErrorKind::alignment, "no feature for case '" + id + "'", id);
    return it->second.second;
  }
};

// ---------------------------------------------------------------------------

int cmd_synth(const json& cfg) {
  Run run("synth", cfg);
  const fs::path out = need(cfg, "out");
  SynthConfig sc = cfg.at("synth_config").get<std::string>().empty()
                       ? SynthConfig::default_config()
                       : SynthConfig::from_json(read_json_file(cfg.at("synth_config").get<std::string>()));
  sc.seed = cfg.at("seed").get<std::uint64_t>();
  const LabelSet labels = load_labels(cfg);
  const RegionTaxonomy taxonomy = load_taxonomy(cfg);
  const auto summary = gen_dataset(cfg.at("n").get<size_t>(), sc, out, labels, taxonomy);
  run.seeds["synth"] = sc.seed;
  if (!cfg.at("synth_config").get<std::string>().empty()) run.inputs["synth_config"] = cfg.at("synth_config");
  run.outputs = {{"dir", out.string()}};
  run.stats = {{"n", summary.n},
               {"train", summary.train_ids.size()},
               {"test", summary.test_ids.size()},
               {"synth_config_hash", summary.config_hash},
               {"finding_counts", summary.finding_counts}};
  run.finish(out / "synth.run.json");
  std::cerr << "synth: " << summary.n << " cases in " << out.string() << "\n";
  return 0;
}

int cmd_structure(const json& cfg) {
  Run run("structure", cfg);
  const std::string in = need(cfg, "in");
  const fs::path out = need(cfg, "out");
  const RegionTaxonomy taxonomy = load_taxonomy(cfg);
  const ConfusabilityMap map = load_map(cfg, taxonomy);
  const char* url = std::getenv(kAnnotatorUrlEnv);
  const bool remote = url && *url;

  std::vector<json> rows, issues;
  std::map<std::string, size_t> status_counts;
  for (const json& r : read_jsonl_file(in)) {
    const std::string id = field(r, "case_id", in);
    const std::string text = field(r, "text", in);
    const StructuredReport rep =
        remote ? structure_report_annotated(text, id,
                                            [&](const AnnotationRequest& q) { return annotate(q, taxonomy, map); })
               : structure_report(text, taxonomy, id);
    json j = to_json(rep);
    if (r.contains("split")) j["split"] = r.at("split");
    rows.push_back(std::move(j));
    for (size_t i = 0; i < rep.entries.size(); ++i) {
      const auto& e = rep.entries[i];
      ++status_counts[to_string(e.status)];
      if (e.status == EntryStatus::uncategorized || e.status == EntryStatus::repetitive)
        issues.push_back({{"case_id", id}, {"index", i}, {"status", to_string(e.status)}, {"text", e.text}});
    }
  }
  write_file_atomic(out, to_jsonl(rows));
  run.inputs = {{"in", in}};
  run.outputs = {{"out", out.string()}};
  if (cfg.at("flag_issues").get<bool>()) {
    fs::path issues_path = cfg.at("issues").get<std::string>();
    if (issues_path.empty()) issues_path = out.parent_path() / "issues.jsonl";
    write_file_atomic(issues_path, to_jsonl(issues));
    run.outputs["issues"] = issues_path.string();
  }
  run.stats = {{"cases", rows.size()},
               {"issues", issues.size()},
               {"status_counts", status_counts},
               {"annotator", remote ? "remote" : "rules"}};
  run.finish(sibling(out, ".run.json"));
  return 0;
}

int cmd_negatives(const json& cfg) {
  Run run("negatives", cfg);
  const std::string in = need(cfg, "in");
  const fs::path out = need(cfg, "out");
  const RegionTaxonomy taxonomy = load_taxonomy(cfg);
  const ConfusabilityMap map = load_map(cfg, taxonomy);
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const auto k = cfg.at("k").get<size_t>();

  std::vector<StructuredReport> dataset;
  std::map<std::string, std::string> splits;
  for (const json& r : read_jsonl_file(in)) {
    dataset.push_back(structured_report_from_json(r));
    splits[dataset.back().case_id] = split_of(r);
  }
  const auto result = build_preference_pairs(dataset, map, seed, k, cfg.at("prompt").get<std::string>());
  std::vector<json> rows;
  for (const auto& p : result.pairs) {
    json j = to_json(p);
    if (!splits[p.case_id].empty()) j["split"] = splits[p.case_id];
    rows.push_back(std::move(j));
  }
  write_file_atomic(out, to_jsonl(rows));
  if (!result.skipped.empty())
    std::cerr << "negatives: " << result.skipped.size() << " cases without a corruptible entry (listed in manifest)\n";
  run.seeds["negatives"] = seed;
  run.inputs = {{"in", in}};
  run.outputs = {{"out", out.string()}};
  run.stats = {{"pairs", result.pairs.size()}, {"skipped", result.skipped}};
  run.finish(sibling(out, ".run.json"));
  return 0;
}

Dims3 parse_dims(const std::string& s) {
  Dims3 d{};
  size_t pos = 0;
  for (size_t i = 0; i < 3; ++i) {
    const size_t end = s.find(',', pos);
    const std::string part = s.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    try {
      size_t used = 0;
      d[i] = std::stoul(part, &used);
      if (used != part.size() || d[i] == 0) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw Error(ErrorKind::config, "--dims expects D,H,W positive integers, got '" + s + "'");
    }
    if ((end == std::string::npos) != (i == 2))
      throw Error(ErrorKind::config, "--dims expects exactly three values, got '" + s + "'");
    pos = end + 1;
  }
  return d;
}

int cmd_prep(const json& cfg) {
  Run run("prep", cfg);
  const double lo = cfg.at("hu_lo").get<double>(), hi = cfg.at("hu_hi").get<double>();
  const auto threads = static_cast<unsigned>(std::max<std::uint64_t>(1, cfg.at("threads").get<std::uint64_t>()));
  const std::string volume = cfg.at("volume").get<std::string>();
  const std::string dataset = cfg.at("dataset").get<std::string>();
  if (volume.empty() == dataset.empty())
    throw Error(ErrorKind::config, "prep needs exactly one of --volume or --dataset");

  if (!volume.empty()) {
    const fs::path out = need(cfg, "y4m");
    const Volume v = resample(window_hu(read_volume(volume), lo, hi), parse_dims(cfg.at("dims").get<std::string>()),
                              threads);
    export_y4m(v, out, static_cast<unsigned>(cfg.at("fps").get<std::uint64_t>()));
    run.inputs = {{"volume", volume}};
    run.outputs = {{"y4m", out.string()}};
    run.stats = {{"dims", v.dims}, {"frames", v.depth()}, {"sha256", sha256_hex(read_file(out))}};
    run.finish(sibling(out, ".run.json"));
    return 0;
  }

  const fs::path out = need(cfg, "out");
  const fs::path reports = cfg.at("reports").get<std::string>().empty()
                               ? fs::path(dataset) / "reports.jsonl"
                               : fs::path(cfg.at("reports").get<std::string>());
  const auto bands = cfg.at("bands").get<size_t>();
  std::vector<std::string> ids, splits;
  for (const json& r : read_jsonl_file(reports)) {
    ids.push_back(field(r, "case_id", reports.string()));
    splits.push_back(split_of(r));
  }
  std::vector<FeatureVector> feats(ids.size());
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (size_t i = t; i < ids.size(); i += threads)
          feats[i] = pool_features(window_hu(read_volume(fs::path(dataset) / "vols" / (ids[i] + ".json")), lo, hi),
                                   bands);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  const std::string fit_split = cfg.at("fit_split").get<std::string>();
  std::vector<FeatureVector> fit_rows;
  for (size_t i = 0; i < ids.size(); ++i)
    if (fit_split.empty() || splits[i] == fit_split) fit_rows.push_back(feats[i]);
  const FeatureScaler scaler = FeatureScaler::fit(fit_rows);
  std::vector<json> rows;
  for (size_t i = 0; i < ids.size(); ++i) {
    json j{{"case_id", ids[i]}, {"feature", scaler.apply(feats[i])}};
    if (!splits[i].empty()) j["split"] = splits[i];
    rows.push_back(std::move(j));
  }
  write_file_atomic(out, to_jsonl(rows));
  const fs::path scaler_path = sibling(out, ".scaler.json");
  write_file_atomic(scaler_path, scaler.to_json().dump(2) + "\n");
  run.inputs = {{"dataset", dataset}, {"reports", reports.string()}};
  run.outputs = {{"out", out.string()}, {"scaler", scaler_path.string()}};
  run.stats = {{"cases", ids.size()}, {"feature_dim", ids.empty() ? 0 : feats[0].size()},
               {"scaler_rows", fit_rows.size()}};
  run.finish(sibling(out, ".run.json"));
  return 0;
}

int cmd_cot(const json& cfg) {
  Run run("cot", cfg);
  const std::string reports = need(cfg, "reports"), structured = need(cfg, "structured"),
                    features = need(cfg, "features");
  const std::string pairs = cfg.at("pairs").get<std::string>();
  const fs::path out_dir = need(cfg, "out_dir");
  const std::string prompt = cfg.at("prompt").get<std::string>();

  std::map<std::string, StructuredReport> by_id;
  for (const json& r : read_jsonl_file(structured)) {
    auto rep = structured_report_from_json(r);
    by_id[rep.case_id] = std::move(rep);
  }
  const FeatureTable table = FeatureTable::load(features);
  struct Case {
    std::string id, split, r_full, r_ab;
  };
  std::vector<Case> cases;
  std::vector<std::string> corpus;
  for (const json& r : read_jsonl_file(reports)) {
    Case c{field(r, "case_id", reports), split_of(r), field(r, "text", reports), ""};
    auto it = by_id.find(c.id);
    if (it == by_id.end()) throw Error(ErrorKind::alignment, "no structured report for case '" + c.id + "'", c.id);
    c.r_ab = render_ab(it->second);
    corpus.push_back(c.r_full);
    corpus.push_back(c.r_ab);
    cases.push_back(std::move(c));
  }
  if (!pairs.empty())
    for (const json& r : read_jsonl_file(pairs)) corpus.push_back(preference_pair_from_json(r).rejected);
  corpus.push_back(prompt);
  const Vocab vocab = build_vocab(corpus, cfg.at("min_count").get<size_t>());

  CoTOptions options;
  options.mask_abnormality_segment = cfg.at("mask_ab").get<bool>();
  std::vector<json> rows;
  for (const auto& c : cases) {
    json j = to_json(build_cot_sample(prompt, c.r_ab, c.r_full, table.feature(c.id), vocab, c.id, options));
    if (!c.split.empty()) j["split"] = c.split;
    rows.push_back(std::move(j));
  }
  write_file_atomic(out_dir / "vocab.json", vocab.to_json().dump() + "\n");
  write_file_atomic(out_dir / "samples.jsonl", to_jsonl(rows));
  run.inputs = {{"reports", reports}, {"structured", structured}, {"features", features}};
  if (!pairs.empty()) run.inputs["pairs"] = pairs;
  run.outputs = {{"vocab", (out_dir / "vocab.json").string()}, {"samples", (out_dir / "samples.jsonl").string()}};
  run.stats = {{"samples", rows.size()}, {"vocab_size", vocab.size()}};
  run.finish(out_dir / "cot.run.json");
  return 0;
}

TrainConfig train_config(const json& cfg) {
  TrainConfig tc;
  tc.learning_rate = cfg.at("lr").get<double>();
  tc.epochs = cfg.at("epochs").get<size_t>();
  tc.batch_size = cfg.at("batch_size").get<size_t>();
  tc.grad_clip = cfg.at("grad_clip").get<double>();
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  return tc;
}

int cmd_train_stage1(const json& cfg) {
  Run run("train-stage1", cfg);
  const std::string samples_path = need(cfg, "samples"), vocab_path = need(cfg, "vocab");
  const fs::path out = need(cfg, "out");
  const std::string split = cfg.at("split").get<std::string>();
  const Vocab vocab = load_vocab(vocab_path);
  std::vector<CoTSample> samples;
  for (const json& r : read_jsonl_file(samples_path))
    if (split.empty() || split_of(r) == split) samples.push_back(cot_sample_from_json(r));
  if (samples.empty()) throw Error(ErrorKind::config, "no training samples in split '" + split + "'");

  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const TrainConfig tc = train_config(cfg);
  tc.validate();
  const ToyModel init = init_model(vocab.size(), cfg.at("d_e").get<size_t>(), cfg.at("d_h").get<size_t>(),
                                   samples.front().feature.size(), seed);
  const double gc = grad_check_stage1(init, samples.front(), 1e-5, seed);
  if (!(gc < 1e-4)) throw Error(ErrorKind::numeric, "stage 1 gradient check failed: max rel error " + std::to_string(gc));

  const double initial = stage1_loss(init, samples);
  const auto result = train_stage1(init, samples, tc);
  const double final_nll = stage1_loss(result.model, samples);
  save_checkpoint(result.model, out);
  run.seeds = {{"init", seed}, {"shuffle", tc.seed}};
  run.inputs = {{"samples", samples_path}, {"vocab", vocab_path}};
  run.outputs = {{"checkpoint", out.string()}};
  run.stats = {{"samples", samples.size()},
               {"parameters", result.model.dims().parameter_count()},
               {"grad_check_max_rel_error", gc},
               {"initial_nll", initial},
               {"final_nll", final_nll},
               {"nll_reduction", initial > 0.0 ? 1.0 - final_nll / initial : 0.0},
               {"loss_curve", result.loss_curve}};
  run.finish(sibling(out, ".run.json"));
  std::cerr << "train-stage1: NLL " << initial << " -> " << final_nll << "\n";
  return 0;
}

std::vector<TokenizedPair> load_pairs(const std::string& path, const FeatureTable& table, const Vocab& vocab,
                                      const std::string& split) {
  std::vector<TokenizedPair> out;
  for (const json& r : read_jsonl_file(path)) {
    if (!split.empty() && split_of(r) != split) continue;
    const PreferencePair p = preference_pair_from_json(r);
    out.push_back({p.case_id, table.feature(p.case_id), tokenize(p.prompt, vocab), tokenize(p.chosen, vocab),
                   tokenize(p.rejected, vocab)});
  }
  return out;
}

int cmd_train_stage2(const json& cfg) {
  Run run("train-stage2", cfg);
  const std::string pairs_path = need(cfg, "pairs"), features = need(cfg, "features"), vocab_path = need(cfg, "vocab"),
                    init_path = need(cfg, "init");
  const fs::path out = need(cfg, "out");
  const double beta = cfg.at("beta").get<double>();
  const Vocab vocab = load_vocab(vocab_path);
  const ToyModel reference = load_checkpoint(init_path);
  if (reference.dims().vocab_size != vocab.size())
    throw Error(ErrorKind::shape, "checkpoint vocabulary size does not match " + vocab_path);
  const FeatureTable table = FeatureTable::load(features);
  const auto train = load_pairs(pairs_path, table, vocab, cfg.at("split").get<std::string>());
  const auto held_out = load_pairs(pairs_path, table, vocab, cfg.at("eval_split").get<std::string>());
  if (train.empty()) throw Error(ErrorKind::config, "no training preference pairs");

  const TrainConfig tc = train_config(cfg);
  const double gc = grad_check_stage2(reference, reference, train.front(), beta, 1e-5, tc.seed);
  if (!(gc < 1e-4)) throw Error(ErrorKind::numeric, "stage 2 gradient check failed: max rel error " + std::to_string(gc));
  const auto result = train_stage2(reference, reference, train, beta, tc);
  save_checkpoint(result.model, out);
  run.seeds = {{"shuffle", tc.seed}};
  run.inputs = {{"pairs", pairs_path}, {"features", features}, {"vocab", vocab_path}, {"init", init_path}};
  run.outputs = {{"checkpoint", out.string()}};
  run.stats = {{"train_pairs", train.size()},
               {"eval_pairs", held_out.size()},
               {"grad_check_max_rel_error", gc},
               {"reference_train_accuracy", preference_accuracy(reference, train)},
               {"policy_train_accuracy", preference_accuracy(result.model, train)},
               {"reference_eval_accuracy", preference_accuracy(reference, held_out)},
               {"policy_eval_accuracy", preference_accuracy(result.model, held_out)},
               {"loss_curve", result.loss_curve},
               {"margin_curve", result.margin_curve}};
  run.finish(sibling(out, ".run.json"));
  std::cerr << "train-stage2: held-out preference accuracy " << run.stats["reference_eval_accuracy"] << " -> "
            << run.stats["policy_eval_accuracy"] << "\n";
  return 0;
}

int cmd_generate(const json& cfg) {
  Run run("generate", cfg);
  const std::string model_path = need(cfg, "model"), vocab_path = need(cfg, "vocab"), features = need(cfg, "features");
  const fs::path out = need(cfg, "out");
  const std::string split = cfg.at("split").get<std::string>();
  const Vocab vocab = load_vocab(vocab_path);
  const ToyModel model = load_checkpoint(model_path);
  const FeatureTable table = FeatureTable::load(features);
  const auto prefix = decoder_prefix(tokenize(cfg.at("prompt").get<std::string>(), vocab));
  const auto max_len = cfg.at("max_len").get<size_t>();

  std::vector<json> rows;
  size_t with_sep = 0;
  for (const auto& id : table.order) {
    const auto& [case_split, feature] = table.rows.at(id);
    if (!split.empty() && case_split != split) continue;
    auto ids = generate(model, feature, prefix, max_len);
    if (!ids.empty() && ids.back() == kEos) ids.pop_back();
    const auto sep = std::find(ids.begin(), ids.end(), kSep);
    std::string ab, full;
    if (sep == ids.end()) {
      full = detokenize(ids, vocab);
    } else {
      ++with_sep;
      ab = detokenize(std::vector<TokenId>(ids.begin(), sep), vocab);
      full = detokenize(std::vector<TokenId>(sep + 1, ids.end()), vocab);
    }
    json j{{"case_id", id}, {"text", full}, {"ab", ab}};
    if (!case_split.empty()) j["split"] = case_split;
    rows.push_back(std::move(j));
  }
  write_file_atomic(out, to_jsonl(rows));
  run.inputs = {{"model", model_path}, {"vocab", vocab_path}, {"features", features}};
  run.outputs = {{"out", out.string()}};
  run.stats = {{"cases", rows.size()}, {"with_separator", with_sep}};
  run.finish(sibling(out, ".run.json"));
  return 0;
}

int cmd_evaluate(const json& cfg) {
  Run run("evaluate", cfg);
  const std::string cand_path = need(cfg, "candidates"), ref_path = need(cfg, "references");
  const std::string out = cfg.at("out").get<std::string>();
  const std::string split = cfg.at("split").get<std::string>();
  const LabelSet labels = load_labels(cfg);
  std::vector<json> refs;
  for (const json& r : read_jsonl_file(ref_path))
    if (split.empty() || split_of(r) == split) refs.push_back(r);
  const EvalResult res = evaluate_run(case_texts_from_jsonl(read_jsonl_file(cand_path)), case_texts_from_jsonl(refs),
                                      labels);
  std::cout << res.table(cfg.at("percent").get<bool>());
  run.inputs = {{"candidates", cand_path}, {"references", ref_path}};
  run.stats = res.to_json();
  if (!out.empty()) {
    write_file_atomic(out, res.to_json().dump(2) + "\n");
    run.outputs = {{"out", out}};
    run.finish(sibling(out, ".run.json"));
  } else {
    run.finish(sibling(cand_path, ".eval.run.json"));
  }
  return 0;
}

// ---------------------------------------------------------------------------

const std::string kPromptDefault(kDefaultPrompt);

std::deque<Command> make_commands() {
  std::deque<Command> cmds;
  cmds.push_back({"synth",
                  {{"out", ""}, {"n", 250u}, {"seed", 7u}, {"synth_config", ""}, {"labels", ""}, {"taxonomy", ""}}});
  cmds.push_back({"structure",
                  {{"in", ""},
                   {"out", ""},
                   {"taxonomy", ""},
                   {"confusability", ""},
                   {"flag_issues", false},
                   {"issues", ""}}});
  cmds.push_back({"negatives",
                  {{"in", ""},
                   {"out", ""},
                   {"taxonomy", ""},
                   {"confusability", ""},
                   {"seed", 11u},
                   {"k", 1u},
                   {"prompt", kPromptDefault}}});
  cmds.push_back({"prep",
                  {{"volume", ""},
                   {"y4m", ""},
                   {"dims", "240,480,480"},
                   {"fps", 18u},
                   {"dataset", ""},
                   {"reports", ""},
                   {"out", ""},
                   {"bands", 16u},
                   {"fit_split", "train"},
                   {"hu_lo", -1000.0},
                   {"hu_hi", 200.0},
                   {"threads", 1u}}});
  cmds.push_back({"cot",
                  {{"reports", ""},
                   {"structured", ""},
                   {"features", ""},
                   {"pairs", ""},
                   {"out_dir", ""},
                   {"prompt", kPromptDefault},
                   {"min_count", 1u},
                   {"mask_ab", false}}});
  cmds.push_back({"train-stage1",
                  {{"samples", ""},
                   {"vocab", ""},
                   {"out", ""},
                   {"split", "train"},
                   {"seed", 1u},
                   {"lr", 5.0},
                   {"epochs", 150u},
                   {"batch_size", 0u},
                   {"grad_clip", 5.0},
                   {"d_e", 16u},
                   {"d_h", 32u}}});
  cmds.push_back({"train-stage2",
                  {{"pairs", ""},
                   {"features", ""},
                   {"vocab", ""},
                   {"init", ""},
                   {"out", ""},
                   {"split", "train"},
                   {"eval_split", "test"},
                   {"beta", 2.0},
                   {"seed", 1u},
                   {"lr", 0.5},
                   {"epochs", 100u},
                   {"batch_size", 0u},
                   {"grad_clip", 5.0}}});
  cmds.push_back({"generate",
                  {{"model", ""},
                   {"vocab", ""},
                   {"features", ""},
                   {"out", ""},
                   {"split", "test"},
                   {"prompt", kPromptDefault},
                   {"max_len", 200u}}});
  cmds.push_back({"evaluate",
                  {{"candidates", ""},
                   {"references", ""},
                   {"out", ""},
                   {"split", ""},
                   {"labels", ""},
                   {"percent", false}}});
  return cmds;
}

const std::map<std::string, int (*)(const json&)> kHandlers = {
    {"synth", cmd_synth},         {"structure", cmd_structure},
    {"negatives", cmd_negatives}, {"prep", cmd_prep},
    {"cot", cmd_cot},             {"train-stage1", cmd_train_stage1},
    {"train-stage2", cmd_train_stage2}, {"generate", cmd_generate},
    {"evaluate", cmd_evaluate}};

const std::map<std::string, std::string> kDescriptions = {
    {"synth", "generate a synthetic volume/report corpus"},
    {"structure", "segment reports into region-structured entries"},
    {"negatives", "build hard-negative preference pairs"},
    {"prep", "window/resample a volume to Y4M, or pool dataset features"},
    {"cot", "build the vocabulary and chain-of-thought samples"},
    {"train-stage1", "supervised training on CoT samples"},
    {"train-stage2", "preference optimization from a stage 1 checkpoint"},
    {"generate", "greedy decoding for each case"},
    {"evaluate", "NLG and clinical-efficacy metrics"}};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"absteer: abnormality-steered report generation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config with per-command sections");
  app.add_option("--seed", g.seed, "override the command's seed");
  app.add_option("--threads", g.threads, "worker threads where supported");
  app.set_version_flag("--version", kToolVersion);

  auto cmds = make_commands();
  for (auto& c : cmds) {
    c.app = app.add_subcommand(c.name, kDescriptions.at(c.name));
    for (const auto& [k, v] : c.defaults.items()) {
      if (v.is_boolean()) {
        c.switches[k] = false;
        c.options[k] = c.app->add_flag(flag_name(k), c.switches[k]);
      } else {
        c.raw[k];
        c.options[k] = c.app->add_option(flag_name(k), c.raw[k]);
        c.options[k]->default_str(v.is_string() ? v.get<std::string>() : v.dump());
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  for (const auto& c : cmds) {
    if (!c.app->parsed()) continue;
    try {
      return kHandlers.at(c.name)(resolve(c, g));
    } catch (const Error& e) {
      std::cerr << "absteer " << c.name << ": " << to_string(e.kind()) << " error: " << e.what() << "\n";
      return e.kind() == ErrorKind::io || e.kind() == ErrorKind::config ? 2 : 1;
    } catch (const std::exception& e) {
      std::cerr << "absteer " << c.name << ": " << e.what() << "\n";
      return 1;
    }
  }
  return 1;
}
