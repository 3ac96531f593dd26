// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "absteer/negatives.hpp"
#include "absteer/synthcorpus.hpp"
#include "absteer/toymodel.hpp"
#include "absteer/volprep.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"
#include "toy_util.hpp"

using namespace absteer;
namespace fs = std::filesystem;
namespace at = absteer::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<void(Outcome&)> body;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// --- 1 ---------------------------------------------------------------------

void dpo_identity(Outcome& o) {
  Rng rng(101);
  std::vector<TokenizedPair> pairs;
  for (int i = 0; i < 100; ++i) pairs.push_back(at::random_pair(rng, 40, 3));
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ToyModel m = at::random_model(seed, 40, 3);
    const auto ref = reference_logprobs(m, pairs);
    for (double beta : {0.1, 2.0}) {
      const double loss = stage2_loss(m, pairs, ref, beta).loss;
      o.check(std::abs(loss - std::log(2.0)) <= 1e-9, "seed " + std::to_string(seed) + " loss " + fmt(loss));
    }
  }
  o.detail << "mean loss = ln 2 on 100 pairs, 3 models x 2 betas";
}

// --- 2 ---------------------------------------------------------------------

void gradient_check(Outcome& o) {
  double worst1 = 0.0, worst2 = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(500 + seed);
    // small randomized model with enlarged weights, and a pipeline-sized default init
    const ToyModel small = at::random_model(700 + seed, 20, 5);
    const ToyModel large = init_model(60, 16, 32, 32, 900 + seed);
    for (const ToyModel* m : {&small, &large}) {
      const size_t V = m->dims().vocab_size, d_f = m->dims().d_f;
      const auto s = at::random_sample(rng, V, d_f);
      const auto p = at::random_pair(rng, V, d_f);
      ToyModel ref = *m;
      for (double& x : ref.params()) x *= 0.9;
      worst1 = std::max(worst1, grad_check_stage1(*m, s, 1e-5, seed, 100));
      worst2 = std::max(worst2, grad_check_stage2(*m, ref, p, 0.5, 1e-5, seed, 100));
      worst2 = std::max(worst2, grad_check_stage2(*m, ref, p, 2.0, 1e-5, seed, 100));
    }
  }
  o.check(worst1 < 1e-4, "stage 1 rel error " + fmt(worst1));
  o.check(worst2 < 1e-4, "stage 2 rel error " + fmt(worst2));
  o.detail << "max rel error stage1 " << fmt(worst1) << ", stage2 " << fmt(worst2);
}

// --- 3 ---------------------------------------------------------------------

void metric_oracles(Outcome& o) {
  const json cases = read_json_file(at::fixture("nlg_cases.json"));
  double worst = 0.0;
  for (const auto& c : cases) {
    const Tokens cand = at::words(c["candidate"]), ref = at::words(c["reference"]);
    for (size_t n = 1; n <= 4; ++n) worst = std::max(worst, std::abs(bleu(cand, ref, n) - c["bleu"][n - 1].get<double>()));
    const PRF r = rouge_l(cand, ref);
    worst = std::max(worst, std::abs(r.precision - c["rouge_l"][0].get<double>()));
    worst = std::max(worst, std::abs(r.recall - c["rouge_l"][1].get<double>()));
    worst = std::max(worst, std::abs(r.f1 - c["rouge_l"][2].get<double>()));
    worst = std::max(worst, std::abs(meteor_lite(cand, ref) - c["meteor_lite"].get<double>()));
  }
  o.check(worst <= 1e-9, "NLG fixture abs error " + fmt(worst));

  Rng rng(303);
  size_t mismatches = 0;
  for (auto mode : {AverageMode::micro, AverageMode::macro, AverageMode::weighted, AverageMode::sample})
    for (int i = 0; i < 100; ++i) {
      const double density = 0.05 + 0.5 * rng.uniform();
      const auto pred = at::random_matrix(rng, 20, 18, density), truth = at::random_matrix(rng, 20, 18, density);
      const PRF got = ce_metrics(pred, truth, mode), want = at::ce_oracle(pred, truth, mode);
      mismatches += got.precision != want.precision || got.recall != want.recall || got.f1 != want.f1;
    }
  o.check(mismatches == 0, std::to_string(mismatches) + " ce mismatches");
  o.detail << cases.size() << " NLG cases, max abs error " << fmt(worst) << "; ce 400 matrices, " << mismatches
           << " mismatches";
}

// --- 4 ---------------------------------------------------------------------

void structure_invariants(Outcome& o) {
  Rng rng(404);
  size_t round_trip_failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = at::random_report(rng);
    auto parsed = parse_ab(render_ab(s));
    parsed.case_id = s.case_id;
    round_trip_failures += !(parsed == at::abnormal_only(s));
  }
  o.check(round_trip_failures == 0, std::to_string(round_trip_failures) + " round-trip failures");

  // random reports with at least one corruptible finding sentence
  const auto& catalog = SynthConfig::default_config().catalog;
  const auto& map = ConfusabilityMap::default_map();
  size_t corrupt_failures = 0;
  for (int i = 0; i < 1000; ++i) {
    StructuredReport r = at::random_report(rng, 6);
    const size_t findings = 1 + rng.index(3);
    for (size_t f = 0; f < findings; ++f) {
      const auto& e = catalog[rng.index(catalog.size())];
      const auto& t = e.templates[rng.index(e.templates.size())];
      r.entries.insert(r.entries.begin() + static_cast<std::ptrdiff_t>(rng.index(r.entries.size() + 1)),
                       {e.region, t, EntryStatus::abnormal});
    }
    const auto fake = corrupt_report(r, map, rng.next());
    bool ok = fake.entries.size() == r.entries.size();
    size_t differing = 0;
    for (size_t k = 0; ok && k < r.entries.size(); ++k) {
      ok = r.entries[k].region == fake.entries[k].region && r.entries[k].status == fake.entries[k].status;
      differing += r.entries[k].text != fake.entries[k].text;
    }
    std::vector<std::string> before, after;
    for (const auto& e : parse_ab(render_ab(r)).entries) before.push_back(e.region);
    for (const auto& e : parse_ab(render_ab(fake)).entries) after.push_back(e.region);
    corrupt_failures += !(ok && differing == 1 && before == after);
  }
  o.check(corrupt_failures == 0, std::to_string(corrupt_failures) + " corruption failures");
  o.detail << "1000 round trips, 1000 corruptions, " << round_trip_failures + corrupt_failures << " failures";
}

// --- 5 ---------------------------------------------------------------------

void volprep_contracts(Outcome& o) {
  Rng rng(505);
  Volume v({6, 7, 8}, {1, 1, 1}, VoxelKind::unit);
  for (double& x : v.voxels) x = rng.uniform();
  double identity_diff = 0.0;
  const Volume same = resample(v, v.dims);
  for (size_t i = 0; i < v.voxels.size(); ++i) identity_diff = std::max(identity_diff, std::abs(same.voxels[i] - v.voxels[i]));
  o.check(identity_diff == 0.0 && same.dims == v.dims, "identity diff " + fmt(identity_diff));

  const Dims3 src{5, 6, 7};
  Volume ramp_v(src, {1, 1, 1}, VoxelKind::hu);
  auto ramp = [](double z, double y, double x) { return -2.0 * z + 0.75 * y + 1.5 * x - 40.0; };
  for (size_t z = 0; z < src[0]; ++z)
    for (size_t y = 0; y < src[1]; ++y)
      for (size_t x = 0; x < src[2]; ++x) ramp_v.at(z, y, x) = ramp(z, y, x);
  const Dims3 dst{13, 11, 20};
  const Volume up = resample(ramp_v, dst);
  double ramp_err = 0.0;
  for (size_t z = 0; z < dst[0]; ++z)
    for (size_t y = 0; y < dst[1]; ++y)
      for (size_t x = 0; x < dst[2]; ++x) {
        const double sz = z * (src[0] - 1.0) / (dst[0] - 1), sy = y * (src[1] - 1.0) / (dst[1] - 1),
                     sx = x * (src[2] - 1.0) / (dst[2] - 1);
        ramp_err = std::max(ramp_err, std::abs(up.at(z, y, x) - ramp(sz, sy, sx)));
      }
  o.check(ramp_err <= 1e-9, "ramp error " + fmt(ramp_err));

  const json golden = read_json_file(at::fixture("vol_y4m.golden.json"));
  const Volume g = read_volume(at::fixture(golden.at("source").get<std::string>()));
  const std::string bytes = encode_y4m(window_hu(g, golden["window"][0], golden["window"][1]), golden["fps"]);
  o.check(sha256_hex(bytes) == golden.at("sha256").get<std::string>(), "Y4M digest mismatch");

  Volume hu({1, 1, 4}, {1, 1, 1}, VoxelKind::hu);
  hu.voxels = {-1000.0, 200.0, -1500.0, 900.0};
  const Volume w = window_hu(hu);
  o.check(w.voxels == std::vector<double>({0.0, 1.0, 0.0, 1.0}), "HU endpoints not exact");
  o.detail << "identity diff " << fmt(identity_diff) << ", ramp error " << fmt(ramp_err) << ", digest "
           << (sha256_hex(bytes) == golden.at("sha256").get<std::string>() ? "match" : "mismatch");
}

// --- 6 / 8 -----------------------------------------------------------------

const std::string kCli = ABSTEER_CLI_PATH;
const std::string kScript = std::string(ABSTEER_SCRIPT_DIR) + "/e2e.sh";

struct E2eRun {
  at::TempDir dir;
  int exit_code = -1;
  double seconds = 0.0;
  std::string output;
  explicit E2eRun(const std::string& tag) : dir(tag) {}
};

std::unique_ptr<E2eRun> run_e2e(const std::string& tag) {
  auto run = std::make_unique<E2eRun>(tag);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = at::run_command("bash '" + kScript + "' '" + kCli + "' '" + (run->dir / "work").string() + "'");
  run->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run->exit_code = r.exit_code;
  run->output = r.output;
  return run;
}

std::unique_ptr<E2eRun> first_run;

void end_to_end(Outcome& o) {
  first_run = run_e2e("acceptance_e2e_a");
  const fs::path w = first_run->dir / "work";
  if (first_run->exit_code != 0) {
    o.check(false, "e2e script exit " + std::to_string(first_run->exit_code) + ":\n" + first_run->output);
    return;
  }
  const json synth = read_json_file(w / "data" / "synth.run.json");
  o.check(synth["stats"]["train"] == 200 && synth["stats"]["test"] == 50, "split is not 200/50");

  const json s1 = read_json_file(w / "stage1.ckpt.run.json")["stats"];
  const double reduction = s1["nll_reduction"].get<double>();
  o.check(reduction >= 0.5, "(a) NLL reduction " + fmt(reduction));

  const json s2 = read_json_file(w / "stage2.ckpt.run.json")["stats"];
  const double policy = s2["policy_eval_accuracy"].get<double>(), reference = s2["reference_eval_accuracy"].get<double>();
  o.check(policy >= 0.90, "(b) held-out preference accuracy " + fmt(policy));
  o.check(policy > reference, "(b) stage 2 accuracy " + fmt(policy) + " not above stage 1 " + fmt(reference));

  const double r1 = read_json_file(w / "eval_stage1.json")["ce"]["micro"]["recall"].get<double>();
  const double r2 = read_json_file(w / "eval_stage2.json")["ce"]["micro"]["recall"].get<double>();
  o.check(r2 >= r1, "(c) micro recall stage1+2 " + fmt(r2) + " below stage 1 " + fmt(r1));

  o.check(first_run->seconds < 300.0, "runtime " + fmt(first_run->seconds) + " s");
  o.detail << "(a) NLL " << fmt(s1["initial_nll"].get<double>()) << " -> " << fmt(s1["final_nll"].get<double>())
           << " reduction " << fmt(reduction) << "; (b) pref acc " << fmt(reference) << " -> " << fmt(policy)
           << "; (c) micro recall " << fmt(r1) << " -> " << fmt(r2) << "; script " << fmt(first_run->seconds) << " s";
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& f : fs::recursive_directory_iterator(root)) {
    if (!f.is_regular_file()) continue;
    const std::string rel = fs::relative(f.path(), root).string();
    std::string bytes = read_file(f.path());
    if (rel.size() > 9 && rel.ends_with(".run.json")) {
      json m = json::parse(bytes);
      m.erase("wall_time_seconds");
      bytes = m.dump();
    }
    out[rel] = std::move(bytes);
  }
  return out;
}

void reproducibility(Outcome& o) {
  if (!first_run || first_run->exit_code != 0) {
    o.check(false, "first end-to-end run unavailable");
    return;
  }
  const auto second = run_e2e("acceptance_e2e_b");
  if (second->exit_code != 0) {
    o.check(false, "second e2e run exit " + std::to_string(second->exit_code));
    return;
  }
  const auto a = snapshot(first_run->dir / "work"), b = snapshot(second->dir / "work");
  std::vector<std::string> differing;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second != bytes) differing.push_back(name);
  }
  for (const auto& [name, bytes] : b)
    if (!a.count(name)) differing.push_back(name);
  std::string list;
  for (const auto& d : differing) list += (list.empty() ? "" : ", ") + d;
  o.check(differing.empty(), "differing files: " + list);
  o.detail << a.size() << " files compared, " << differing.size() << " differ";
}

// --- 7 ---------------------------------------------------------------------

void self_consistency(Outcome& o) {
  const auto& labels = LabelSet::default_labels();
  const auto& tax = RegionTaxonomy::default_taxonomy();
  const SynthConfig c = SynthConfig::default_config();
  size_t agree = 0;
  for (size_t i = 0; i < 250; ++i) {
    const SynthCase s = gen_case(c, c.seed ^ static_cast<std::uint64_t>(i), labels, tax);
    agree += label_report(s.r_full, labels) == s.truth;
  }
  o.check(agree == 250, std::to_string(250 - agree) + " disagreements");
  o.detail << agree << "/250 cases agree";
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"1 dpo identity anchor", 1.0, dpo_identity},
      {"2 gradient correctness", 30.0, gradient_check},
      {"3 metric oracles", 10.0, metric_oracles},
      {"4 round-trip and structure invariants", 10.0, structure_invariants},
      {"5 volprep contracts", 10.0, volprep_contracts},
      {"6 end-to-end directional check", 300.0, end_to_end},
      {"7 labeler self-consistency", 5.0, self_consistency},
      {"8 reproducibility", 600.0, reproducibility},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.check(secs < c.budget_seconds, "over budget " + fmt(c.budget_seconds) + " s");
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << " (" << fmt(secs) << " s) " << o.detail.str() << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
