// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any fails.
//
//   acceptance --work-dir DIR [--only N,...]
//
// Run outputs under DIR are reused when their stamps are current, so a second
// invocation skips retraining.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "forge/evaluation.hpp"
#include "forge/experiment.hpp"
#include "forge/margins.hpp"
#include "forge/stats.hpp"
#include "forge/training.hpp"

using namespace forge;
namespace fs = std::filesystem;

namespace {

fs::path g_work;
const fs::path kConfigs = fs::path(FORGE_SOURCE_DIR) / "configs";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_forge(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(FORGE_BINARY) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// ------------------------------------------------------------------ desk run

struct DeskRun {
  bool ok = false;
  std::string error;
  double seconds = 0.0;  // of the invocation that trained, if known
  bool reused = false;
};

DeskRun& desk_run() {
  static DeskRun run = [] {
    DeskRun r;
    const auto root = g_work / "desk";
    const auto timing = g_work / "desk-seconds.txt";
    r.reused = fs::exists(root / "plots" / "stamp.json");
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_forge("run-all -c " + (kConfigs / "desk.json").string() + " -o " + root.string(),
                               g_work / "desk.log");
    const double elapsed = seconds_since(t0);
    r.ok = code == 0;
    if (!r.ok) {
      r.error = "run-all exited " + std::to_string(code) + " (see " + (g_work / "desk.log").string() + ")";
      return r;
    }
    if (!r.reused || !fs::exists(timing)) std::ofstream(timing) << elapsed << "\n";
    std::ifstream(timing) >> r.seconds;
    return r;
  }();
  return run;
}

ExperimentConfig desk_config() { return load_experiment(kConfigs / "desk.json"); }

// ------------------------------------------------------------------ criteria

Outcome constraint_suite() {
  auto& run = desk_run();
  if (!run.ok) return {false, run.error};
  const auto cfg = desk_config();
  const auto source = read_domain(g_work / "desk" / "data" / "source");
  auto train = cfg.train;
  train.max_epochs = 2;
  train.batch_size = 32;
  const auto t0 = std::chrono::steady_clock::now();
  const auto v = train_detector(cfg.detector, train, source);
  const double secs = seconds_since(t0);

  const auto& conv = v.model.constrained_layer();
  const int k = conv.kernel, taps = k * k;
  double worst_center = 0.0, worst_sum = 0.0;
  for (std::size_t f = 0; f + taps <= conv.weight.size(); f += taps) {
    double s = 0.0;
    for (int i = 0; i < taps; ++i)
      if (i != taps / 2) s += conv.weight[f + i];
    worst_center = std::max(worst_center, std::abs(conv.weight[f + taps / 2] + 1.0));
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  // Re-project in the precision the model stores.
  const auto& w = conv.weight;
  auto again = w;
  project_constrained_weights(std::span(again), k);
  double drift = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    drift = std::max(drift, std::abs(static_cast<double>(again[i]) - static_cast<double>(w[i])));
  // Idempotence on fresh random kernels as well.
  std::mt19937_64 gen(22);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> r(taps * 3);
    for (auto& x : r) x = nd(gen);
    project_constrained_weights(std::span(r), k);
    auto r2 = r;
    project_constrained_weights(std::span(r2), k);
    for (std::size_t i = 0; i < r.size(); ++i) drift = std::max(drift, std::abs(r2[i] - r[i]));
  }
  const bool pass = worst_center < 1e-5 && worst_sum < 1e-5 && drift <= 1e-9 && secs < 120.0;
  return {pass, "2 epochs on " + std::to_string(source.split(Split::kTrain).size()) + " patches in " + fmt(secs) +
                    " s; max |w_c+1| = " + fmt(worst_center) + ", max |sum-1| = " + fmt(worst_sum) +
                    ", projection drift = " + fmt(drift)};
}

Outcome margin_oracle() {
  auto dc = desk_config().detector;
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int trials = 0;
  bool sign_ok = true;
  for (int t = 0; t < 120; ++t) {
    dc.rng_seed = 1000 + t;
    const auto m = nn::build_detector<double>(dc);
    const int n = 1 + t % 3;
    nn::Tensor<double> x(n, 1, dc.input_size, dc.input_size);
    for (auto& v : x.data) v = u(gen);
    std::vector<Label> labels;
    for (int i = 0; i < n; ++i) labels.push_back(gen() % 2 ? Label::kForged : Label::kAuthentic);
    std::map<std::string, nn::Tensor<double>> acts;
    const auto s = first_order_margins(m, x, labels, {kFc3Input}, &acts).at(kFc3Input);
    const auto& fc = m.output_layer();
    for (int i = 0; i < n; ++i) {
      const int y = static_cast<int>(labels[i]);
      const auto h = acts.at(kFc3Input).sample(i);
      double dot = fc.bias[y] - fc.bias[1 - y], nrm = 0.0;
      for (int k = 0; k < fc.in_features; ++k) {
        const double d = fc.weight[y * fc.in_features + k] - fc.weight[(1 - y) * fc.in_features + k];
        dot += d * h[k];
        nrm += d * d;
      }
      const double oracle = dot / std::sqrt(nrm);
      worst = std::max(worst, std::abs(s[i].raw_margin - oracle));
      sign_ok = sign_ok && ((s[i].raw_margin > 0) == (oracle > 0));
    }
    ++trials;
  }
  return {worst <= 1e-6 && sign_ok && trials >= 100,
          std::to_string(trials) + " trials, max |margin - distance| = " + fmt(worst)};
}

Outcome scale_invariance() {
  auto& run = desk_run();
  if (!run.ok) return {false, run.error};
  const auto cfg = desk_config();
  const auto source = read_domain(g_work / "desk" / "data" / "source");
  const auto& test = source.split(Split::kTest);
  const std::vector<std::size_t> idx(test.begin(), test.begin() + std::min<std::size_t>(200, test.size()));
  std::vector<Label> labels;
  for (auto i : idx) labels.push_back(source.patches[i].label);
  const auto x = nn::make_batch<double>(source.patches, idx);
  double worst = 0.0;
  int flips = 0, models = 0;
  for (const auto& p : Experiment(cfg, g_work / "desk").sweep_points()) {
    const auto base = load_checkpoint(g_work / "desk" / "sweep" / p.variant_id).model.cast<double>();
    const auto ref = first_order_margin(base, x, labels, kFc3Input);
    const auto ref_logits = nn::forward_logits(base, x);
    for (double c : {0.1, 10.0}) {
      auto m = base;
      for (auto& w : m.output_layer().weight) w *= c;
      for (auto& b : m.output_layer().bias) b *= c;
      const auto s = first_order_margin(m, x, labels, kFc3Input);
      const auto logits = nn::forward_logits(m, x);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        worst = std::max(worst, std::abs(s[i].raw_margin - ref[i].raw_margin));
        flips += nn::predicted_label(logits, static_cast<int>(i)) != nn::predicted_label(ref_logits, static_cast<int>(i));
      }
    }
    if (++models == 4) break;
  }
  return {worst <= 1e-6 && flips == 0 && models > 0,
          std::to_string(models) + " trained variants x " + std::to_string(idx.size()) +
              " patches, c in {0.1, 10}: max margin change " + fmt(worst) + ", prediction flips " +
              std::to_string(flips)};
}

Outcome gap_identity() {
  auto& run = desk_run();
  if (!run.ok) return {false, run.error};
  const auto cfg = desk_config();
  const auto source = read_domain(g_work / "desk" / "data" / "source");
  int n = 0, nonzero = 0;
  for (const auto& p : Experiment(cfg, g_work / "desk").sweep_points()) {
    const auto dir = g_work / "desk" / "sweep" / p.variant_id;
    if (!fs::exists(dir / "config.json")) continue;
    const auto v = load_checkpoint(dir);
    nonzero += generalization_gap(v.model, v.variant_id, source, source).gap != 0.0;
    ++n;
  }
  return {n == static_cast<int>(cfg.sweep.size()) && nonzero == 0,
          std::to_string(n) + " trained variants, nonzero self-gaps: " + std::to_string(nonzero)};
}

Outcome quantile_curve_oracle() {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int sets = 0, mismatches = 0;
  for (int t = 0; t < 25; ++t) {
    const int n = 30 + 7 * t;
    std::vector<PairRecord> pairs(n);
    for (auto& p : pairs) {
      p.metric_normalized = t % 4 == 0 ? std::round(u(gen) * 20) / 20 : u(gen);
      p.gap = u(gen) * 0.6 - 0.1;
    }
    const CurveOptions opts;
    const auto c = quantile_curve(pairs, opts);
    for (int k = 0; k <= 100; ++k) {
      const double center = k * 0.01;
      std::vector<double> in;
      for (const auto& p : pairs)
        if (p.metric_normalized >= center - 0.05 && p.metric_normalized <= center + 0.05) in.push_back(p.gap);
      std::sort(in.begin(), in.end());
      for (std::size_t l = 0; l < opts.levels.size(); ++l) {
        std::optional<double> expect;
        if (in.size() >= 5) {
          const double pos = opts.levels[l] * static_cast<double>(in.size() - 1);
          const auto lo = static_cast<std::size_t>(pos);
          const auto hi = std::min(lo + 1, in.size() - 1);
          expect = in[lo] + (pos - static_cast<double>(lo)) * (in[hi] - in[lo]);
        }
        mismatches += c.values[l][k] != expect;
      }
    }
    ++sets;
  }
  return {sets >= 20 && mismatches == 0,
          std::to_string(sets) + " random pair sets, 101 centers x 4 levels each, mismatches: " +
              std::to_string(mismatches)};
}

Outcome metric_exactness() {
  struct Case {
    std::vector<double> mu;
    double alpha, expect;
  };
  const std::vector<Case> cases{{{1, 1, 1, 1, 1}, 2, 5}, {{0.5, 2}, 1, 2.5}, {{3, 4}, 2, 25},
                                {{1, 3, 5, 7, 9}, 1, 25}, {{1, 3, 5, 7, 9}, 2, 165}};
  int ok = 0;
  for (const auto& c : cases) ok += margin_metric(c.mu, c.alpha) == c.expect;
  // Through a summary with layer selection.
  MarginSummary s;
  s.layers = {kConvRes, kFc3Input};
  s.per_layer[kConvRes].mu = {1, 1, 1, 1, 1};
  s.per_layer[kFc3Input].mu = {1, 3, 5, 7, 9};
  ok += margin_metric(s, MetricConfig{2.0, "all", {}}) == 170.0;
  ok += margin_metric(s, MetricConfig{1.0, "fc", {kFc3Input}}) == 25.0;
  return {ok == 7, std::to_string(ok) + "/7 hand-computed values reproduced exactly"};
}

// Tiny runs shared by criteria 7 and 9.
struct TinyRuns {
  int code_a = -1, code_b = -1;
  double seconds = 0.0;
};

TinyRuns& tiny_runs() {
  static TinyRuns r = [] {
    TinyRuns t;
    const auto t0 = std::chrono::steady_clock::now();
    for (const char* name : {"tiny-a", "tiny-b"}) fs::remove_all(g_work / name);
    const std::string cfg = (kConfigs / "tiny.json").string();
    t.code_a = run_forge("run-all -c " + cfg + " -o " + (g_work / "tiny-a").string(), g_work / "tiny.log");
    t.code_b = run_forge("run-all -c " + cfg + " -o " + (g_work / "tiny-b").string(), g_work / "tiny.log");
    t.seconds = seconds_since(t0);
    return t;
  }();
  return r;
}

Outcome pair_count() {
  auto& t = tiny_runs();
  if (t.code_a != 0) return {false, "tiny run-all exited " + std::to_string(t.code_a)};
  const auto cfg = load_experiment(kConfigs / "tiny.json");
  const auto pairs = parse_pairs_csv(slurp(g_work / "tiny-a" / "eval" / "pairs.csv"));
  std::set<std::string> variants, targets;
  for (const auto& p : pairs) variants.insert(p.variant_id), targets.insert(p.target_id);
  bool ok = variants.size() == 12 && targets.size() == 4;
  std::string detail = std::to_string(variants.size()) + " kept variants x " + std::to_string(targets.size()) +
                       " targets; pairs per metric:";
  for (const auto& m : cfg.metrics) {
    const auto sel = select_pairs(pairs, m.alpha, m.layer_set);
    // Enumeration oracle: every (variant, target) exactly once.
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : sel) seen.emplace(p.variant_id, p.target_id);
    ok = ok && sel.size() == 48 && seen.size() == 48;
    detail += " M" + fmt(m.alpha) + "_" + m.layer_set + "=" + std::to_string(sel.size());
  }
  return {ok, detail};
}

Outcome desk_study() {
  auto& run = desk_run();
  if (!run.ok) return {false, run.error};
  const auto root = g_work / "desk";
  const auto cfg = desk_config();
  const std::string report = slurp(root / "eval" / "report.txt");
  const bool has_expectation = report.find("expected to be negative") != std::string::npos;
  const bool has_corr = report.find("M2_all: Spearman(normalized metric, mean gap)") != std::string::npos;
  const bool has_curve = report.find("quantile curve of the gap over normalized M2_all") != std::string::npos;
  const auto targets = cfg.targets.pipelines().size();

  std::string corr = "n/a";
  const Json curves = read_json_file(root / "eval" / "curves.json");
  for (const auto& c : curves.at("correlations"))
    if (c.at("alpha").get<double>() == 2.0 && c.at("layer_set") == "all")
      corr = c.at("spearman_mean_gap").is_null() ? "undefined" : fmt(c.at("spearman_mean_gap").get<double>());

  // Determinism: replay margins, evaluation and ranking from the same data
  // and checkpoints in a fresh root and compare bytes.
  const auto replay = g_work / "desk-replay";
  fs::remove_all(replay);
  fs::create_directories(replay);
  fs::copy(root / "data", replay / "data", fs::copy_options::recursive);
  fs::copy(root / "sweep", replay / "sweep", fs::copy_options::recursive);
  const int code = run_forge("run-all -c " + (kConfigs / "desk.json").string() + " -o " + replay.string(),
                             g_work / "desk-replay.log");
  bool same = code == 0;
  for (const char* f : {"eval/pairs.csv", "eval/gaps.csv", "eval/curves.json", "rank/ranking.json"})
    same = same && slurp(root / f) == slurp(replay / f);
  for (const auto& p : Experiment(cfg, root).sweep_points())
    same = same && slurp(root / "margins" / p.variant_id / "margins.json") ==
                       slurp(replay / "margins" / p.variant_id / "margins.json");
  const bool retrained = slurp(g_work / "desk-replay.log").find("[sweep] training") != std::string::npos;

  const bool pass = has_expectation && has_corr && has_curve && targets >= 4 && same && !retrained &&
                    cfg.sweep.size() == 24 && cfg.seed == 22 && cfg.min_source_accuracy == 0.75 &&
                    run.seconds < 45 * 60;
  return {pass, "24 variants, " + std::to_string(targets) + " targets, run-all " + fmt(run.seconds, 4) + " s" +
                    (run.reused ? " (recorded)" : "") + "; replay byte-identical: " + (same ? "yes" : "no") +
                    "; observed Spearman(M2 normalized, mean gap) = " + corr + " (expected negative)"};
}

Outcome determinism() {
  auto& t = tiny_runs();
  if (t.code_a != 0 || t.code_b != 0)
    return {false, "tiny run-all exited " + std::to_string(t.code_a) + "/" + std::to_string(t.code_b)};
  const auto a = g_work / "tiny-a", b = g_work / "tiny-b";
  int compared = 0, differing = 0;
  auto cmp = [&](const fs::path& rel) {
    ++compared;
    if (!fs::exists(a / rel) || slurp(a / rel) != slurp(b / rel)) ++differing;
  };
  cmp("eval/pairs.csv");
  cmp("rank/ranking.json");
  for (const auto& e : fs::directory_iterator(a / "margins"))
    if (e.is_directory()) cmp(fs::path("margins") / e.path().filename() / "margins.json");
  return {compared > 2 && differing == 0,
          "two tiny run-all invocations (" + fmt(t.seconds, 4) + " s): " + std::to_string(compared) +
              " files compared, " + std::to_string(differing) + " differ"};
}

Outcome lr_trace() {
  auto cfg = desk_config();
  SynthConfig synth = cfg.synth;
  synth.image_size = 128;
  synth.patch_size = 32;
  PatchConfig pc;
  pc.patch_size = 32;
  pc.stride = 32;
  std::vector<PipelineParams> pipes(1);
  std::vector<std::array<bool, 3>> keep{{true, true, true}};
  const auto src = build_domains(
      30, [&](int i) { return synthesize_scene(mix_seed(22, static_cast<std::uint64_t>(i)), synth); }, pipes, pc,
      keep)[0];
  auto dc = cfg.detector;
  dc.input_size = 32;
  auto tc = cfg.train;
  tc.max_epochs = 12;
  tc.batch_size = 32;
  tc.lr_init = 1e-3;
  tc.early_stop_patience = 100;
  // Improves for 3 epochs, then stagnates.
  TrainHooks hooks;
  hooks.val_override = [](int epoch, double) { return epoch <= 3 ? 0.5 + 0.1 * epoch : 0.8; };
  const auto v = train_detector(dc, tc, src, hooks);
  const auto dir = g_work / "lr-trace";
  fs::remove_all(dir);
  save_checkpoint(dir, v, "lr-trace");

  std::ifstream in(dir / "history.csv");
  std::string line;
  std::getline(in, line);
  std::vector<double> lr;
  while (std::getline(in, line)) lr.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  // Epochs 4..7 stagnant: epoch 8 runs at 1e-4; 8..11 stagnant: epoch 12 at 1e-5.
  std::vector<double> expect;
  for (int e = 1; e <= 12; ++e) expect.push_back(e <= 7 ? 1e-3 : e <= 11 ? 1e-4 : 1e-5);
  bool ok = lr.size() == expect.size();
  for (std::size_t i = 0; ok && i < lr.size(); ++i) ok = std::abs(lr[i] - expect[i]) <= 1e-15;
  for (std::size_t i = 1; ok && i < lr.size(); ++i)
    if (lr[i] != lr[i - 1]) ok = std::abs(lr[i] / lr[i - 1] - 0.1) < 1e-12;
  std::string trace;
  for (double x : lr) trace += (trace.empty() ? "" : " ") + fmt(x, 2);
  return {ok, "history.csv lr by epoch: " + trace};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = "acceptance-work";
  std::vector<int> only;
  app.add_option("--work-dir", work, "directory for run outputs");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  g_work = fs::absolute(work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"constraint suite", constraint_suite},
      {"margin oracle", margin_oracle},
      {"scale invariance", scale_invariance},
      {"gap identity", gap_identity},
      {"quantile-curve oracle", quantile_curve_oracle},
      {"metric exactness", metric_exactness},
      {"pair-count identity", pair_count},
      {"desk-scale study", desk_study},
      {"determinism", determinism},
      {"lr-schedule trace", lr_trace},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
