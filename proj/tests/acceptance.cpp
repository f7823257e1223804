// Acceptance suite: one PASS/FAIL line per criterion, artifacts under --out.
// Exit status is non-zero if any criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "clan_forge.hpp"

namespace fs = std::filesystem;
using namespace clan_forge;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kDegeneracyTolerance = 1e-12;
constexpr std::size_t kDegeneracyIters = 100;
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kIterations = 2000;
constexpr double kOrderingSeconds = 3600.0;
constexpr double kRareSlack = 0.02;
constexpr double kOracleTolerance = 1e-10;
constexpr std::size_t kOracleCases = 100;
constexpr std::size_t kDeterminismIters = 100;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Report {
  json summary = json::object();
  bool all = true;

  void emit(int id, const std::string& name, const Outcome& o) {
    std::printf("%s criterion %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    summary[std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"detail", o.detail}};
    all = all && o.pass;
  }
};

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void log(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  GradCheckOptions opt;
  opt.tolerance = kGradTolerance;
  const GradCheckReport rep = run_grad_checks(opt);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : rep.results) {
    if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = r.name;
  }
  const bool ok = rep.all_pass() && rep.seconds < kGradSeconds;
  std::string detail = std::to_string(rep.results.size()) + " checks, max rel error " + fmt(worst) + " (" +
                       worst_name + "), " + fmt(rep.seconds) + " s";
  for (const auto& f : rep.failures()) detail += ", failed " + f;
  return {ok, detail};
}

Outcome tan_degeneracy(const DataBundle& data) {
  TrainConfig tan;
  tan.method = Method::tan;
  tan.iterations = kDegeneracyIters;
  tan.eval_every = kDegeneracyIters;
  TrainConfig clan = tan;
  clan.method = Method::clan;
  clan.lambda_local = 0.0;
  clan.epsilon = 1.0;
  const RunRecord a = train(tan, data).run;
  const RunRecord b = train(clan, data).run;
  if (a.iterations.size() != b.iterations.size()) return {false, "iteration counts differ"};
  double worst = 0.0;
  for (std::size_t i = 0; i < a.iterations.size(); ++i) {
    const LossBundle &x = a.iterations[i].losses, &y = b.iterations[i].losses;
    for (auto [p, q] : {std::pair{x.seg, y.seg}, {x.weight_disc, y.weight_disc}, {x.adv_g, y.adv_g},
                        {x.adv_d, y.adv_d}, {x.total_g, y.total_g}}) {
      worst = std::max(worst, std::abs(p - q));
    }
  }
  return {worst <= kDegeneracyTolerance && a.iterations.size() == kDegeneracyIters,
          std::to_string(a.iterations.size()) + " iterations, max |TAN - CLAN(0,1)| " + fmt(worst)};
}

// ---------------------------------------------------------------------------
// The 3 methods x 5 seeds grid shared by criteria 3 to 7.

struct MethodRuns {
  Method method;
  std::vector<RunRecord> runs;  // indexed by seed - 1
};

std::vector<MethodRuns> run_grid(const DataBundle& data, const fs::path& out) {
  std::vector<MethodRuns> grid{{Method::source_only, {}}, {Method::tan, {}}, {Method::clan, {}}};
  for (auto& m : grid) m.runs.resize(kSeeds);
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t s = 0; s < kSeeds; ++s)
    for (std::size_t m = 0; m < grid.size(); ++m) jobs.push_back({m, s});

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const auto [m, s] = jobs[j];
      TrainConfig c;
      c.method = grid[m].method;
      c.seed = s + 1;
      c.iterations = kIterations;
      try {
        RunRecord r = train(c, data).run;
        const std::string stem = std::string(method_name(c.method)) + "_seed" + std::to_string(c.seed);
        save_run_record(r, (out / (stem + ".jsonl")).string());
        write_text_file((out / (stem + ".csv")).string(), metrics_csv(r));
        std::lock_guard lock(mu);
        log(stem + ": mIoU " + fmt(r.evals.back().miou) + " in " + fmt(r.wall_seconds) + " s");
        grid[m].runs[s] = std::move(r);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(sweep_threads(), 1, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return grid;
}

const MethodRuns& runs_of(const std::vector<MethodRuns>& g, Method m) {
  return *std::find_if(g.begin(), g.end(), [&](const MethodRuns& r) { return r.method == m; });
}

std::vector<double> final_miou(const MethodRuns& m) {
  std::vector<double> v;
  for (const auto& r : m.runs) v.push_back(r.evals.back().miou);
  return v;
}

Outcome weight_bounds(const MethodRuns& clan) {
  const TrainConfig d;
  const double lo = d.epsilon, hi = 2.0 * d.lambda_local + d.epsilon;
  std::size_t violations = 0, iters = 0;
  double wmin = INFINITY, wmax = -INFINITY;
  for (const auto& r : clan.runs) {
    for (const auto& it : r.iterations) {
      ++iters;
      wmin = std::min(wmin, it.weight_min);
      wmax = std::max(wmax, it.weight_max);
      if (it.weight_min < lo || it.weight_max > hi) ++violations;
    }
  }
  return {violations == 0 && iters == kSeeds * kIterations,
          std::to_string(iters) + " iterations, observed [" + fmt(wmin) + ", " + fmt(wmax) + "] within [" + fmt(lo) +
              ", " + fmt(hi) + "], " + std::to_string(violations) + " violations"};
}

Outcome method_ordering(const std::vector<MethodRuns>& g) {
  const auto so = final_miou(runs_of(g, Method::source_only));
  const auto tan = final_miou(runs_of(g, Method::tan));
  const auto clan = final_miou(runs_of(g, Method::clan));
  std::vector<double> diff;
  for (std::size_t s = 0; s < kSeeds; ++s) diff.push_back(clan[s] - tan[s]);
  double seconds = 0.0;
  for (const auto& m : g)
    for (const auto& r : m.runs) seconds += r.wall_seconds;
  const double mso = median(so), mtan = median(tan), mclan = median(clan), mdiff = median(diff);
  const bool ok = mso < mtan && mtan <= mclan && mdiff > 0.0 && seconds < kOrderingSeconds;
  return {ok, "median mIoU source-only " + fmt(mso) + ", tan " + fmt(mtan) + ", clan " + fmt(mclan) +
                  ", median(clan - tan) " + fmt(mdiff) + ", summed run time " + fmt(seconds) + " s"};
}

Outcome rare_class(const std::vector<MethodRuns>& g, const SceneSpec& scene) {
  auto rare = [&](Method m) {
    std::vector<double> v;
    for (const auto& r : runs_of(g, m).runs) v.push_back(rare_class_iou(r, scene).value_or(0.0));
    return median(v);
  };
  const double so = rare(Method::source_only), clan = rare(Method::clan);
  return {clan >= so - kRareSlack, "median rare-class IoU clan " + fmt(clan) + ", source-only " + fmt(so)};
}

Outcome ccd_behaviour(const std::vector<MethodRuns>& g, std::size_t classes) {
  std::size_t checked = 0;
  bool first_exact = true;
  for (const auto& m : g) {
    for (const auto& r : m.runs) {
      for (const auto& v : r.evals.front().ccd) {
        if (!v) continue;
        ++checked;
        first_exact = first_exact && *v == 1.0;
      }
    }
  }
  // Per class, median over seeds of the final normalised CCD; then the
  // median over classes.
  auto class_medians = [&](Method m) {
    std::vector<double> per_class;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> v;
      for (const auto& r : runs_of(g, m).runs)
        if (r.evals.back().ccd[c]) v.push_back(*r.evals.back().ccd[c]);
      if (!v.empty()) per_class.push_back(median(v));
    }
    return per_class;
  };
  const auto clan = class_medians(Method::clan), tan = class_medians(Method::tan);
  const double mc = median(clan), mt = median(tan);
  std::string detail = std::to_string(checked) + " first-snapshot entries " + (first_exact ? "all" : "not all") +
                       " exactly 1; final median-class CCD clan " + fmt(mc) + ", tan " + fmt(mt) + "; per class clan/tan";
  for (std::size_t c = 0; c < std::min(clan.size(), tan.size()); ++c) detail += " " + fmt(clan[c]) + "/" + fmt(tan[c]);
  return {first_exact && checked > 0 && mc <= mt, detail};
}

Outcome d_stability(const MethodRuns& clan, const std::vector<SweepRow>& sweep) {
  std::vector<double> src, tgt;
  for (const auto& r : clan.runs) {
    const DStat s = d_convergence_stat(r, kDWindowFraction);
    src.push_back(s.source);
    tgt.push_back(s.target);
  }
  const double ms = median(src), mt = median(tgt);
  const bool defaults_ok = ms < kDConvergenceBand && mt < kDConvergenceBand;
  const auto low = std::find_if(sweep.begin(), sweep.end(), [](const SweepRow& r) { return r.point.epsilon == 0.1; });
  const bool checked = low != sweep.end() && low->ok && std::isfinite(low->dstat.source) &&
                       std::isfinite(low->dstat.target);
  std::string detail = "default clan median D stat source " + fmt(ms) + ", target " + fmt(mt) + " (band " +
                       fmt(kDConvergenceBand) + ")";
  if (low == sweep.end()) {
    detail += "; no epsilon=0.1 row";
  } else if (!low->ok) {
    detail += "; epsilon=0.1 run failed: " + low->error;
  } else {
    detail += "; epsilon=0.1 D stat " + fmt(low->dstat.source) + "/" + fmt(low->dstat.target) +
              (low->converged ? " inside band" : " flagged outside band");
  }
  return {defaults_ok && checked, detail};
}

Outcome determinism(const DataBundle& data, const fs::path& out) {
  TrainConfig c;
  c.iterations = kDeterminismIters;
  c.eval_every = kDeterminismIters / 4;
  const std::string a = metrics_csv(train(c, data).run);
  const std::string b = metrics_csv(train(c, data).run);
  write_text_file((out / "determinism_a.csv").string(), a);
  write_text_file((out / "determinism_b.csv").string(), b);
  return {a == b && !a.empty(), std::to_string(a.size()) + " CSV bytes, " + (a == b ? "identical" : "different")};
}

// ---------------------------------------------------------------------------
// Scalar oracles, written without the tensor library.

struct Oracle {
  std::mt19937_64 rng{20240601};

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

  // Random probability vectors with occasional exact zeros to reach the clamp.
  std::vector<double> simplex(std::size_t c) {
    std::vector<double> v(c);
    double s = 0.0;
    for (double& x : v) s += (x = (uniform(0, 1) < 0.1) ? 0.0 : uniform(0.01, 1.0));
    if (s == 0.0) v[0] = s = 1.0;
    for (double& x : v) x /= s;
    return v;
  }
};

Outcome loss_oracles() {
  Oracle o;
  double worst_seg = 0, worst_disc = 0, worst_weight = 0, worst_total = 0;
  for (std::size_t k = 0; k < kOracleCases; ++k) {
    const std::size_t n = 1 + o.index(2), c = 2 + o.index(4), h = 1 + o.index(4), w = 1 + o.index(4);
    const std::size_t hw = h * w;
    Tensor p1({n, c, h, w}), p2({n, c, h, w});
    std::vector<LabelMap> labels(n, LabelMap(h, w));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < hw; ++i) {
        const auto a = o.simplex(c), q = o.simplex(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
          p1[(b * c + ch) * hw + i] = a[ch];
          p2[(b * c + ch) * hw + i] = q[ch];
        }
        labels[b].values[i] = static_cast<std::uint8_t>(o.index(c));
      }
    }

    double seg = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i)
        seg -= std::log(std::max(p1[(b * c + labels[b].values[i]) * hw + i], 1e-12));
    seg /= static_cast<double>(n * hw);
    worst_seg = std::max(worst_seg, std::abs(seg_loss(p1, labels) - seg));

    const double lambda_local = o.uniform(0.0, 100.0), epsilon = o.uniform(1e-3, 2.0);
    const DiscrepancyMap dm = discrepancy_map(p1, p2);
    const AdaptiveWeightMap wm = adaptive_weight_map(dm, lambda_local, epsilon);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < hw; ++i) {
        double dot = 0, aa = 0, qq = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double a = p1[(b * c + ch) * hw + i], q = p2[(b * c + ch) * hw + i];
          dot += a * q;
          aa += a * a;
          qq += q * q;
        }
        const double m = 1.0 - dot / std::sqrt(aa * qq);
        worst_disc = std::max(worst_disc, std::abs(dm.values[b * hw + i] - m));
        worst_weight = std::max(worst_weight, std::abs(wm.values[b * hw + i] - (lambda_local * m + epsilon)));
      }
    }

    const double s = o.uniform(0, 5), wd = o.uniform(-1, 1), ag = o.uniform(0, 50);
    const double lw = o.uniform(0, 0.1), la = o.uniform(0, 0.01);
    worst_total = std::max(worst_total, std::abs(total_generator_loss(s, wd, ag, lw, la) - (s + lw * wd + la * ag)));
  }
  const double worst = std::max({worst_seg, worst_disc, worst_weight, worst_total});
  return {worst < kOracleTolerance, std::to_string(kOracleCases) + " cases, max abs error seg " + fmt(worst_seg) +
                                        ", discrepancy " + fmt(worst_disc) + ", weight " + fmt(worst_weight) +
                                        ", total " + fmt(worst_total)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clan-forge acceptance suite"};
  std::string out_dir = "acceptance_artifacts";
  app.add_option("--out", out_dir, "Artifact directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path out(out_dir);
  fs::create_directories(out / "runs");

  Report report;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    report.emit(1, "gradient fidelity", gradient_fidelity());
    report.emit(9, "loss oracles", loss_oracles());

    const TrainConfig defaults;
    const DataBundle data = make_bundle(defaults.data);
    report.emit(2, "TAN degeneracy", tan_degeneracy(data));
    report.emit(8, "determinism", determinism(data, out));

    const std::vector<MethodRuns> grid = run_grid(data, out / "runs");
    const MethodRuns& clan = runs_of(grid, Method::clan);
    report.emit(3, "weight-map bounds", weight_bounds(clan));
    report.emit(4, "method ordering", method_ordering(grid));
    report.emit(5, "rare-class transfer", rare_class(grid, data.config.scene));
    report.emit(6, "CCD behaviour", ccd_behaviour(grid, data.config.scene.num_classes));

    std::vector<const RunRecord*> seed1;
    for (const auto& m : grid) seed1.push_back(&m.runs.front());
    write_text_file((out / "ccd_curves.svg").string(), ccd_curves_svg(seed1));
    write_text_file((out / "ccd_bars.svg").string(), ccd_bars_svg(seed1));

    std::vector<SweepPoint> eps_axis;
    for (const SweepPoint& p : paper_grid())
      if (p.axis == "epsilon") eps_axis.push_back(p);
    TrainConfig base;
    base.iterations = kIterations;
    const auto sweep = run_sweep(base, eps_axis, data, sweep_threads(), [](const SweepRow& r, const RunRecord*) {
      log("sweep lambda_local " + fmt(r.point.lambda_local) + " epsilon " + fmt(r.point.epsilon) + ": " +
          (r.ok ? "D stat " + fmt(r.dstat.source) + "/" + fmt(r.dstat.target) : r.error));
    });
    write_text_file((out / "sweep.csv").string(), sweep_csv(sweep));
    write_text_file((out / "sweep.svg").string(), sweep_bars_svg(sweep));
    report.emit(7, "discriminator stability", d_stability(clan, sweep));
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    report.all = false;
  }
  report.summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.summary["all_pass"] = report.all;
  write_text_file((out / "acceptance.json").string(), report.summary.dump(2) + "\n");
  return report.all ? 0 : 1;
}
