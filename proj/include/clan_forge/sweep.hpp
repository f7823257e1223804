#pragma once

// Parameter sweep over λ_local and ε.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "clan_forge/export.hpp"
#include "clan_forge/metrics.hpp"
#include "clan_forge/trainer.hpp"

namespace clan_forge {

/// D is considered converged when its trailing mean |D − 0.5| is below this
/// on both domains.
inline constexpr double kDConvergenceBand = 0.2;
inline constexpr double kDWindowFraction = 0.1;

struct SweepPoint {
  std::string axis;  // "epsilon" or "lambda_local"
  double lambda_local = 40.0;
  double epsilon = 0.4;
};

/// ε-sweep at λ_local = 40, then λ_local-sweep at ε = 0.4.
inline std::vector<SweepPoint> paper_grid() {
  std::vector<SweepPoint> g;
  for (double e : {0.1, 0.2, 0.4, 0.8}) g.push_back({"epsilon", 40.0, e});
  for (double l : {10.0, 20.0, 40.0, 80.0}) g.push_back({"lambda_local", l, 0.4});
  return g;
}

struct SweepRow {
  SweepPoint point;
  bool ok = false;
  std::string error;
  double final_miou = 0.0;
  OptDouble rare_iou;
  DStat dstat;
  double d_loss = 0.0;
  bool converged = false;
};

/// Mean IoU over the rare classes of the last evaluation; empty if none of
/// them was scored.
inline OptDouble rare_class_iou(const RunRecord& run, const SceneSpec& scene) {
  if (run.evals.empty()) return std::nullopt;
  const auto& iou = run.evals.back().iou;
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c : scene.rare_classes()) {
    if (c < iou.size() && iou[c]) s += *iou[c], ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

inline SweepRow summarize_run(const SweepPoint& p, const RunRecord& run, const SceneSpec& scene) {
  SweepRow row;
  row.point = p;
  row.ok = true;
  row.final_miou = run.evals.empty() ? 0.0 : run.evals.back().miou;
  row.rare_iou = rare_class_iou(run, scene);
  row.dstat = d_convergence_stat(run, kDWindowFraction);
  row.d_loss = d_loss_tail(run, kDWindowFraction);
  row.converged = row.dstat.source < kDConvergenceBand && row.dstat.target < kDConvergenceBand;
  return row;
}

inline TrainConfig sweep_config(const TrainConfig& base, const SweepPoint& p) {
  TrainConfig c = base;
  c.method = Method::clan;
  c.lambda_local = p.lambda_local;
  c.epsilon = p.epsilon;
  return c;
}

/// Thread count from CLAN_FORGE_THREADS, defaulting to 1.
inline std::size_t sweep_threads() {
  const char* env = std::getenv("CLAN_FORGE_THREADS");
  if (!env || !*env) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v > 0 ? static_cast<std::size_t>(v) : 1;
}

using SweepCallback = std::function<void(const SweepRow&, const RunRecord*)>;

/// One CLAN run per distinct grid point, sharing `data`. A failed run yields
/// a row with ok=false and the error text. Rows come back in grid order.
inline std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<SweepPoint>& grid,
                                       const DataBundle& data, std::size_t threads = 1,
                                       const SweepCallback& on_row = {}) {
  // Points repeated across axes share one run.
  std::vector<std::pair<double, double>> keys;
  std::vector<std::size_t> slot(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::pair<double, double> k{grid[i].lambda_local, grid[i].epsilon};
    auto it = std::find(keys.begin(), keys.end(), k);
    slot[i] = static_cast<std::size_t>(it - keys.begin());
    if (it == keys.end()) keys.push_back(k);
  }
  std::vector<SweepRow> results(keys.size());
  std::atomic<std::size_t> next{0};
  std::mutex cb_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < keys.size(); k = next++) {
      const SweepPoint p{"", keys[k].first, keys[k].second};
      try {
        const TrainResult r = train(sweep_config(base, p), data);
        results[k] = summarize_run(p, r.run, data.config.scene);
        if (on_row) {
          std::lock_guard lock(cb_mutex);
          on_row(results[k], &r.run);
        }
      } catch (const std::exception& e) {
        results[k].point = p;
        results[k].ok = false;
        results[k].error = e.what();
        if (on_row) {
          std::lock_guard lock(cb_mutex);
          on_row(results[k], nullptr);
        }
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(keys.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    SweepRow r = results[slot[i]];
    r.point = grid[i];
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "axis,lambda_local,epsilon,status,final_miou,rare_iou,dstat_src,dstat_tgt,d_loss,converged\n";
  for (const SweepRow& r : rows) {
    os << r.point.axis << ',' << format_double(r.point.lambda_local) << ',' << format_double(r.point.epsilon) << ',';
    if (!r.ok) {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << "failed: " << msg << ",,,,,,\n";
      continue;
    }
    os << "ok," << format_double(r.final_miou) << ',' << (r.rare_iou ? format_double(*r.rare_iou) : "") << ','
       << format_double(r.dstat.source) << ',' << format_double(r.dstat.target) << ',' << format_double(r.d_loss)
       << ',' << (r.converged ? "yes" : "no") << '\n';
  }
  return os.str();
}

/// Final mIoU per grid point, grouped by sweep axis.
inline std::string sweep_bars_svg(const std::vector<SweepRow>& rows) {
  std::vector<std::string> groups;
  Series miou{"final mIoU", {}, {}}, dsrc{"dstat src", {}, {}}, dtgt{"dstat tgt", {}, {}};
  for (const SweepRow& r : rows) {
    groups.push_back(r.point.axis == "epsilon" ? "eps=" + detail::fmt_tick(r.point.epsilon)
                                                : "lam=" + detail::fmt_tick(r.point.lambda_local));
    miou.y.push_back(r.ok ? r.final_miou : std::nan(""));
    dsrc.y.push_back(r.ok ? r.dstat.source : std::nan(""));
    dtgt.y.push_back(r.ok ? r.dstat.target : std::nan(""));
  }
  return bar_plot_svg("parameter sweep", groups, {miou, dsrc, dtgt}, "value");
}

}  // namespace clan_forge
