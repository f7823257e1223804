#pragma once

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/losses.hpp"

namespace clan_forge {

using OptDouble = std::optional<double>;

struct IterationRecord {
  std::size_t iter = 0;
  LossBundle losses;
  double lr_g = 0.0;
  // Discriminator statistics from the D phase; absent when D is not trained.
  bool has_d_stats = false;
  double d_src_mean = 0.0;
  double d_tgt_mean = 0.0;
  double d_src_dev = 0.0;  // pixel mean of |D − 0.5| on the source batch
  double d_tgt_dev = 0.0;
  // Adaptive weight map range and mean over the target batch.
  double weight_min = 0.0;
  double weight_max = 0.0;
  double weight_mean = 0.0;
  double discrepancy_mean = 0.0;
};

struct EvalSnapshot {
  std::size_t iter = 0;
  double miou = 0.0;
  std::vector<OptDouble> iou;
  std::vector<OptDouble> ccd;      // normalised by the first snapshot
  std::vector<OptDouble> ccd_raw;  // Euclidean centre distances
};

/// Append-only history of one training run.
struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;
  nlohmann::json config;
  std::vector<IterationRecord> iterations;
  std::vector<EvalSnapshot> evals;
  double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const LossBundle& l) {
  j = {{"seg", l.seg}, {"weight_disc", l.weight_disc}, {"adv_g", l.adv_g}, {"adv_d", l.adv_d}, {"total_g", l.total_g}};
}

inline void from_json(const nlohmann::json& j, LossBundle& l) {
  l.seg = j.at("seg").get<double>();
  l.weight_disc = j.at("weight_disc").get<double>();
  l.adv_g = j.at("adv_g").get<double>();
  l.adv_d = j.at("adv_d").get<double>();
  l.total_g = j.at("total_g").get<double>();
}

inline void to_json(nlohmann::json& j, const IterationRecord& r) {
  j = {{"type", "iter"},          {"iter", r.iter},
       {"losses", r.losses},      {"lr_g", r.lr_g},
       {"has_d_stats", r.has_d_stats},
       {"d_src_mean", r.d_src_mean}, {"d_tgt_mean", r.d_tgt_mean},
       {"d_src_dev", r.d_src_dev},   {"d_tgt_dev", r.d_tgt_dev},
       {"weight_min", r.weight_min}, {"weight_max", r.weight_max},
       {"weight_mean", r.weight_mean}, {"discrepancy_mean", r.discrepancy_mean}};
}

inline void from_json(const nlohmann::json& j, IterationRecord& r) {
  r.iter = j.at("iter").get<std::size_t>();
  r.losses = j.at("losses").get<LossBundle>();
  r.lr_g = j.at("lr_g").get<double>();
  r.has_d_stats = j.at("has_d_stats").get<bool>();
  r.d_src_mean = j.at("d_src_mean").get<double>();
  r.d_tgt_mean = j.at("d_tgt_mean").get<double>();
  r.d_src_dev = j.at("d_src_dev").get<double>();
  r.d_tgt_dev = j.at("d_tgt_dev").get<double>();
  r.weight_min = j.at("weight_min").get<double>();
  r.weight_max = j.at("weight_max").get<double>();
  r.weight_mean = j.at("weight_mean").get<double>();
  r.discrepancy_mean = j.at("discrepancy_mean").get<double>();
}

namespace detail {

inline nlohmann::json opt_array(const std::vector<OptDouble>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const OptDouble& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return a;
}

inline std::vector<OptDouble> opt_vector(const nlohmann::json& a) {
  std::vector<OptDouble> out;
  for (const auto& x : a) out.push_back(x.is_null() ? OptDouble{} : OptDouble{x.get<double>()});
  return out;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const EvalSnapshot& e) {
  j = {{"type", "eval"},
       {"iter", e.iter},
       {"miou", e.miou},
       {"iou", detail::opt_array(e.iou)},
       {"ccd", detail::opt_array(e.ccd)},
       {"ccd_raw", detail::opt_array(e.ccd_raw)}};
}

inline void from_json(const nlohmann::json& j, EvalSnapshot& e) {
  e.iter = j.at("iter").get<std::size_t>();
  e.miou = j.at("miou").get<double>();
  e.iou = detail::opt_vector(j.at("iou"));
  e.ccd = detail::opt_vector(j.at("ccd"));
  e.ccd_raw = detail::opt_vector(j.at("ccd_raw"));
}

/// JSON-lines form: a header line with the resolved config, then one line
/// per iteration or evaluation event in the order they happened, then a
/// summary line.
inline std::string run_record_jsonl(const RunRecord& run) {
  std::string out;
  const nlohmann::json header = {{"type", "config"},
                                 {"method", run.method},
                                 {"seed", run.seed},
                                 {"num_classes", run.num_classes},
                                 {"config", run.config}};
  out += header.dump() + '\n';
  std::size_t e = 0;
  auto flush_evals = [&](std::size_t upto) {
    while (e < run.evals.size() && run.evals[e].iter <= upto) out += nlohmann::json(run.evals[e++]).dump() + '\n';
  };
  for (const IterationRecord& it : run.iterations) {
    // Evaluation at iteration k happens after k updates, i.e. before record k.
    flush_evals(it.iter);
    out += nlohmann::json(it).dump() + '\n';
  }
  flush_evals(static_cast<std::size_t>(-1));
  out += nlohmann::json({{"type", "summary"}, {"wall_seconds", run.wall_seconds}}).dump() + '\n';
  return out;
}

inline RunRecord parse_run_record_jsonl(std::istream& in) {
  RunRecord run;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "config") {
      run.method = j.at("method").get<std::string>();
      run.seed = j.at("seed").get<std::uint64_t>();
      run.num_classes = j.at("num_classes").get<std::size_t>();
      run.config = j.at("config");
      header = true;
    } else if (type == "iter") {
      run.iterations.push_back(j.get<IterationRecord>());
    } else if (type == "eval") {
      run.evals.push_back(j.get<EvalSnapshot>());
    } else if (type == "summary") {
      run.wall_seconds = j.at("wall_seconds").get<double>();
    } else {
      throw std::runtime_error("run record: unknown event type '" + type + "'");
    }
  }
  if (!header) throw std::runtime_error("run record: missing config header");
  return run;
}

inline void save_run_record(const RunRecord& run, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << run_record_jsonl(run);
}

inline RunRecord load_run_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return parse_run_record_jsonl(in);
}

}  // namespace clan_forge
