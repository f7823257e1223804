// clan-forge: data generation, training, evaluation, CCD, sweeps and
// gradient checks from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "clan_forge.hpp"

namespace fs = std::filesystem;
using namespace clan_forge;
using nlohmann::json;

namespace {

struct ExitError {
  int code;
  json detail;
};

[[noreturn]] void fail_config(const std::string& key, const std::string& message) {
  throw ExitError{2, {{"error", "config"}, {"key", key}, {"message", message}}};
}

/// Flags shared by the training-style subcommands. Unset flags leave the
/// config file (or defaults) untouched.
struct TrainFlags {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::string> method;
  std::optional<std::size_t> iters;
  std::optional<double> lambda_local, epsilon, lambda_adv, lambda_weight;
  std::optional<std::size_t> eval_every;

  void add_to(CLI::App* app, bool with_method) {
    app->add_option("--seed", seed, "Training seed (model init and batch order)");
    app->add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--data", data, "Dataset directory written by gen-data");
    if (with_method) app->add_option("--method", method, "source-only | tan | clan");
    app->add_option("--iters", iters, "Training iterations");
    app->add_option("--lambda-local", lambda_local);
    app->add_option("--epsilon", epsilon);
    app->add_option("--lambda-adv", lambda_adv);
    app->add_option("--lambda-weight", lambda_weight);
    app->add_option("--eval-every", eval_every);
  }

  /// defaults < config file < flags
  TrainConfig resolve() const {
    TrainConfig c;
    try {
      if (!config.empty()) {
        std::ifstream in(config);
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          fail_config("<file>", std::string("cannot parse ") + config + ": " + e.what());
        }
        c = apply_config_json(c, j);
      }
      json overlay = json::object();
      if (seed) overlay["seed"] = *seed;
      if (method) overlay["method"] = *method;
      if (iters) overlay["iterations"] = *iters;
      if (lambda_local) overlay["lambda_local"] = *lambda_local;
      if (epsilon) overlay["epsilon"] = *epsilon;
      if (lambda_adv) overlay["lambda_adv"] = *lambda_adv;
      if (lambda_weight) overlay["lambda_weight"] = *lambda_weight;
      if (eval_every) overlay["eval_every"] = *eval_every;
      if (!data.empty()) overlay["dataset"] = data;
      c = apply_config_json(c, overlay);
      c.validate();
    } catch (const ConfigError& e) {
      fail_config(e.key(), e.what());
    }
    return c;
  }
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

DataBundle data_for(const TrainConfig& c) {
  if (!c.dataset.empty() && !fs::exists(fs::path(c.dataset) / "manifest.json")) {
    throw std::runtime_error("dataset not found: " + c.dataset);
  }
  return load_or_make_data(c);
}

std::string fmt_opt(const OptDouble& v) { return v ? format_double(*v) : "-"; }

void log_progress(const std::string& tag, const IterationRecord& r, const EvalSnapshot* snap, std::size_t total) {
  if (snap) {
    std::cerr << tag << " eval iter " << snap->iter << "/" << total << "  mIoU " << snap->miou << "\n";
  } else if ((r.iter + 1) % 100 == 0) {
    std::cerr << tag << " iter " << r.iter + 1 << "  seg " << r.losses.seg << "  advD " << r.losses.adv_d << "\n";
  }
}

int cmd_gen_data(std::uint64_t seed, const std::string& config_path, const std::string& out) {
  TrainConfig base;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    try {
      base = apply_config_json(base, json::parse(in));
    } catch (const ConfigError& e) {
      fail_config(e.key(), e.what());
    } catch (const json::exception& e) {
      fail_config("<file>", e.what());
    }
  }
  DataConfig dc = base.data;
  dc.seed = seed;
  try {
    dc.validate();
  } catch (const std::invalid_argument& e) {
    fail_config("data", e.what());
  }
  ensure_dir(out);
  const DataBundle b = make_bundle(dc);
  save_bundle(b, out);
  write_json(fs::path(out) / "config.json", {{"data", dc}});
  std::cerr << "wrote dataset " << b.config_hash << " to " << out << "\n";
  return 0;
}

void write_run_artifacts(const TrainResult& r, const fs::path& out) {
  save_run_record(r.run, (out / "run.jsonl").string());
  write_text_file(out / "metrics.csv", metrics_csv(r.run));
  save_checkpoint(r.final, (out / "checkpoint.json").string());
  save_checkpoint(r.initial, (out / "checkpoint_init.json").string());
  write_text_file(out / "losses.svg", loss_plot_svg(r.run));
  write_text_file(out / "ccd.svg", ccd_curves_svg({&r.run}));
  write_text_file(out / "ccd_bars.svg", ccd_bars_svg({&r.run}));
}

int cmd_train(const TrainFlags& flags) {
  const TrainConfig c = flags.resolve();
  ensure_dir(flags.out);
  const fs::path out(flags.out);
  write_json(out / "config.json", c.resolved());
  const DataBundle data = data_for(c);
  try {
    const TrainResult r = train(c, data, [&](const IterationRecord& it, const EvalSnapshot* s) {
      log_progress(method_name(c.method), it, s, c.iterations);
    });
    write_run_artifacts(r, out);
    std::cerr << "final target mIoU " << r.run.evals.back().miou << " (" << r.run.wall_seconds << " s)\n";
  } catch (const NonFiniteLoss& e) {
    write_json(out / "nonfinite.json", e.dump());
    throw;
  }
  return 0;
}

Evaluation eval_checkpoint(const std::string& path, const DataBundle& data) {
  const Checkpoint ck = load_checkpoint(path);
  return evaluate(ck.generator, data, true);
}

int cmd_eval(const TrainFlags& flags, const std::string& checkpoint) {
  const TrainConfig c = flags.resolve();
  ensure_dir(flags.out);
  const DataBundle data = data_for(c);
  const Evaluation ev = eval_checkpoint(checkpoint, data);
  json iou = json::array();
  for (const auto& v : ev.target_iou.per_class) iou.push_back(v ? json(*v) : json(nullptr));
  write_json(fs::path(flags.out) / "eval.json", {{"checkpoint", checkpoint}, {"miou", ev.target_iou.miou}, {"iou", iou}});
  std::cout << "miou " << format_double(ev.target_iou.miou) << "\n";
  for (std::size_t k = 0; k < iou.size(); ++k) std::cout << "iou_class_" << k << " " << fmt_opt(ev.target_iou.per_class[k]) << "\n";
  return 0;
}

int cmd_ccd(const TrainFlags& flags, const std::string& checkpoint, const std::string& init,
            const std::vector<std::string>& runs) {
  const fs::path out(flags.out);
  if (!runs.empty()) {
    ensure_dir(flags.out);
    std::vector<RunRecord> records;
    for (const auto& p : runs) records.push_back(load_run_record(p));
    std::vector<const RunRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    write_text_file(out / "ccd.svg", ccd_curves_svg(ptrs));
    write_text_file(out / "ccd_bars.svg", ccd_bars_svg(ptrs));
    return 0;
  }
  if (checkpoint.empty() || init.empty()) fail_config("checkpoint", "ccd needs --checkpoint and --init, or --runs");
  const TrainConfig c = flags.resolve();
  ensure_dir(flags.out);
  const DataBundle data = data_for(c);
  CcdSeries series;
  series.record(0, eval_checkpoint(init, data).ccd_raw);
  const CcdEntry& e = series.record(1, eval_checkpoint(checkpoint, data).ccd_raw);
  json rows = json::array();
  for (std::size_t k = 0; k < e.raw.size(); ++k) {
    rows.push_back({{"class", k},
                    {"initial", series.baseline()[k] ? json(*series.baseline()[k]) : json(nullptr)},
                    {"final", e.raw[k] ? json(*e.raw[k]) : json(nullptr)},
                    {"normalized", e.normalized[k] ? json(*e.normalized[k]) : json(nullptr)}});
    std::cout << "ccd_class_" << k << " " << fmt_opt(e.normalized[k]) << "\n";
  }
  write_json(out / "ccd.json", rows);
  return 0;
}

int cmd_sweep(const TrainFlags& flags, const std::string& grid) {
  if (grid != "paper") fail_config("grid", "unknown grid '" + grid + "' (expected paper)");
  const TrainConfig c = flags.resolve();
  ensure_dir(flags.out);
  const fs::path out(flags.out);
  ensure_dir((out / "runs").string());
  write_json(out / "config.json", c.resolved());
  const DataBundle data = data_for(c);
  const auto rows = run_sweep(c, paper_grid(), data, sweep_threads(), [&](const SweepRow& row, const RunRecord* run) {
    const std::string tag = "lambda" + format_double(row.point.lambda_local) + "_eps" + format_double(row.point.epsilon);
    std::cerr << "sweep " << tag << (row.ok ? " ok  mIoU " + format_double(row.final_miou) : " failed: " + row.error)
              << "\n";
    if (run) save_run_record(*run, (out / "runs" / (tag + ".jsonl")).string());
  });
  write_text_file(out / "sweep.csv", sweep_csv(rows));
  write_text_file(out / "sweep.svg", sweep_bars_svg(rows));
  return 0;
}

int cmd_grad_check(std::uint64_t seed, const std::string& fault, const std::string& out) {
  GradCheckOptions opt;
  opt.seed = seed;
  if (!fault.empty()) {
    opt.fault = parse_op_kind(fault);
    if (!opt.fault) fail_config("inject-fault", "unknown op '" + fault + "'");
  }
  const GradCheckReport rep = run_grad_checks(opt);
  std::ostringstream os;
  for (const auto& r : rep.results) {
    os << (r.pass ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << format_double(r.max_rel_error) << "\n";
  }
  std::cout << os.str();
  if (!out.empty()) {
    ensure_dir(out);
    write_text_file(fs::path(out) / "grad_check.txt", os.str());
  }
  if (!rep.all_pass()) {
    std::string names;
    for (const auto& n : rep.failures()) names += (names.empty() ? "" : ",") + n;
    std::cerr << json({{"error", "grad-check"}, {"ops", rep.failures()}}).dump() << "\n";
    std::cerr << "failing ops: " << names << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clan-forge: category-level adversarial adaptation lab"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 7;
  std::string gen_config, gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic source/target dataset");
  gen->add_option("--seed", gen_seed, "Data seed");
  gen->add_option("--config", gen_config)->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out)->required();

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  train_flags.add_to(train_cmd, true);

  TrainFlags eval_flags;
  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "Target mIoU of a checkpoint");
  eval_flags.add_to(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);

  TrainFlags ccd_flags;
  std::string ccd_ckpt, ccd_init;
  std::vector<std::string> ccd_runs;
  auto* ccd_cmd = app.add_subcommand("ccd", "Cluster centre distance between domains");
  ccd_flags.add_to(ccd_cmd, false);
  ccd_cmd->add_option("--checkpoint", ccd_ckpt)->check(CLI::ExistingFile);
  ccd_cmd->add_option("--init", ccd_init, "Initial checkpoint used for normalisation")->check(CLI::ExistingFile);
  ccd_cmd->add_option("--runs", ccd_runs, "run.jsonl files to plot")->check(CLI::ExistingFile);

  TrainFlags sweep_flags;
  std::string grid = "paper";
  auto* sweep_cmd = app.add_subcommand("sweep", "λ_local / ε sweep");
  sweep_flags.add_to(sweep_cmd, false);
  sweep_cmd->add_option("--grid", grid);

  std::uint64_t gc_seed = 1;
  std::string gc_fault, gc_out;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--inject-fault", gc_fault, "Flip the gradient sign of this op");
  gc->add_option("--out", gc_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json({{"error", "usage"}, {"message", e.what()}}).dump() << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_config, gen_out);
    if (*train_cmd) return cmd_train(train_flags);
    if (*eval_cmd) return cmd_eval(eval_flags, eval_ckpt);
    if (*ccd_cmd) return cmd_ccd(ccd_flags, ccd_ckpt, ccd_init, ccd_runs);
    if (*sweep_cmd) return cmd_sweep(sweep_flags, grid);
    if (*gc) return cmd_grad_check(gc_seed, gc_fault, gc_out);
  } catch (const ExitError& e) {
    std::cerr << e.detail.dump() << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << json({{"error", "config"}, {"key", e.key()}, {"message", e.what()}}).dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json({{"error", "runtime"}, {"message", e.what()}}).dump() << "\n";
    return 1;
  }
  return 1;
}
