#pragma once

// Alternating generator / discriminator optimisation for the source-only,
// traditional adversarial (TAN) and category-level adversarial (CLAN)
// methods.

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/autodiff.hpp"
#include "clan_forge/common.hpp"
#include "clan_forge/data_synth.hpp"
#include "clan_forge/losses.hpp"
#include "clan_forge/metrics.hpp"
#include "clan_forge/models.hpp"
#include "clan_forge/optim.hpp"
#include "clan_forge/run_record.hpp"

namespace clan_forge {

enum class Method { source_only, tan, clan };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::source_only: return "source-only";
    case Method::tan: return "tan";
    case Method::clan: return "clan";
  }
  return "unknown";
}

/// Raised for invalid configuration; key() names the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

inline Method parse_method(const std::string& s) {
  if (s == "source-only" || s == "source_only" || s == "sourceonly") return Method::source_only;
  if (s == "tan") return Method::tan;
  if (s == "clan") return Method::clan;
  throw ConfigError("method", "unknown method '" + s + "' (expected source-only, tan or clan)");
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SgdConfig, lr0, momentum, weight_decay, power, max_iter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, lr, beta1, beta2, eps, weight_decay)

struct TrainConfig {
  Method method = Method::clan;
  double lambda_weight = 0.01;
  double lambda_adv = 0.001;
  double lambda_local = 40.0;
  double epsilon = 0.4;
  std::size_t iterations = 2000;
  std::size_t batch_source = 4;
  std::size_t batch_target = 4;
  std::size_t g_steps = 1;
  std::size_t d_steps = 1;
  std::uint64_t seed = 1;
  std::size_t eval_every = 200;
  // Desk-scale lr0, ten times the full-scale 2.5e-4.
  SgdConfig sgd{.lr0 = 2.5e-3};
  AdamConfig adam;
  ModelConfig model;
  DataConfig data;
  std::string dataset;  // dataset directory; empty regenerates `data` in memory

  void validate() const {
    if (!(lambda_weight >= 0.0)) throw ConfigError("lambda_weight", "must be non-negative");
    if (!(lambda_adv >= 0.0)) throw ConfigError("lambda_adv", "must be non-negative");
    if (!(lambda_local >= 0.0)) throw ConfigError("lambda_local", "must be non-negative");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
    if (batch_source == 0) throw ConfigError("batch_source", "must be positive");
    if (batch_target == 0) throw ConfigError("batch_target", "must be positive");
    if (g_steps == 0) throw ConfigError("g_steps", "must be positive");
    if (d_steps == 0) throw ConfigError("d_steps", "must be positive");
    if (eval_every == 0) throw ConfigError("eval_every", "must be positive");
    if (model.num_classes != data.scene.num_classes) {
      throw ConfigError("model.num_classes", "must equal data.scene.num_classes");
    }
    try {
      sgd.validate();
      adam.validate();
      model.validate();
      data.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.substr(0, msg.find(' ')), msg);
    }
  }

  /// Method-specific parameter tying: TAN is CLAN with a uniform weight
  /// (λ_local = 0, ε = 1); source-only drops both auxiliary losses.
  TrainConfig resolved() const {
    TrainConfig r = *this;
    if (r.method == Method::tan) {
      r.lambda_local = 0.0;
      r.epsilon = 1.0;
    } else if (r.method == Method::source_only) {
      r.lambda_adv = 0.0;
      r.lambda_weight = 0.0;
    }
    if (r.iterations > 0) r.sgd.max_iter = r.iterations;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"method", method_name(c.method)},
       {"lambda_weight", c.lambda_weight},
       {"lambda_adv", c.lambda_adv},
       {"lambda_local", c.lambda_local},
       {"epsilon", c.epsilon},
       {"iterations", c.iterations},
       {"batch_source", c.batch_source},
       {"batch_target", c.batch_target},
       {"g_steps", c.g_steps},
       {"d_steps", c.d_steps},
       {"seed", c.seed},
       {"eval_every", c.eval_every},
       {"sgd", c.sgd},
       {"adam", c.adam},
       {"model", c.model},
       {"data", c.data},
       {"dataset", c.dataset}};
}

namespace detail {

/// Rejects keys that the default serialisation of the target does not have.
inline void check_known_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.contains(key)) throw ConfigError(path, "unknown configuration key");
    if (known.at(key).is_object()) check_known_keys(value, known.at(key), path);
  }
}

}  // namespace detail

/// Overlays a JSON document onto `base`. Unknown keys and ill-typed values
/// raise ConfigError naming the key.
inline TrainConfig apply_config_json(const TrainConfig& base, const nlohmann::json& j) {
  const nlohmann::json known = base;
  detail::check_known_keys(j, known, "");
  nlohmann::json merged = known;
  merged.merge_patch(j);
  TrainConfig c = base;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "method") c.method = parse_method(value.get<std::string>());
      else if (key == "lambda_weight") c.lambda_weight = value.get<double>();
      else if (key == "lambda_adv") c.lambda_adv = value.get<double>();
      else if (key == "lambda_local") c.lambda_local = value.get<double>();
      else if (key == "epsilon") c.epsilon = value.get<double>();
      else if (key == "iterations") c.iterations = value.get<std::size_t>();
      else if (key == "batch_source") c.batch_source = value.get<std::size_t>();
      else if (key == "batch_target") c.batch_target = value.get<std::size_t>();
      else if (key == "g_steps") c.g_steps = value.get<std::size_t>();
      else if (key == "d_steps") c.d_steps = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "eval_every") c.eval_every = value.get<std::size_t>();
      else if (key == "sgd") c.sgd = merged.at("sgd").get<SgdConfig>();
      else if (key == "adam") c.adam = merged.at("adam").get<AdamConfig>();
      else if (key == "model") c.model = merged.at("model").get<ModelConfig>();
      else if (key == "data") c.data = merged.at("data").get<DataConfig>();
      else if (key == "dataset") c.dataset = value.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, std::string("invalid value: ") + e.what());
    }
  }
  return c;
}

inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a64(nlohmann::json(c).dump())); }

// ---------------------------------------------------------------------------
// Batches and state

struct Batch {
  Tensor images;  // N×3×H×W
  std::vector<LabelMap> labels;
  std::vector<std::size_t> indices;
};

inline Batch make_batch(const Dataset& ds, std::vector<std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const Tensor& first = ds.items.at(indices.front()).image;
  const std::size_t per = first.size();
  std::vector<double> data;
  data.reserve(per * indices.size());
  Batch b;
  for (std::size_t i : indices) {
    const LabeledImage& it = ds.items.at(i);
    data.insert(data.end(), it.image.data().begin(), it.image.data().end());
    b.labels.push_back(it.labels);
  }
  b.images = Tensor({indices.size(), first.dim(0), first.dim(1), first.dim(2)}, std::move(data));
  b.indices = std::move(indices);
  return b;
}

/// Batch indices for iteration `iter`, a pure function of (seed, iter).
inline std::vector<std::size_t> sample_indices(std::size_t dataset_size, std::size_t batch, std::uint64_t seed,
                                               std::uint64_t domain_stream, std::size_t iter) {
  Rng rng(derive_seed(seed, streams::batches * 16 + domain_stream, iter));
  std::vector<std::size_t> all(dataset_size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < batch; ++k) {
    if (k % dataset_size == 0) std::shuffle(all.begin(), all.end(), rng);
    out.push_back(all[k % dataset_size]);
  }
  return out;
}

struct TrainState {
  GeneratorParams generator;
  DiscriminatorParams discriminator;
  SgdState sgd;
  AdamState adam;
  std::size_t iter = 0;
};

inline TrainState init_state(const TrainConfig& config) {
  TrainState s;
  s.generator = init_generator(config.model, config.seed);
  s.discriminator = init_discriminator(config.model, config.seed);
  return s;
}

/// Raised when a loss turns non-finite; carries the iteration and the batch
/// membership for a diagnostic dump.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t iter, std::string which, std::vector<std::size_t> source_idx,
                std::vector<std::size_t> target_idx)
      : std::runtime_error("non-finite " + which + " loss at iteration " + std::to_string(iter)),
        iter_(iter),
        which_(std::move(which)),
        source_(std::move(source_idx)),
        target_(std::move(target_idx)) {}

  std::size_t iter() const noexcept { return iter_; }
  nlohmann::json dump() const {
    return {{"iteration", iter_}, {"loss", which_}, {"source_batch", source_}, {"target_batch", target_}};
  }

 private:
  std::size_t iter_;
  std::string which_;
  std::vector<std::size_t> source_, target_;
};

struct IterationResult {
  LossBundle losses;
  IterationRecord record;
  AdaptiveWeightMap weight;  // the map used in both phases (empty for source-only)
};

namespace detail {

inline void require_finite(double v, const char* which, std::size_t iter, const Batch& s, const Batch& t) {
  if (!std::isfinite(v)) throw NonFiniteLoss(iter, which, s.indices, t.indices);
}

inline double mean_abs_dev_half(const Tensor& d) {
  double s = 0.0;
  for (double v : d.data()) s += std::abs(v - 0.5);
  return s / static_cast<double>(d.size());
}

inline double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

}  // namespace detail

/// One alternation: G steps with D frozen, then D steps with G frozen. The
/// adaptive weight comes from the phase-1 target forward pass and is reused
/// unchanged in phase 2. `config` must already be resolved().
inline IterationResult train_iteration(TrainState& state, const TrainConfig& config, const Batch& source,
                                       const Batch& target) {
  const bool adversarial = config.method != Method::source_only;
  IterationResult res;
  IterationRecord& rec = res.record;
  rec.iter = state.iter;
  Tensor ens_source, ens_target;

  // Phase 1: generator update.
  for (std::size_t step = 0; step < config.g_steps; ++step) {
    Tape tape;
    const BoundGenerator g = bind(tape, state.generator, true);
    const BoundDiscriminator d = bind(tape, state.discriminator, false);
    const GeneratorGraph gs = generator_graph(tape.constant(source.images), g, adversarial);
    Var seg = seg_loss(gs.ensemble, source.labels);
    Var total = seg;
    LossBundle lb;
    if (adversarial) {
      const GeneratorGraph gt = generator_graph(tape.constant(target.images), g, true);
      const auto [w1, w2] = flatten_classifier_weights(g);
      const CosineVar wd = weight_discrepancy_loss(w1, w2);
      const DiscrepancyMap m = discrepancy_map(gt.p1.value(), gt.p2.value());
      res.weight = config.method == Method::tan ? uniform_weight_map(m.values.shape())
                                                : adaptive_weight_map(m, config.lambda_local, config.epsilon);
      Var adv_g = adv_loss_generator(discriminator_graph(gt.ensemble, d), res.weight);
      total = total_generator_loss(seg, wd.similarity, adv_g, config.lambda_weight, config.lambda_adv);
      lb.weight_disc = wd.similarity.value().item();
      lb.adv_g = adv_g.value().item();
      ens_target = gt.ensemble.value();
      const auto wv = res.weight.values.data();
      rec.weight_min = *std::min_element(wv.begin(), wv.end());
      rec.weight_max = *std::max_element(wv.begin(), wv.end());
      rec.weight_mean = detail::mean_of(res.weight.values);
      rec.discrepancy_mean = detail::mean_of(m.values);
    }
    lb.seg = seg.value().item();
    lb.total_g = total.value().item();
    detail::require_finite(lb.total_g, "generator", state.iter, source, target);
    tape.backward(total);
    rec.lr_g = sgd_step(state.generator.tensors(), gradients(g), state.sgd, config.sgd, state.iter);
    ens_source = gs.ensemble.value();
    res.losses.seg = lb.seg;
    res.losses.weight_disc = lb.weight_disc;
    res.losses.adv_g = lb.adv_g;
    res.losses.total_g = lb.total_g;
  }

  // Phase 2: discriminator update on the detached phase-1 predictions.
  if (adversarial) {
    for (std::size_t step = 0; step < config.d_steps; ++step) {
      Tape tape;
      const BoundDiscriminator d = bind(tape, state.discriminator, true);
      Var ds = discriminator_graph(tape.constant(ens_source), d);
      Var dt = discriminator_graph(tape.constant(ens_target), d);
      Var adv_d = adv_loss_discriminator(ds, dt, res.weight);
      if (step == 0) {
        res.losses.adv_d = adv_d.value().item();
        rec.has_d_stats = true;
        rec.d_src_mean = detail::mean_of(ds.value());
        rec.d_tgt_mean = detail::mean_of(dt.value());
        rec.d_src_dev = detail::mean_abs_dev_half(ds.value());
        rec.d_tgt_dev = detail::mean_abs_dev_half(dt.value());
      }
      detail::require_finite(adv_d.value().item(), "discriminator", state.iter, source, target);
      tape.backward(adv_d);
      adam_step(state.discriminator.tensors(), gradients(d), state.adam, config.adam);
    }
  }

  rec.losses = res.losses;
  ++state.iter;
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  IouResult target_iou;
  std::vector<OptDouble> ccd_raw;
};

/// Target mIoU of the ensemble argmax plus raw source/target feature centre
/// distances on the evaluation splits.
inline Evaluation evaluate(const GeneratorParams& g, const DataBundle& data, bool twin_heads,
                           std::size_t chunk = 16) {
  const std::size_t C = data.config.scene.num_classes;
  ConfusionMatrix conf(C);
  std::optional<ClassCenters> src, tgt;
  auto run_split = [&](const Dataset& ds, bool is_source) {
    for (std::size_t start = 0; start < ds.items.size(); start += chunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(ds.items.size(), start + chunk); ++i) idx.push_back(i);
      const Batch b = make_batch(ds, idx);
      const PredictionPair pp = forward_generator(b.images, g, twin_heads);
      const std::size_t F = pp.features.dim(1), H = pp.features.dim(2), W = pp.features.dim(3);
      auto& centers = is_source ? src : tgt;
      if (!centers) centers.emplace(C, F);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const Tensor feat({F, H, W}, std::vector<double>(pp.features.data().begin() + static_cast<long>(k * F * H * W),
                                                         pp.features.data().begin() + static_cast<long>((k + 1) * F * H * W)));
        centers->add(feat, b.labels[k]);
        if (!is_source) {
          const Tensor ens({C, H, W}, std::vector<double>(pp.ensemble.data().begin() + static_cast<long>(k * C * H * W),
                                                          pp.ensemble.data().begin() + static_cast<long>((k + 1) * C * H * W)));
          conf.add(b.labels[k], argmax_labels(ens));
        }
      }
    }
  };
  run_split(data.source_eval, true);
  run_split(data.target_eval, false);
  return {per_class_iou(conf), center_distances(*src, *tgt)};
}

struct TrainResult {
  RunRecord run;
  Checkpoint initial;
  Checkpoint final;
};

using ProgressFn = std::function<void(const IterationRecord&, const EvalSnapshot*)>;

/// Full training run. Deterministic for a fixed config: all randomness comes
/// from config.seed (model init, batches) and config.data.seed (data).
inline TrainResult train(const TrainConfig& user_config, const DataBundle& data, const ProgressFn& progress = {}) {
  user_config.validate();
  const TrainConfig config = user_config.resolved();
  const auto t0 = std::chrono::steady_clock::now();
  const bool twin = config.method != Method::source_only;
  const std::string hash = config_hash(config);

  TrainState state = init_state(config);
  TrainResult out;
  out.initial = {config.model, state.generator, state.discriminator, hash};
  RunRecord& run = out.run;
  run.method = method_name(config.method);
  run.seed = config.seed;
  run.num_classes = config.model.num_classes;
  run.config = config;

  CcdSeries ccd;
  auto snapshot = [&](std::size_t iter) {
    const Evaluation ev = evaluate(state.generator, data, twin);
    const CcdEntry& e = ccd.record(iter, ev.ccd_raw);
    run.evals.push_back({iter, ev.target_iou.miou, ev.target_iou.per_class, e.normalized, e.raw});
    return &run.evals.back();
  };
  const EvalSnapshot* first = snapshot(0);
  if (progress) progress(IterationRecord{}, first);

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Batch src = make_batch(data.source_train,
                                 sample_indices(data.source_train.items.size(), config.batch_source, config.seed, 0, it));
    const Batch tgt = make_batch(data.target_train,
                                 sample_indices(data.target_train.items.size(), config.batch_target, config.seed, 1, it));
    const IterationResult r = train_iteration(state, config, src, tgt);
    run.iterations.push_back(r.record);
    const EvalSnapshot* snap = nullptr;
    if ((it + 1) % config.eval_every == 0 || it + 1 == config.iterations) snap = snapshot(it + 1);
    if (progress) progress(r.record, snap);
  }

  out.final = {config.model, state.generator, state.discriminator, hash};
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline DataBundle load_or_make_data(const TrainConfig& config) {
  if (!config.dataset.empty()) return load_bundle(config.dataset);
  return make_bundle(config.data);
}

inline TrainResult train(const TrainConfig& config, const ProgressFn& progress = {}) {
  config.validate();
  return train(config, load_or_make_data(config), progress);
}

}  // namespace clan_forge
