#pragma once

// Central finite-difference checks for every differentiable op and for the
// composed generator and discriminator objectives on a tiny network.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "clan_forge/autodiff.hpp"
#include "clan_forge/common.hpp"
#include "clan_forge/labels.hpp"
#include "clan_forge/losses.hpp"
#include "clan_forge/models.hpp"

namespace clan_forge {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::optional<OpKind> fault;  // sign-flip injected into the analytic pass
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t num_inputs = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  double seconds = 0.0;

  bool all_pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return true;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : results)
      if (!r.pass) out.push_back(r.name);
    return out;
  }
};

/// Builds a scalar from leaf variables on the given tape.
using ScalarBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// ‖a − n‖ / max(‖a‖, ‖n‖), falling back to the absolute difference when both
/// gradients vanish.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom < 1e-10 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

/// Compares the tape gradient of `build` against central differences with
/// respect to every element of every input.
inline GradCheckResult check_gradient(const std::string& name, const std::vector<Tensor>& inputs,
                                      const ScalarBuilder& build, const GradCheckOptions& opt) {
  std::vector<double> analytic, numeric;
  {
    Tape tape;
    tape.inject_sign_fault(opt.fault);
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    Var y = build(tape, leaves);
    tape.backward(y);
    for (const Var& v : leaves) analytic.insert(analytic.end(), v.grad().data().begin(), v.grad().data().end());
  }
  std::vector<Tensor> work = inputs;
  auto eval = [&] {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : work) leaves.push_back(tape.leaf(t));
    return build(tape, leaves).value().item();
  };
  for (Tensor& t : work) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      t[i] = x0 + opt.step;
      const double fp = eval();
      t[i] = x0 - opt.step;
      const double fm = eval();
      t[i] = x0;
      numeric.push_back((fp - fm) / (2.0 * opt.step));
    }
  }
  GradCheckResult r;
  r.name = name;
  r.num_inputs = numeric.size();
  r.max_rel_error = relative_error(analytic, numeric);
  r.pass = std::isfinite(r.max_rel_error) && r.max_rel_error < opt.tolerance;
  return r;
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Uniform in [−2, 2] but at least `gap` away from zero, so kinks stay out of
/// the finite-difference stencil.
inline Tensor away_from_zero(Shape shape, double gap, Rng& rng) {
  Tensor t = uniform_tensor(std::move(shape), -2.0, 2.0, rng);
  for (double& v : t.data())
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  return t;
}

/// Reduces a non-scalar op output to a scalar with fixed random weights.
inline Var project(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return weighted_sum(y, uniform_tensor(y.shape(), -1.0, 1.0, rng));
}

}  // namespace detail

/// Op-level cases: each differentiable op composed with a fixed random
/// projection.
inline std::vector<GradCheckResult> op_grad_checks(const GradCheckOptions& opt) {
  using detail::away_from_zero;
  using detail::project;
  using detail::uniform_tensor;
  Rng rng(derive_seed(opt.seed, 900));
  const std::uint64_t ps = derive_seed(opt.seed, 901);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor> in, const ScalarBuilder& f) {
    out.push_back(check_gradient(name, in, f, opt));
  };
  auto u = [&](Shape s) { return uniform_tensor(std::move(s), -2.0, 2.0, rng); };

  run("add", {u({2, 3}), u({2, 3})}, [&](Tape&, const auto& v) { return project(add(v[0], v[1]), ps); });
  run("sub", {u({2, 3}), u({2, 3})}, [&](Tape&, const auto& v) { return project(sub(v[0], v[1]), ps); });
  run("mul", {u({2, 3}), u({2, 3})}, [&](Tape&, const auto& v) { return project(mul(v[0], v[1]), ps); });
  run("scale", {u({5})}, [&](Tape&, const auto& v) { return project(scale(v[0], -1.7), ps); });
  run("reshape", {u({2, 6})}, [&](Tape&, const auto& v) { return project(reshape(v[0], {3, 4}), ps); });
  run("matmul", {u({3, 4}), u({4, 2})}, [&](Tape&, const auto& v) { return project(matmul(v[0], v[1]), ps); });
  run("conv2d", {u({2, 2, 5, 5}), u({3, 2, 3, 3})},
      [&](Tape&, const auto& v) { return project(conv2d(v[0], v[1], 1, 1), ps); });
  run("conv2d_strided", {u({1, 2, 6, 6}), u({2, 2, 4, 4})},
      [&](Tape&, const auto& v) { return project(conv2d(v[0], v[1], 2, 1), ps); });
  run("add_bias", {u({2, 3, 2, 2}), u({3})}, [&](Tape&, const auto& v) { return project(add_bias(v[0], v[1]), ps); });
  run("leaky_relu", {away_from_zero({4, 4}, 1e-3, rng)},
      [&](Tape&, const auto& v) { return project(leaky_relu(v[0], 0.2), ps); });
  run("relu", {away_from_zero({4, 4}, 1e-3, rng)}, [&](Tape&, const auto& v) { return project(relu(v[0]), ps); });
  run("sigmoid", {u({3, 3})}, [&](Tape&, const auto& v) { return project(sigmoid(v[0]), ps); });
  run("softmax", {u({2, 4, 2, 3})}, [&](Tape&, const auto& v) { return project(softmax(v[0], 1), ps); });
  run("log", {uniform_tensor({3, 3}, 0.2, 2.0, rng)}, [&](Tape&, const auto& v) { return project(log(v[0]), ps); });
  run("sum", {u({2, 5})}, [&](Tape&, const auto& v) { return scale(sum(v[0]), 0.7); });
  run("mean", {u({2, 5})}, [&](Tape&, const auto& v) { return scale(mean(v[0]), 0.7); });
  run("weighted_sum", {u({2, 5})}, [&](Tape&, const auto& v) { return project(v[0], ps); });
  run("upsample_nearest", {u({1, 2, 2, 3})},
      [&](Tape&, const auto& v) { return project(upsample_nearest(v[0], 2), ps); });
  run("flatten_concat", {u({2, 2}), u({3})},
      [&](Tape&, const auto& v) { return project(flatten_concat({v[0], v[1]}), ps); });
  run("cosine_similarity", {u({7}), u({7})},
      [&](Tape&, const auto& v) { return scale(cosine_similarity(v[0], v[1]).similarity, 1.3); });
  return out;
}

/// Tiny generator/discriminator pair for the composed checks: 4×4 input,
/// three classes.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.in_channels = 3;
  m.num_classes = 3;
  m.extractor_channels = {4};
  m.disc_channels = {4, 1};
  return m;
}

namespace detail {

inline std::vector<LabelMap> random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(c) - 1);
  std::vector<LabelMap> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabelMap m(h, w);
    for (auto& v : m.values) v = static_cast<std::uint8_t>(d(rng));
    out.push_back(std::move(m));
  }
  return out;
}

inline BoundGenerator bound_from(const std::vector<Var>& v, std::size_t n_ext) {
  BoundGenerator b;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n_ext; ++i, k += 2) b.extractor.push_back({v[k], v[k + 1]});
  b.classifier1 = {v[k], v[k + 1]};
  b.classifier2 = {v[k + 2], v[k + 3]};
  return b;
}

}  // namespace detail

/// Composed objectives on the tiny network. The adaptive weight map is a
/// stop-gradient constant, so it is evaluated once at the base point and held
/// fixed for the perturbed evaluations.
inline std::vector<GradCheckResult> composed_grad_checks(const GradCheckOptions& opt) {
  const ModelConfig mc = tiny_model_config();
  const GeneratorParams g0 = init_generator(mc, opt.seed);
  const DiscriminatorParams d0 = init_discriminator(mc, opt.seed);
  Rng rng(derive_seed(opt.seed, 902));
  const Tensor xs = detail::uniform_tensor({2, 3, 4, 4}, 0.0, 1.0, rng);
  const Tensor xt = detail::uniform_tensor({2, 3, 4, 4}, 0.0, 1.0, rng);
  const std::vector<LabelMap> labels = detail::random_labels(2, 4, 4, mc.num_classes, rng);
  const std::size_t n_ext = g0.extractor.size();

  std::vector<Tensor> g_inputs;
  for (const Tensor* t : g0.tensors()) g_inputs.push_back(*t);

  const PredictionPair pt = forward_generator(xt, g0, true);
  const AdaptiveWeightMap w = adaptive_weight_map(discrepancy_map(pt.p1, pt.p2), 40.0, 0.4);
  const double lw = 0.01, la = 0.001;

  std::vector<GradCheckResult> out;
  out.push_back(check_gradient(
      "clan_generator_loss", g_inputs,
      [&](Tape& tape, const std::vector<Var>& v) {
        const BoundGenerator g = detail::bound_from(v, n_ext);
        const BoundDiscriminator d = bind(tape, d0, false);
        const GeneratorGraph gs = generator_graph(tape.constant(xs), g, true);
        const GeneratorGraph gt = generator_graph(tape.constant(xt), g, true);
        const auto [w1, w2] = flatten_classifier_weights(g);
        Var seg = seg_loss(gs.ensemble, labels);
        Var wd = weight_discrepancy_loss(w1, w2).similarity;
        Var adv = adv_loss_generator(discriminator_graph(gt.ensemble, d), w);
        return total_generator_loss(seg, wd, adv, lw, la);
      },
      opt));

  std::vector<Tensor> d_inputs;
  for (const Tensor* t : d0.tensors()) d_inputs.push_back(*t);
  const PredictionPair ps = forward_generator(xs, g0, true);
  out.push_back(check_gradient(
      "discriminator_loss", d_inputs,
      [&](Tape& tape, const std::vector<Var>& v) {
        BoundDiscriminator d = bind(tape, d0, false);
        for (std::size_t i = 0; i < d.layers.size(); ++i) d.layers[i] = {v[2 * i], v[2 * i + 1]};
        return adv_loss_discriminator(discriminator_graph(tape.constant(ps.ensemble), d),
                                      discriminator_graph(tape.constant(pt.ensemble), d), w);
      },
      opt));

  // Gradient reaching the generator input of D, which is what the G phase
  // relies on.
  out.push_back(check_gradient(
      "discriminator_input", {pt.ensemble},
      [&](Tape& tape, const std::vector<Var>& v) {
        return adv_loss_generator(discriminator_graph(v[0], bind(tape, d0, false)), w);
      },
      opt));
  return out;
}

inline GradCheckReport run_grad_checks(const GradCheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport rep;
  rep.results = op_grad_checks(opt);
  for (auto& r : composed_grad_checks(opt)) rep.results.push_back(std::move(r));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace clan_forge
