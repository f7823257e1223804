#pragma once

// Generator (feature extractor + twin 1×1 classifier heads) and the
// fully-convolutional discriminator, at configurable scale.

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "clan_forge/autodiff.hpp"
#include "clan_forge/common.hpp"
#include "clan_forge/tensor.hpp"

namespace clan_forge {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t num_classes = 5;
  std::vector<std::size_t> extractor_channels{16, 32, 32};
  std::size_t extractor_kernel = 3;
  std::vector<std::size_t> disc_channels{8, 16, 1};
  std::size_t disc_kernel = 4;
  std::size_t disc_stride = 2;
  double disc_slope = 0.2;
  // Std of the classifier heads' normal init. Both heads receive the same
  // gradient through the summed logits, so this sets how far apart they
  // stay; 0 selects He scaling.
  double head_init_std = 0.01;
  // Full-size discriminator widths; documentation only, not instantiated.
  std::vector<std::size_t> reference_disc_channels{64, 128, 256, 512, 1};

  void validate() const {
    if (in_channels == 0) throw std::invalid_argument("model.in_channels must be positive");
    if (num_classes < 2) throw std::invalid_argument("model.num_classes must be at least 2");
    if (extractor_channels.empty()) throw std::invalid_argument("model.extractor_channels must not be empty");
    if (extractor_kernel % 2 == 0) throw std::invalid_argument("model.extractor_kernel must be odd");
    if (!(head_init_std >= 0.0)) throw std::invalid_argument("model.head_init_std must be non-negative");
    if (disc_channels.empty()) throw std::invalid_argument("model.disc_channels must not be empty");
    if (disc_channels.back() != 1) throw std::invalid_argument("model.disc_channels must end with 1 output channel");
    if (disc_stride == 0 || disc_kernel < disc_stride || (disc_kernel - disc_stride) % 2 != 0) {
      throw std::invalid_argument("model.disc_kernel/disc_stride must satisfy kernel >= stride, same parity");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, in_channels, num_classes, extractor_channels,
                                                extractor_kernel, disc_channels, disc_kernel, disc_stride,
                                                disc_slope, head_init_std, reference_disc_channels)

struct ConvLayer {
  Tensor weight;  // out × in × kh × kw
  Tensor bias;    // out
};

struct GeneratorParams {
  std::vector<ConvLayer> extractor;
  ConvLayer classifier1;
  ConvLayer classifier2;

  /// Parameter tensors in canonical order (extractor, head 1, head 2).
  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (ConvLayer& l : extractor) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (ConvLayer* l : {&classifier1, &classifier2}) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<GeneratorParams*>(this)->tensors()) out.push_back(t);
    return out;
  }
};

struct DiscriminatorParams {
  std::vector<ConvLayer> layers;
  std::size_t stride = 2;
  double slope = 0.2;

  std::size_t padding() const { return (layers.front().weight.dim(2) - stride) / 2; }
  /// Total spatial reduction of the conv stack.
  std::size_t downsample() const {
    std::size_t f = 1;
    for (std::size_t i = 0; i < layers.size(); ++i) f *= stride;
    return f;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (ConvLayer& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (const ConvLayer& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
};

/// Per-pixel probability maps of both heads, their ensemble, and the
/// extractor feature map they were computed from.
struct PredictionPair {
  Tensor p1;
  Tensor p2;
  Tensor ensemble;
  Tensor features;
};

namespace detail {

/// Normal initialisation with He (fan-in) std unless one is given, zero bias.
inline ConvLayer he_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng, double stddev = 0.0) {
  ConvLayer layer{Tensor({out, in, k, k}), Tensor({out}, 0.0)};
  if (stddev == 0.0) stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : layer.weight.data()) v = dist(rng);
  return layer;
}

}  // namespace detail

inline GeneratorParams init_generator(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  GeneratorParams g;
  Rng rng(derive_seed(seed, streams::extractor));
  std::size_t in = config.in_channels;
  for (std::size_t out : config.extractor_channels) {
    g.extractor.push_back(detail::he_conv(out, in, config.extractor_kernel, rng));
    in = out;
  }
  Rng rng1(derive_seed(seed, streams::classifier1));
  Rng rng2(derive_seed(seed, streams::classifier2));
  g.classifier1 = detail::he_conv(config.num_classes, in, 1, rng1, config.head_init_std);
  g.classifier2 = detail::he_conv(config.num_classes, in, 1, rng2, config.head_init_std);
  return g;
}

inline DiscriminatorParams init_discriminator(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  DiscriminatorParams d;
  d.stride = config.disc_stride;
  d.slope = config.disc_slope;
  Rng rng(derive_seed(seed, streams::discriminator));
  std::size_t in = config.num_classes;
  for (std::size_t out : config.disc_channels) {
    d.layers.push_back(detail::he_conv(out, in, config.disc_kernel, rng));
    in = out;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Graph construction

struct BoundConv {
  Var weight;
  Var bias;
};

struct BoundGenerator {
  std::vector<BoundConv> extractor;
  BoundConv classifier1;
  BoundConv classifier2;
};

struct BoundDiscriminator {
  std::vector<BoundConv> layers;
  std::size_t stride = 2;
  std::size_t padding = 1;
  double slope = 0.2;
  std::size_t downsample = 1;
};

inline BoundConv bind(Tape& tape, const ConvLayer& layer, bool trainable) {
  return {tape.leaf(layer.weight, trainable), tape.leaf(layer.bias, trainable)};
}

inline BoundGenerator bind(Tape& tape, const GeneratorParams& g, bool trainable) {
  BoundGenerator b;
  for (const ConvLayer& l : g.extractor) b.extractor.push_back(bind(tape, l, trainable));
  b.classifier1 = bind(tape, g.classifier1, trainable);
  b.classifier2 = bind(tape, g.classifier2, trainable);
  return b;
}

inline BoundDiscriminator bind(Tape& tape, const DiscriminatorParams& d, bool trainable) {
  BoundDiscriminator b;
  for (const ConvLayer& l : d.layers) b.layers.push_back(bind(tape, l, trainable));
  b.stride = d.stride;
  b.padding = d.padding();
  b.slope = d.slope;
  b.downsample = d.downsample();
  return b;
}

/// Gradients of bound parameters, in the same order as params.tensors().
inline std::vector<Tensor> gradients(const BoundGenerator& b) {
  std::vector<Tensor> out;
  for (const BoundConv& c : b.extractor) {
    out.push_back(c.weight.grad());
    out.push_back(c.bias.grad());
  }
  for (const BoundConv* c : {&b.classifier1, &b.classifier2}) {
    out.push_back(c->weight.grad());
    out.push_back(c->bias.grad());
  }
  return out;
}

inline std::vector<Tensor> gradients(const BoundDiscriminator& b) {
  std::vector<Tensor> out;
  for (const BoundConv& c : b.layers) {
    out.push_back(c.weight.grad());
    out.push_back(c.bias.grad());
  }
  return out;
}

struct GeneratorGraph {
  Var features;
  Var logits1;
  Var logits2;
  Var p1;
  Var p2;
  Var ensemble;
};

/// E → (C1, C2) on an N×F×H×W batch. With `twin_heads` false only the
/// first head is used and p2 aliases p1.
inline GeneratorGraph generator_graph(const Var& x, const BoundGenerator& g, bool twin_heads = true) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("forward_generator", "expected N×F×H×W input, got " + shape_string(xs));
  const Tensor& w0 = g.extractor.front().weight.value();
  if (xs[1] != w0.dim(1)) {
    throw ShapeError("forward_generator", "input has " + std::to_string(xs[1]) + " channels, extractor expects " +
                                              std::to_string(w0.dim(1)));
  }
  Var h = x;
  for (const BoundConv& layer : g.extractor) {
    const std::size_t pad = layer.weight.value().dim(2) / 2;
    h = relu(add_bias(conv2d(h, layer.weight, 1, pad), layer.bias));
  }
  GeneratorGraph out;
  out.features = h;
  out.logits1 = add_bias(conv2d(h, g.classifier1.weight, 1, 0), g.classifier1.bias);
  out.p1 = softmax(out.logits1, 1);
  if (twin_heads) {
    out.logits2 = add_bias(conv2d(h, g.classifier2.weight, 1, 0), g.classifier2.bias);
    out.p2 = softmax(out.logits2, 1);
    out.ensemble = softmax(add(out.logits1, out.logits2), 1);
  } else {
    out.logits2 = out.logits1;
    out.p2 = out.p1;
    out.ensemble = out.p1;
  }
  return out;
}

/// Conv stack with Leaky-ReLU between layers, sigmoid on the last map, and
/// nearest upsampling back to the input's spatial size.
inline Var discriminator_graph(const Var& p, const BoundDiscriminator& d) {
  const Shape& ps = p.shape();
  if (ps.size() != 4) throw ShapeError("forward_discriminator", "expected N×C×H×W input, got " + shape_string(ps));
  const std::size_t f = d.downsample;
  if (ps[2] < f || ps[3] < f || ps[2] % f != 0 || ps[3] % f != 0) {
    throw ShapeError("forward_discriminator", "input " + shape_string(ps) + " too small: spatial size must be a multiple of " +
                                                  std::to_string(f) + " (minimum " + std::to_string(f) + "×" +
                                                  std::to_string(f) + ")");
  }
  if (ps[1] != d.layers.front().weight.value().dim(1)) {
    throw ShapeError("forward_discriminator", ps, d.layers.front().weight.value().shape());
  }
  Var h = p;
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    h = add_bias(conv2d(h, d.layers[i].weight, d.stride, d.padding), d.layers[i].bias);
    if (i + 1 < d.layers.size()) h = leaky_relu(h, d.slope);
  }
  return upsample_nearest(sigmoid(h), f);
}

// ---------------------------------------------------------------------------
// Tensor-level convenience

inline PredictionPair forward_generator(const Tensor& x, const GeneratorParams& params, bool twin_heads = true) {
  const bool single = x.rank() == 3;
  if (!single && x.rank() != 4) throw ShapeError("forward_generator", "expected F×H×W or N×F×H×W, got " + shape_string(x.shape()));
  Tape tape;
  const BoundGenerator g = bind(tape, params, false);
  Var xv = tape.constant(single ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x);
  const GeneratorGraph out = generator_graph(xv, g, twin_heads);
  auto squeeze = [single](const Tensor& t) {
    return single ? t.reshaped({t.dim(1), t.dim(2), t.dim(3)}) : t;
  };
  return {squeeze(out.p1.value()), squeeze(out.p2.value()), squeeze(out.ensemble.value()),
          squeeze(out.features.value())};
}

inline Tensor forward_discriminator(const Tensor& p, const DiscriminatorParams& params) {
  const bool single = p.rank() == 3;
  if (!single && p.rank() != 4) throw ShapeError("forward_discriminator", "expected C×H×W or N×C×H×W, got " + shape_string(p.shape()));
  Tape tape;
  const BoundDiscriminator d = bind(tape, params, false);
  Var pv = tape.constant(single ? p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)}) : p);
  const Tensor& out = discriminator_graph(pv, d).value();
  return single ? out.reshaped({1, out.dim(2), out.dim(3)}) : out;
}

/// Flattened conv weights of both heads (biases excluded).
inline std::pair<Tensor, Tensor> flatten_classifier_weights(const GeneratorParams& params) {
  auto flat = [](const Tensor& w) { return Tensor::vector(w.values()); };
  return {flat(params.classifier1.weight), flat(params.classifier2.weight)};
}

inline std::pair<Var, Var> flatten_classifier_weights(const BoundGenerator& g) {
  return {flatten_concat({g.classifier1.weight}), flatten_concat({g.classifier2.weight})};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.values()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

namespace detail {

inline nlohmann::json layers_to_json(const std::vector<ConvLayer>& layers) {
  nlohmann::json arr = nlohmann::json::array();
  for (const ConvLayer& l : layers) arr.push_back({{"weight", tensor_to_json(l.weight)}, {"bias", tensor_to_json(l.bias)}});
  return arr;
}

inline std::vector<ConvLayer> layers_from_json(const nlohmann::json& j) {
  std::vector<ConvLayer> out;
  for (const auto& l : j) out.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
  return out;
}

}  // namespace detail

struct Checkpoint {
  ModelConfig model;
  GeneratorParams generator;
  DiscriminatorParams discriminator;
  std::string config_hash;
};

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  return {{"format", "clan-forge-checkpoint"},
          {"version", 1},
          {"config_hash", c.config_hash},
          {"model", c.model},
          {"generator",
           {{"extractor", detail::layers_to_json(c.generator.extractor)},
            {"classifier1", detail::layers_to_json({c.generator.classifier1})[0]},
            {"classifier2", detail::layers_to_json({c.generator.classifier2})[0]}}},
          {"discriminator",
           {{"stride", c.discriminator.stride},
            {"slope", c.discriminator.slope},
            {"layers", detail::layers_to_json(c.discriminator.layers)}}}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "clan-forge-checkpoint") throw std::runtime_error("not a clan-forge checkpoint");
  Checkpoint c;
  c.config_hash = j.at("config_hash").get<std::string>();
  c.model = j.at("model").get<ModelConfig>();
  const auto& g = j.at("generator");
  c.generator.extractor = detail::layers_from_json(g.at("extractor"));
  c.generator.classifier1 = detail::layers_from_json(nlohmann::json::array({g.at("classifier1")}))[0];
  c.generator.classifier2 = detail::layers_from_json(nlohmann::json::array({g.at("classifier2")}))[0];
  const auto& d = j.at("discriminator");
  c.discriminator.stride = d.at("stride").get<std::size_t>();
  c.discriminator.slope = d.at("slope").get<double>();
  c.discriminator.layers = detail::layers_from_json(d.at("layers"));
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << checkpoint_to_json(c).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace clan_forge
