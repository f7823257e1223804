#pragma once

// Segmentation, weight-discrepancy, and self-adaptive adversarial losses.
//
// All losses are means over pixels. The adaptive weight map is a constant
// of the graph: the generator can only lower its adversarial loss through
// the discriminator score, never by shrinking classifier disagreement.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

#include "clan_forge/autodiff.hpp"
#include "clan_forge/labels.hpp"
#include "clan_forge/tensor.hpp"

namespace clan_forge {

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Per-pixel cosine distance between two heads' probability vectors, N×1×H×W.
struct DiscrepancyMap {
  Tensor values;
};

/// λ_local · discrepancy + ε, used as a constant per-pixel loss weight.
struct AdaptiveWeightMap {
  Tensor values;
  double lambda_local = 0.0;
  double epsilon = 1.0;
};

struct LossBundle {
  double seg = 0.0;
  double weight_disc = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;
  double total_g = 0.0;
};

namespace detail {

/// Accepts C×H×W or N×C×H×W and returns the N×C×H×W view dimensions.
inline std::array<std::size_t, 4> nchw(const char* op, const Shape& s) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(op, "expected C×H×W or N×C×H×W, got " + shape_string(s));
}

}  // namespace detail

/// One-hot encoding of a label batch, shaped like `like` (C×H×W or N×C×H×W).
inline Tensor one_hot(std::span<const LabelMap> labels, const Shape& like) {
  const auto [n, c, h, w] = detail::nchw("seg_loss", like);
  if (labels.size() != n) {
    throw ShapeError("seg_loss", std::to_string(labels.size()) + " label maps for batch of " + std::to_string(n));
  }
  Tensor out(like, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const LabelMap& lm = labels[b];
    if (lm.height != h || lm.width != w) {
      throw ShapeError("seg_loss", Shape{lm.height, lm.width}, Shape{h, w});
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t cls = lm.at(y, x);
        if (cls >= c) {
          throw LabelError("seg_loss: label " + std::to_string(cls) + " at (image " + std::to_string(b) + ", row " +
                           std::to_string(y) + ", col " + std::to_string(x) + ") outside [0, " + std::to_string(c) +
                           ")");
        }
        out[((b * c + cls) * h + y) * w + x] = 1.0;
      }
    }
  }
  return out;
}

/// Mean over pixels of −log p(true class), with the log argument clamped.
inline Var seg_loss(const Var& ensemble, std::span<const LabelMap> labels) {
  const auto [n, c, h, w] = detail::nchw("seg_loss", ensemble.shape());
  (void)c;
  Var target = ensemble.tape().constant(one_hot(labels, ensemble.shape()));
  const double pixels = static_cast<double>(n * h * w);
  return scale(sum(mul(target, log(ensemble))), -1.0 / pixels);
}

inline double seg_loss(const Tensor& ensemble, std::span<const LabelMap> labels) {
  Tape tape;
  return seg_loss(tape.constant(ensemble), labels).value().item();
}

/// Cosine similarity of the flattened head weights; minimised by training.
inline CosineVar weight_discrepancy_loss(const Var& w1, const Var& w2) { return cosine_similarity(w1, w2); }

inline CosineValue weight_discrepancy_loss(const Tensor& w1, const Tensor& w2) {
  return cosine_similarity(w1.data(), w2.data());
}

/// 1 − cos(p1_ij, p2_ij) for every pixel. Degenerate pixel vectors count as
/// maximally uncertain (cosine 0, distance 1).
inline DiscrepancyMap discrepancy_map(const Tensor& p1, const Tensor& p2) {
  require_same_shape("discrepancy_map", p1, p2);
  const auto [n, c, h, w] = detail::nchw("discrepancy_map", p1.shape());
  const std::size_t hw = h * w;
  Tensor out(p1.rank() == 3 ? Shape{1, h, w} : Shape{n, 1, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double a = p1[(b * c + k) * hw + i];
        const double q = p2[(b * c + k) * hw + i];
        ab += a * q;
        aa += a * a;
        bb += q * q;
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      const double cosv = (na < kNormFloor || nb < kNormFloor) ? 0.0 : std::clamp(ab / (na * nb), -1.0, 1.0);
      out[b * hw + i] = 1.0 - cosv;
    }
  }
  return {std::move(out)};
}

inline AdaptiveWeightMap adaptive_weight_map(const DiscrepancyMap& m, double lambda_local, double epsilon) {
  if (!(lambda_local >= 0.0)) throw std::invalid_argument("adaptive_weight_map: lambda_local must be >= 0");
  if (!(epsilon > 0.0)) throw std::invalid_argument("adaptive_weight_map: epsilon must be > 0");
  Tensor v = m.values;
  for (double& x : v.data()) x = lambda_local * x + epsilon;
  return {std::move(v), lambda_local, epsilon};
}

/// Constant weight of one on every pixel (the traditional adversarial loss).
inline AdaptiveWeightMap uniform_weight_map(const Shape& shape) { return {Tensor(shape, 1.0), 0.0, 1.0}; }

namespace detail {

inline Var weight_constant(Tape& tape, const AdaptiveWeightMap& w, const Shape& like, const char* op) {
  if (w.values.size() != shape_size(like)) throw ShapeError(op, w.values.shape(), like);
  return stop_gradient(tape.constant(w.values.reshaped(like)));
}

}  // namespace detail

/// Mean over pixels of w · (−log D(target)); pushes target scores toward the
/// source label.
inline Var adv_loss_generator(const Var& d_out_target, const AdaptiveWeightMap& w) {
  Tape& tape = d_out_target.tape();
  Var wc = detail::weight_constant(tape, w, d_out_target.shape(), "adv_loss_generator");
  const double n = static_cast<double>(d_out_target.value().size());
  return scale(sum(mul(wc, log(d_out_target))), -1.0 / n);
}

inline double adv_loss_generator(const Tensor& d_out_target, const AdaptiveWeightMap& w) {
  Tape tape;
  return adv_loss_generator(tape.constant(d_out_target), w).value().item();
}

/// mean(−log D(source)) + mean(w · −log(1 − D(target))).
inline Var adv_loss_discriminator(const Var& d_src, const Var& d_tgt, const AdaptiveWeightMap& w) {
  Tape& tape = detail::same_tape("adv_loss_discriminator", d_src, d_tgt);
  const double ns = static_cast<double>(d_src.value().size());
  const double nt = static_cast<double>(d_tgt.value().size());
  Var src_term = scale(sum(log(d_src)), -1.0 / ns);
  Var wc = detail::weight_constant(tape, w, d_tgt.shape(), "adv_loss_discriminator");
  Var one_minus = sub(tape.constant(Tensor(d_tgt.shape(), 1.0)), d_tgt);
  Var tgt_term = scale(sum(mul(wc, log(one_minus))), -1.0 / nt);
  return add(src_term, tgt_term);
}

inline double adv_loss_discriminator(const Tensor& d_src, const Tensor& d_tgt, const AdaptiveWeightMap& w) {
  Tape tape;
  return adv_loss_discriminator(tape.constant(d_src), tape.constant(d_tgt), w).value().item();
}

inline Var total_generator_loss(const Var& seg, const Var& weight_disc, const Var& adv_g, double lambda_weight,
                                double lambda_adv) {
  return add(seg, add(scale(weight_disc, lambda_weight), scale(adv_g, lambda_adv)));
}

inline double total_generator_loss(double seg, double weight_disc, double adv_g, double lambda_weight,
                                   double lambda_adv) {
  return seg + (lambda_weight * weight_disc + lambda_adv * adv_g);
}

}  // namespace clan_forge
