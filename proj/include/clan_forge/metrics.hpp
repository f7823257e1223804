#pragma once

// Segmentation and alignment diagnostics: confusion-matrix IoU, cluster
// centre distance between domains, and the discriminator equilibrium
// statistic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/data_synth.hpp"
#include "clan_forge/labels.hpp"
#include "clan_forge/run_record.hpp"
#include "clan_forge/tensor.hpp"

namespace clan_forge {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const noexcept { return c_; }

  void add(std::size_t truth, std::size_t pred, std::uint64_t n = 1) {
    if (truth >= c_ || pred >= c_) {
      throw std::out_of_range("ConfusionMatrix: class index outside [0, " + std::to_string(c_) + ")");
    }
    counts_[truth * c_ + pred] += n;
  }

  void add(const LabelMap& truth, const LabelMap& pred) {
    if (truth.height != pred.height || truth.width != pred.width) {
      throw ShapeError("ConfusionMatrix::add", Shape{truth.height, truth.width}, Shape{pred.height, pred.width});
    }
    for (std::size_t i = 0; i < truth.values.size(); ++i) add(truth.values[i], pred.values[i]);
  }

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * c_ + pred); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::uint64_t v : counts_) t += v;
    return t;
  }

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<OptDouble> per_class;  // empty for classes absent from truth and prediction
  double miou = 0.0;
};

/// IoU_c = TP / (TP + FP + FN); mIoU averages the classes that occur in the
/// ground truth or the prediction.
inline IouResult per_class_iou(const ConfusionMatrix& conf) {
  const std::size_t C = conf.num_classes();
  IouResult r;
  r.per_class.resize(C);
  double acc = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const std::uint64_t tp = conf.at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fp += conf.at(k, c);
      fn += conf.at(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class[c] = iou;
    acc += iou;
    ++counted;
  }
  r.miou = counted ? acc / static_cast<double>(counted) : 0.0;
  return r;
}

/// Per-pixel argmax over the channel axis of a C×H×W map (ties go to the
/// lower class index).
inline LabelMap argmax_labels(const Tensor& probs) {
  if (probs.rank() != 3) throw ShapeError("argmax_labels", "expected C×H×W, got " + shape_string(probs.shape()));
  const std::size_t C = probs.dim(0), H = probs.dim(1), W = probs.dim(2), HW = H * W;
  LabelMap out(H, W);
  for (std::size_t i = 0; i < HW; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (probs[c * HW + i] > probs[best * HW + i]) best = c;
    out.values[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cluster centre distance

/// Running per-class sums of feature vectors for one domain.
class ClassCenters {
 public:
  ClassCenters(std::size_t num_classes, std::size_t feature_dim)
      : dim_(feature_dim), sums_(num_classes, std::vector<double>(feature_dim, 0.0)), counts_(num_classes, 0) {}

  /// Accumulates an F×H×W feature map labelled by an H×W map.
  void add(const Tensor& features, const LabelMap& labels) {
    if (features.rank() != 3 || features.dim(0) != dim_ || features.dim(1) != labels.height ||
        features.dim(2) != labels.width) {
      throw ShapeError("ClassCenters::add", features.shape(), Shape{dim_, labels.height, labels.width});
    }
    const std::size_t HW = labels.height * labels.width;
    for (std::size_t i = 0; i < HW; ++i) {
      const std::size_t c = labels.values[i];
      if (c >= counts_.size()) throw std::out_of_range("ClassCenters::add: label out of range");
      for (std::size_t f = 0; f < dim_; ++f) sums_[c][f] += features[f * HW + i];
      ++counts_[c];
    }
  }

  std::size_t num_classes() const noexcept { return counts_.size(); }
  std::size_t count(std::size_t c) const { return counts_.at(c); }

  std::optional<std::vector<double>> center(std::size_t c) const {
    if (counts_.at(c) == 0) return std::nullopt;
    std::vector<double> m = sums_[c];
    for (double& v : m) v /= static_cast<double>(counts_[c]);
    return m;
  }

 private:
  std::size_t dim_;
  std::vector<std::vector<double>> sums_;
  std::vector<std::uint64_t> counts_;
};

/// Euclidean distance between same-class centres of two domains; empty where
/// the class is missing from either domain.
inline std::vector<OptDouble> center_distances(const ClassCenters& source, const ClassCenters& target) {
  if (source.num_classes() != target.num_classes()) throw std::invalid_argument("center_distances: class count mismatch");
  std::vector<OptDouble> out(source.num_classes());
  for (std::size_t c = 0; c < out.size(); ++c) {
    const auto a = source.center(c), b = target.center(c);
    if (!a || !b) continue;
    double s = 0.0;
    for (std::size_t f = 0; f < a->size(); ++f) s += ((*a)[f] - (*b)[f]) * ((*a)[f] - (*b)[f]);
    out[c] = std::sqrt(s);
  }
  return out;
}

/// Raw per-class centre distances from F×H×W feature maps tagged by domain.
inline std::vector<OptDouble> ccd_raw(std::span<const Tensor> features, std::span<const LabelMap> labels,
                                      std::span<const Domain> domains, std::size_t num_classes) {
  if (features.size() != labels.size() || features.size() != domains.size()) {
    throw std::invalid_argument("ccd: features, labels and domain tags must have equal length");
  }
  if (features.empty()) throw std::invalid_argument("ccd: no features");
  const std::size_t F = features.front().dim(0);
  ClassCenters src(num_classes, F), tgt(num_classes, F);
  for (std::size_t i = 0; i < features.size(); ++i) (domains[i] == Domain::source ? src : tgt).add(features[i], labels[i]);
  return center_distances(src, tgt);
}

struct CcdEntry {
  std::size_t epoch = 0;
  std::vector<OptDouble> raw;
  std::vector<OptDouble> normalized;
};

/// d_i^e / d_i^0 per class, where the first recorded entry is epoch 0.
class CcdSeries {
 public:
  const CcdEntry& record(std::size_t epoch, std::vector<OptDouble> raw) {
    if (entries_.empty()) baseline_ = raw;
    if (raw.size() != baseline_.size()) throw std::invalid_argument("CcdSeries: class count changed");
    CcdEntry e{epoch, std::move(raw), {}};
    e.normalized.resize(e.raw.size());
    for (std::size_t c = 0; c < e.raw.size(); ++c) {
      if (e.raw[c] && baseline_[c] && *baseline_[c] > 0.0) e.normalized[c] = *e.raw[c] / *baseline_[c];
    }
    entries_.push_back(std::move(e));
    return entries_.back();
  }

  const std::vector<CcdEntry>& entries() const noexcept { return entries_; }
  const std::vector<OptDouble>& baseline() const noexcept { return baseline_; }

 private:
  std::vector<OptDouble> baseline_;
  std::vector<CcdEntry> entries_;
};

// ---------------------------------------------------------------------------
// Discriminator equilibrium

struct DStat {
  double source = 0.0;
  double target = 0.0;
};

/// Mean over the trailing `window_fraction` of D-trained iterations of the
/// per-iteration pixel mean of |D − 0.5|, per domain. Each value is in [0, 0.5].
inline DStat d_convergence_stat(const RunRecord& run, double window_fraction) {
  if (!(window_fraction > 0.0 && window_fraction <= 1.0)) {
    throw std::invalid_argument("d_convergence_stat: window fraction must lie in (0, 1]");
  }
  std::vector<const IterationRecord*> with_d;
  for (const IterationRecord& r : run.iterations)
    if (r.has_d_stats) with_d.push_back(&r);
  const auto window = static_cast<std::size_t>(std::ceil(window_fraction * static_cast<double>(with_d.size())));
  if (window == 0) throw std::invalid_argument("d_convergence_stat: empty window (no discriminator statistics)");
  DStat s;
  for (std::size_t i = with_d.size() - window; i < with_d.size(); ++i) {
    s.source += with_d[i]->d_src_dev;
    s.target += with_d[i]->d_tgt_dev;
  }
  s.source /= static_cast<double>(window);
  s.target /= static_cast<double>(window);
  return s;
}

/// Mean discriminator loss over the same trailing window.
inline double d_loss_tail(const RunRecord& run, double window_fraction) {
  std::vector<double> losses;
  for (const IterationRecord& r : run.iterations)
    if (r.has_d_stats) losses.push_back(r.losses.adv_d);
  const auto window = static_cast<std::size_t>(std::ceil(window_fraction * static_cast<double>(losses.size())));
  if (window == 0) throw std::invalid_argument("d_loss_tail: empty window");
  double s = 0.0;
  for (std::size_t i = losses.size() - window; i < losses.size(); ++i) s += losses[i];
  return s / static_cast<double>(window);
}

}  // namespace clan_forge
