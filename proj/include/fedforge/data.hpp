#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "fedforge/rng.hpp"
#include "fedforge/tensor.hpp"

namespace fedforge {

enum class Split { Train, Test };

struct Dataset {
  Tensor images;            // (N,H,W,C), values in [0,1]
  std::vector<int> labels;  // class ids
  std::size_t classes = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t channels() const { return images.dim(3); }

  Tensor image(std::size_t i) const {
    const std::size_t n = height() * width() * channels();
    std::vector<double> v(images.data() + i * n, images.data() + (i + 1) * n);
    return Tensor({height(), width(), channels()}, std::move(v));
  }

  // Gather a batch (B,H,W,C) for the given sample indices.
  Tensor batch(const std::vector<std::size_t>& idx) const {
    const std::size_t n = height() * width() * channels();
    Tensor out({idx.size(), height(), width(), channels()});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy(images.data() + idx[b] * n, images.data() + (idx[b] + 1) * n,
                out.data() + b * n);
    }
    return out;
  }

  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) out[b] = labels[idx[b]];
    return out;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.images = batch(idx);
    out.labels = batch_labels(idx);
    out.classes = classes;
    out.split = split;
    return out;
  }
};

struct PartitionConfig {
  double alpha = 0.5;
  std::size_t clients = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha <= 0.0) throw Error("partition: alpha must be > 0");
    if (clients == 0) throw Error("partition: client count must be >= 1");
  }
};

struct Trigger {
  Tensor pattern;   // delta, (H,W,C) in [0,1]
  Tensor mask;      // binary, (H,W,C)
  int target = 0;   // y_t

  void validate(std::size_t classes) const {
    if (!pattern.same_shape(mask)) {
      throw Error("trigger: pattern/mask shape mismatch");
    }
    for (double m : mask.values()) {
      if (m != 0.0 && m != 1.0) throw Error("trigger: mask entries must be 0 or 1");
    }
    for (double d : pattern.values()) {
      if (!std::isfinite(d)) throw Error("trigger: non-finite pattern value");
    }
    if (target < 0 || static_cast<std::size_t>(target) >= classes) {
      throw Error("trigger: target label out of range");
    }
  }

  std::size_t mask_support() const {
    std::size_t n = 0;
    for (double m : mask.values()) n += (m != 0.0);
    return n;
  }
};

// Patch side follows the area ratio used at full scale: round(5/32 * side).
inline std::size_t default_patch_side(std::size_t image_side) {
  return static_cast<std::size_t>(
      std::max(1.0, std::floor(5.0 / 32.0 * static_cast<double>(image_side) + 0.5)));
}

// Fixed gray top-left patch; the unoptimized baseline trigger.
inline Trigger naive_trigger(std::size_t h, std::size_t w, std::size_t c,
                             std::size_t patch, int target) {
  Trigger t;
  t.pattern = Tensor({h, w, c});
  t.mask = Tensor({h, w, c});
  t.target = target;
  for (std::size_t y = 0; y < std::min(patch, h); ++y) {
    for (std::size_t x = 0; x < std::min(patch, w); ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        t.mask.at3(y, x, ch) = 1.0;
        t.pattern.at3(y, x, ch) = 0.5;
      }
    }
  }
  return t;
}

// Class templates plus i.i.d. Gaussian pixel noise, clamped to [0,1].
inline std::pair<Dataset, Dataset> generate_synthetic(
    std::size_t classes, std::size_t per_class,
    std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed,
    double noise_sigma = 0.15, std::size_t test_per_class = 0) {
  if (h < 8 || w < 8) throw Error("generate_synthetic: H and W must be >= 8");
  if (classes < 2) throw Error("generate_synthetic: need >= 2 classes");
  if (per_class == 0) throw Error("generate_synthetic: per_class must be >= 1");
  if (test_per_class == 0) test_per_class = std::max<std::size_t>(1, per_class / 5);

  const std::size_t n = h * w * c;
  Rng trng = stream(seed, "data-templates");
  std::vector<std::vector<double>> templates(classes, std::vector<double>(n));
  for (auto& t : templates) {
    for (auto& v : t) v = trng.uniform();
  }

  auto make = [&](std::size_t count_per_class, Split split,
                  std::string_view stream_name) {
    Dataset ds;
    ds.classes = classes;
    ds.split = split;
    ds.images = Tensor({classes * count_per_class, h, w, c});
    ds.labels.resize(classes * count_per_class);
    Rng nrng = stream(seed, stream_name);
    std::size_t i = 0;
    for (std::size_t cls = 0; cls < classes; ++cls) {
      for (std::size_t s = 0; s < count_per_class; ++s, ++i) {
        ds.labels[i] = static_cast<int>(cls);
        double* px = ds.images.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          px[j] = std::clamp(templates[cls][j] + nrng.normal(0.0, noise_sigma),
                             0.0, 1.0);
        }
      }
    }
    return ds;
  };

  return {make(per_class, Split::Train, "data-train-noise"),
          make(test_per_class, Split::Test, "data-test-noise")};
}

// Per-class Dirichlet split across clients. Index sets are disjoint and
// cover the dataset; resamples (bounded) until every client is non-empty.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(
    const Dataset& ds, const PartitionConfig& cfg) {
  cfg.validate();
  if (cfg.clients == 1) {
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), 0);
    return {all};
  }
  Rng rng = stream(cfg.seed, "partition");
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::vector<std::size_t>> parts(cfg.clients);
    for (std::size_t cls = 0; cls < ds.classes; ++cls) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == static_cast<int>(cls)) idx.push_back(i);
      }
      if (idx.empty()) continue;
      rng.shuffle(idx);
      const auto p = rng.dirichlet(cfg.alpha, cfg.clients);
      // split by cumulative proportion
      std::size_t start = 0;
      double cum = 0.0;
      for (std::size_t k = 0; k < cfg.clients; ++k) {
        cum += p[k];
        std::size_t end = (k + 1 == cfg.clients)
                              ? idx.size()
                              : static_cast<std::size_t>(
                                    std::llround(cum * static_cast<double>(idx.size())));
        end = std::min(end, idx.size());
        end = std::max(end, start);
        for (std::size_t i = start; i < end; ++i) parts[k].push_back(idx[i]);
        start = end;
      }
    }
    const bool ok = std::all_of(parts.begin(), parts.end(),
                                [](const auto& v) { return !v.empty(); });
    if (ok) {
      for (auto& v : parts) std::sort(v.begin(), v.end());
      return parts;
    }
  }
  throw Error("dirichlet_partition: empty client after 100 resampling attempts");
}

// x' = (1 - M) .* x + M .* delta, for a single image or a batch.
inline Tensor apply_trigger(const Tensor& x, const Trigger& trig) {
  const std::size_t n = trig.pattern.size();
  if (x.rank() == 3) {
    if (!x.same_shape(trig.pattern)) {
      throw Error("apply_trigger: image shape " + shape_string(x.shape()) +
                  " != trigger shape " + shape_string(trig.pattern.shape()));
    }
    Tensor out = x;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = (1.0 - trig.mask[i]) * x[i] + trig.mask[i] * trig.pattern[i];
    }
    return out;
  }
  if (x.rank() == 4 && x.size() % n == 0 &&
      x.dim(1) == trig.pattern.dim(0) && x.dim(2) == trig.pattern.dim(1) &&
      x.dim(3) == trig.pattern.dim(2)) {
    Tensor out = x;
    const std::size_t B = x.dim(0);
    for (std::size_t b = 0; b < B; ++b) {
      double* o = out.data() + b * n;
      const double* in = x.data() + b * n;
      for (std::size_t i = 0; i < n; ++i) {
        o[i] = (1.0 - trig.mask[i]) * in[i] + trig.mask[i] * trig.pattern[i];
      }
    }
    return out;
  }
  throw Error("apply_trigger: batch shape " + shape_string(x.shape()) +
              " incompatible with trigger " + shape_string(trig.pattern.shape()));
}

// Trigger + relabel a uniformly sampled floor(fraction*N) subset.
inline Dataset poison_dataset(const Dataset& ds, const Trigger& trig,
                              double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) {
    throw Error("poison_dataset: fraction must be in [0,1]");
  }
  trig.validate(ds.classes);
  Dataset out = ds;
  const std::size_t count =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
  if (count == 0) return out;
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = stream(seed, "poison");
  rng.shuffle(idx);
  const std::size_t n = ds.height() * ds.width() * ds.channels();
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = idx[k];
    double* px = out.images.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      px[j] = (1.0 - trig.mask[j]) * px[j] + trig.mask[j] * trig.pattern[j];
    }
    out.labels[i] = trig.target;
  }
  return out;
}

}  // namespace fedforge
