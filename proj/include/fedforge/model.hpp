#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedforge/rng.hpp"
#include "fedforge/tensor.hpp"

namespace fedforge {

enum class Arch { Mlp, Cnn };

inline std::string arch_name(Arch a) { return a == Arch::Mlp ? "mlp" : "cnn"; }

inline Arch arch_from_name(const std::string& s) {
  if (s == "mlp") return Arch::Mlp;
  if (s == "cnn") return Arch::Cnn;
  throw Error("unknown architecture tag: " + s);
}

// mlp: flatten -> dense(hidden) -> relu -> dense(classes)
// cnn: conv3x3(same, hidden channels) -> relu -> avgpool2 -> dense(classes)
struct ModelSpec {
  Arch arch = Arch::Mlp;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t classes = 10;
  std::size_t hidden = 32;  // dense width for mlp, channel count for cnn

  std::size_t input_size() const { return height * width * channels; }

  void validate() const {
    if (classes < 2) throw Error("model spec: class count must be >= 2");
    if (height < 1 || width < 1 || channels < 1 || hidden < 1) {
      throw Error("model spec: dims must be positive");
    }
    if (arch == Arch::Cnn && (height % 2 != 0 || width % 2 != 0)) {
      throw Error("model spec: cnn needs even height and width for avgpool2");
    }
  }

  std::size_t param_count() const {
    if (arch == Arch::Mlp) {
      return input_size() * hidden + hidden + hidden * classes + classes;
    }
    const std::size_t conv = hidden * 3 * 3 * channels + hidden;
    const std::size_t feat = (height / 2) * (width / 2) * hidden;
    return conv + feat * classes + classes;
  }

  bool operator==(const ModelSpec&) const = default;
};

// Parameter layout, flat and layer-by-layer:
//   mlp: W1[in*hidden] b1[hidden] W2[hidden*classes] b2[classes]
//   cnn: Wc[F*3*3*C] bc[F] Wd[feat*classes] bd[classes]
struct Model {
  ModelSpec spec;
  ParamVector params;

  static Model zeros(const ModelSpec& s) {
    s.validate();
    Model m;
    m.spec = s;
    m.params = ParamVector(s.param_count());
    return m;
  }

  // Glorot-uniform weights, zero biases.
  static Model init(const ModelSpec& s, Rng& rng) {
    Model m = zeros(s);
    auto fill_dense = [&](std::size_t off, std::size_t fan_in,
                          std::size_t fan_out) {
      const double b = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (std::size_t i = 0; i < fan_in * fan_out; ++i) {
        m.params[off + i] = rng.uniform(-b, b);
      }
    };
    if (s.arch == Arch::Mlp) {
      fill_dense(0, s.input_size(), s.hidden);
      fill_dense(s.input_size() * s.hidden + s.hidden, s.hidden, s.classes);
    } else {
      const double bc =
          std::sqrt(6.0 / static_cast<double>(9 * s.channels + 9 * s.hidden));
      for (std::size_t i = 0; i < s.hidden * 9 * s.channels; ++i) {
        m.params[i] = rng.uniform(-bc, bc);
      }
      const std::size_t feat = (s.height / 2) * (s.width / 2) * s.hidden;
      fill_dense(s.hidden * 9 * s.channels + s.hidden, feat, s.classes);
    }
    return m;
  }
};

namespace detail {

struct MlpOffsets {
  std::size_t w1, b1, w2, b2;
};
inline MlpOffsets mlp_offsets(const ModelSpec& s) {
  MlpOffsets o;
  o.w1 = 0;
  o.b1 = s.input_size() * s.hidden;
  o.w2 = o.b1 + s.hidden;
  o.b2 = o.w2 + s.hidden * s.classes;
  return o;
}

struct CnnOffsets {
  std::size_t wc, bc, wd, bd;
  std::size_t feat;
};
inline CnnOffsets cnn_offsets(const ModelSpec& s) {
  CnnOffsets o;
  o.wc = 0;
  o.bc = s.hidden * 9 * s.channels;
  o.wd = o.bc + s.hidden;
  o.feat = (s.height / 2) * (s.width / 2) * s.hidden;
  o.bd = o.wd + o.feat * s.classes;
  return o;
}

// Cached activations from one forward pass; consumed by the backward pass.
struct ForwardCache {
  std::size_t batch = 0;
  std::vector<double> input;    // flattened batch (B, in)
  std::vector<double> z1;       // mlp pre-relu / cnn conv pre-relu
  std::vector<double> a1;       // post-relu (cnn: pre-pool)
  std::vector<double> pooled;   // cnn only (B, feat)
  std::vector<double> logits;   // (B, classes)
};

inline void check_batch_shape(const Model& m, const Tensor& batch) {
  const auto& s = m.spec;
  if (batch.rank() != 4 || batch.dim(1) != s.height || batch.dim(2) != s.width ||
      batch.dim(3) != s.channels) {
    throw Error("forward: batch shape " + shape_string(batch.shape()) +
                " does not match model input (B," + std::to_string(s.height) +
                "," + std::to_string(s.width) + "," +
                std::to_string(s.channels) + ")");
  }
}

inline ForwardCache forward_pass(const Model& m, const Tensor& batch) {
  check_batch_shape(m, batch);
  const auto& s = m.spec;
  const double* p = m.params.data();
  ForwardCache c;
  c.batch = batch.dim(0);
  const std::size_t B = c.batch;

  if (s.arch == Arch::Mlp) {
    const auto o = mlp_offsets(s);
    const std::size_t in = s.input_size(), hid = s.hidden, cls = s.classes;
    c.input.assign(batch.data(), batch.data() + B * in);
    c.z1.assign(B * hid, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double* x = c.input.data() + b * in;
      double* z = c.z1.data() + b * hid;
      for (std::size_t j = 0; j < hid; ++j) z[j] = p[o.b1 + j];
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* w = p + o.w1 + i * hid;
        for (std::size_t j = 0; j < hid; ++j) z[j] += xi * w[j];
      }
    }
    c.a1 = c.z1;
    for (auto& v : c.a1) v = std::max(0.0, v);
    c.logits.assign(B * cls, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double* a = c.a1.data() + b * hid;
      double* y = c.logits.data() + b * cls;
      for (std::size_t k = 0; k < cls; ++k) y[k] = p[o.b2 + k];
      for (std::size_t j = 0; j < hid; ++j) {
        const double aj = a[j];
        if (aj == 0.0) continue;
        const double* w = p + o.w2 + j * cls;
        for (std::size_t k = 0; k < cls; ++k) y[k] += aj * w[k];
      }
    }
    return c;
  }

  // cnn
  const auto o = cnn_offsets(s);
  const std::size_t H = s.height, W = s.width, C = s.channels, F = s.hidden;
  const std::size_t cls = s.classes;
  const std::size_t Hp = H / 2, Wp = W / 2;
  c.input.assign(batch.data(), batch.data() + B * H * W * C);
  c.z1.assign(B * H * W * F, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double* x = c.input.data() + b * H * W * C;
    double* z = c.z1.data() + b * H * W * F;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        for (std::size_t f = 0; f < F; ++f) {
          double acc = p[o.bc + f];
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const long ih = static_cast<long>(h) + static_cast<long>(ky) - 1;
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iw = static_cast<long>(w) + static_cast<long>(kx) - 1;
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              const double* xp = x + (ih * W + iw) * C;
              const double* wp = p + o.wc + ((f * 3 + ky) * 3 + kx) * C;
              for (std::size_t ch = 0; ch < C; ++ch) acc += xp[ch] * wp[ch];
            }
          }
          z[(h * W + w) * F + f] = acc;
        }
      }
    }
  }
  c.a1 = c.z1;
  for (auto& v : c.a1) v = std::max(0.0, v);
  c.pooled.assign(B * o.feat, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double* a = c.a1.data() + b * H * W * F;
    double* q = c.pooled.data() + b * o.feat;
    for (std::size_t h = 0; h < Hp; ++h) {
      for (std::size_t w = 0; w < Wp; ++w) {
        for (std::size_t f = 0; f < F; ++f) {
          const double sum = a[((2 * h) * W + 2 * w) * F + f] +
                             a[((2 * h) * W + 2 * w + 1) * F + f] +
                             a[((2 * h + 1) * W + 2 * w) * F + f] +
                             a[((2 * h + 1) * W + 2 * w + 1) * F + f];
          q[(h * Wp + w) * F + f] = 0.25 * sum;
        }
      }
    }
  }
  c.logits.assign(B * cls, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double* q = c.pooled.data() + b * o.feat;
    double* y = c.logits.data() + b * cls;
    for (std::size_t k = 0; k < cls; ++k) y[k] = p[o.bd + k];
    for (std::size_t j = 0; j < o.feat; ++j) {
      const double qj = q[j];
      if (qj == 0.0) continue;
      const double* w = p + o.wd + j * cls;
      for (std::size_t k = 0; k < cls; ++k) y[k] += qj * w[k];
    }
  }
  return c;
}

// Mean cross-entropy over the batch plus dL/dlogits (already 1/B scaled).
inline double cross_entropy(const ForwardCache& c, const std::vector<int>& labels,
                            std::size_t classes, std::vector<double>& dlogits) {
  const std::size_t B = c.batch;
  if (labels.size() != B) throw Error("loss: label count != batch size");
  dlogits.assign(B * classes, 0.0);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw Error("loss: label " + std::to_string(y) + " out of range at batch index " +
                  std::to_string(b));
    }
    const double* l = c.logits.data() + b * classes;
    double mx = l[0];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, l[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(l[k] - mx);
    const double logsum = std::log(sum) + mx;
    const double sample_loss = logsum - l[y];
    if (!std::isfinite(sample_loss)) {
      throw Error("loss: non-finite loss at batch index " + std::to_string(b));
    }
    loss += sample_loss;
    double* d = dlogits.data() + b * classes;
    const double inv = 1.0 / static_cast<double>(B);
    for (std::size_t k = 0; k < classes; ++k) {
      d[k] = (std::exp(l[k] - logsum) - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) * inv;
    }
  }
  return loss / static_cast<double>(B);
}

}  // namespace detail

inline Tensor forward(const Model& m, const Tensor& batch) {
  auto c = detail::forward_pass(m, batch);
  return Tensor({c.batch, m.spec.classes}, std::move(c.logits));
}

inline std::vector<int> predict(const Model& m, const Tensor& batch) {
  auto c = detail::forward_pass(m, batch);
  const std::size_t cls = m.spec.classes;
  std::vector<int> out(c.batch);
  for (std::size_t b = 0; b < c.batch; ++b) {
    const double* l = c.logits.data() + b * cls;
    std::size_t best = 0;
    for (std::size_t k = 1; k < cls; ++k)
      if (l[k] > l[best]) best = k;
    out[b] = static_cast<int>(best);
  }
  return out;
}

inline double mean_loss(const Model& m, const Tensor& batch,
                        const std::vector<int>& labels) {
  auto c = detail::forward_pass(m, batch);
  std::vector<double> dl;
  return detail::cross_entropy(c, labels, m.spec.classes, dl);
}

struct ParamGrads {
  double loss = 0.0;
  ParamVector grad;
};

struct InputGrads {
  double loss = 0.0;
  Tensor grad;  // same shape as the batch
};

namespace detail {

// Backward pass; fills whichever of param_grad / input_grad is non-null.
inline void backward(const Model& m, const ForwardCache& c,
                     const std::vector<double>& dlogits, ParamVector* param_grad,
                     std::vector<double>* input_grad) {
  const auto& s = m.spec;
  const double* p = m.params.data();
  const std::size_t B = c.batch;
  double* g = nullptr;
  if (param_grad) {
    *param_grad = ParamVector(s.param_count());
    g = param_grad->data();
  }
  if (input_grad) input_grad->assign(c.input.size(), 0.0);

  if (s.arch == Arch::Mlp) {
    const auto o = mlp_offsets(s);
    const std::size_t in = s.input_size(), hid = s.hidden, cls = s.classes;
    std::vector<double> dz1(hid);
    for (std::size_t b = 0; b < B; ++b) {
      const double* dl = dlogits.data() + b * cls;
      const double* a = c.a1.data() + b * hid;
      const double* z = c.z1.data() + b * hid;
      const double* x = c.input.data() + b * in;
      if (g) {
        for (std::size_t k = 0; k < cls; ++k) g[o.b2 + k] += dl[k];
        for (std::size_t j = 0; j < hid; ++j) {
          const double aj = a[j];
          if (aj == 0.0) continue;
          double* gw = g + o.w2 + j * cls;
          for (std::size_t k = 0; k < cls; ++k) gw[k] += aj * dl[k];
        }
      }
      for (std::size_t j = 0; j < hid; ++j) {
        double acc = 0.0;
        const double* w = p + o.w2 + j * cls;
        for (std::size_t k = 0; k < cls; ++k) acc += w[k] * dl[k];
        dz1[j] = z[j] > 0.0 ? acc : 0.0;
      }
      if (g) {
        for (std::size_t j = 0; j < hid; ++j) g[o.b1 + j] += dz1[j];
        for (std::size_t i = 0; i < in; ++i) {
          const double xi = x[i];
          if (xi == 0.0) continue;
          double* gw = g + o.w1 + i * hid;
          for (std::size_t j = 0; j < hid; ++j) gw[j] += xi * dz1[j];
        }
      }
      if (input_grad) {
        double* dx = input_grad->data() + b * in;
        for (std::size_t i = 0; i < in; ++i) {
          double acc = 0.0;
          const double* w = p + o.w1 + i * hid;
          for (std::size_t j = 0; j < hid; ++j) acc += w[j] * dz1[j];
          dx[i] = acc;
        }
      }
    }
    return;
  }

  // cnn
  const auto o = cnn_offsets(s);
  const std::size_t H = s.height, W = s.width, C = s.channels, F = s.hidden;
  const std::size_t cls = s.classes, Hp = H / 2, Wp = W / 2;
  std::vector<double> dpool(o.feat), dz1(H * W * F);
  for (std::size_t b = 0; b < B; ++b) {
    const double* dl = dlogits.data() + b * cls;
    const double* q = c.pooled.data() + b * o.feat;
    const double* z = c.z1.data() + b * H * W * F;
    const double* x = c.input.data() + b * H * W * C;
    if (g) {
      for (std::size_t k = 0; k < cls; ++k) g[o.bd + k] += dl[k];
      for (std::size_t j = 0; j < o.feat; ++j) {
        const double qj = q[j];
        if (qj == 0.0) continue;
        double* gw = g + o.wd + j * cls;
        for (std::size_t k = 0; k < cls; ++k) gw[k] += qj * dl[k];
      }
    }
    for (std::size_t j = 0; j < o.feat; ++j) {
      double acc = 0.0;
      const double* w = p + o.wd + j * cls;
      for (std::size_t k = 0; k < cls; ++k) acc += w[k] * dl[k];
      dpool[j] = acc;
    }
    // unpool (each of the 4 cells gets 1/4) and relu gate
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t idx = (h * W + w) * F + f;
          const double up = 0.25 * dpool[((h / 2) * Wp + w / 2) * F + f];
          dz1[idx] = z[idx] > 0.0 ? up : 0.0;
        }
      }
    }
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) {
        for (std::size_t f = 0; f < F; ++f) {
          const double d = dz1[(h * W + w) * F + f];
          if (d == 0.0) continue;
          if (g) g[o.bc + f] += d;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const long ih = static_cast<long>(h) + static_cast<long>(ky) - 1;
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iw = static_cast<long>(w) + static_cast<long>(kx) - 1;
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              const double* xp = x + (ih * W + iw) * C;
              const double* wp = p + o.wc + ((f * 3 + ky) * 3 + kx) * C;
              for (std::size_t ch = 0; ch < C; ++ch) {
                if (g) g[o.wc + ((f * 3 + ky) * 3 + kx) * C + ch] += d * xp[ch];
                if (input_grad) {
                  (*input_grad)[b * H * W * C + (ih * W + iw) * C + ch] +=
                      d * wp[ch];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline ParamGrads loss_and_param_grads(const Model& m, const Tensor& batch,
                                       const std::vector<int>& labels) {
  auto c = detail::forward_pass(m, batch);
  std::vector<double> dl;
  ParamGrads out;
  out.loss = detail::cross_entropy(c, labels, m.spec.classes, dl);
  detail::backward(m, c, dl, &out.grad, nullptr);
  return out;
}

inline InputGrads loss_and_input_grads(const Model& m, const Tensor& batch,
                                       const std::vector<int>& labels) {
  auto c = detail::forward_pass(m, batch);
  std::vector<double> dl;
  InputGrads out;
  out.loss = detail::cross_entropy(c, labels, m.spec.classes, dl);
  std::vector<double> dx;
  detail::backward(m, c, dl, nullptr, &dx);
  out.grad = Tensor(batch.shape(), std::move(dx));
  return out;
}

// Gradient with respect to a trigger pattern shared by every batch sample:
// sum over the batch of the masked input gradients. The batch must already
// carry the trigger so the chain reaches the pattern only through masked
// pixels. Entries outside the mask are exactly zero.
inline InputGrads loss_and_trigger_grad(const Model& m, const Tensor& batch,
                                        const std::vector<int>& labels,
                                        const Tensor& mask) {
  const auto& s = m.spec;
  if (mask.rank() != 3 || mask.dim(0) != s.height || mask.dim(1) != s.width ||
      mask.dim(2) != s.channels) {
    throw Error("trigger grad: mask shape " + shape_string(mask.shape()) +
                " does not match model input");
  }
  InputGrads per_input = loss_and_input_grads(m, batch, labels);
  InputGrads out;
  out.loss = per_input.loss;
  out.grad = Tensor({s.height, s.width, s.channels});
  const std::size_t B = batch.dim(0), n = s.height * s.width * s.channels;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      out.grad[i] += mask[i] * per_input.grad[b * n + i];
    }
  }
  return out;
}

inline void sgd_step(Model& m, const ParamVector& grad, double lr) {
  if (lr <= 0.0) throw Error("sgd_step: learning rate must be > 0");
  if (grad.size() != m.params.size()) {
    throw Error("sgd_step: grad length " + std::to_string(grad.size()) +
                " != param length " + std::to_string(m.params.size()));
  }
  for (std::size_t i = 0; i < grad.size(); ++i) m.params[i] -= lr * grad[i];
}

}  // namespace fedforge
