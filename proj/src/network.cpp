#include "fktlab/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fktlab/errors.hpp"
#include "fktlab/rng.hpp"

namespace fktlab {

namespace {

constexpr double kNormEps = 1e-5;
constexpr std::uint64_t kHeadTag = 0x68656164;  // "head"

// Activation buffer: [N, filters] when flat, [N, filters, h, w] when spatial.
struct Act {
  Tensor t;
  std::size_t filters = 0;
  std::size_t h = 1;
  std::size_t w = 1;
  bool spatial = false;

  std::size_t n() const { return t.rows(); }
  std::size_t plane() const { return h * w; }
};

struct LayerTrace {
  Act input;                // as consumed by the layer
  bool pooled = false;      // input was pooled from the previous spatial output
  std::size_t pool_h = 1;
  std::size_t pool_w = 1;
  Act pre;                  // pre-activation, gated
  Act out;
  std::vector<double> inv_std;  // normalize layers
};

struct Trace {
  std::vector<LayerTrace> layers;
  Tensor features;  // [N x feature width], input to the head
  Tensor logits;
};

Act flatten_input(const Tensor& batch) {
  Act a;
  const std::size_t n = batch.rows();
  a.t = batch.reshaped({n, batch.row_size()});
  a.filters = batch.row_size();
  return a;
}

Act spatial_input(const Tensor& batch, std::size_t layer) {
  Act a;
  const Shape& s = batch.shape();
  if (s.size() == 4) {
    a.filters = s[1];
    a.h = s[2];
    a.w = s[3];
  } else if (s.size() == 3) {
    a.filters = 1;
    a.h = s[1];
    a.w = s[2];
  } else {
    throw DimensionError(layer, "conv2d input must be [N,C,H,W] or [N,H,W], got " +
                                    shape_to_string(s));
  }
  a.spatial = true;
  a.t = batch.reshaped({batch.rows(), a.filters, a.h, a.w});
  return a;
}

Act pool(const Act& in) {
  Act out;
  const std::size_t n = in.n();
  const std::size_t p = in.plane();
  out.filters = in.filters;
  out.t = Tensor({n, in.filters});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < in.filters; ++f) {
      const double* src = &in.t[(i * in.filters + f) * p];
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) s += src[q];
      out.t[i * in.filters + f] = s / static_cast<double>(p);
    }
  }
  return out;
}

std::vector<std::size_t> trainable_owner(const std::vector<LayerSpec>& layers) {
  std::vector<std::size_t> owner(layers.size(), 0);
  std::size_t rank = 0;
  bool seen = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].trainable()) {
      rank = seen ? rank + 1 : 0;
      seen = true;
    }
    owner[i] = rank;
  }
  return owner;
}

void check_gate(const NetworkState& net, const FilterMask& gate) {
  if (gate.layer_count() != net.trainable_count()) {
    throw DimensionError(gate.layer_count(), "gate has " + std::to_string(gate.layer_count()) +
                                                 " layers, network has " +
                                                 std::to_string(net.trainable_count()));
  }
  for (std::size_t l = 0; l < gate.layer_count(); ++l) {
    if (gate.width(l) != net.trainable_spec(l).out_filters) {
      throw DimensionError(net.stack_index(l), "gate width " + std::to_string(gate.width(l)) +
                                                   " does not match " +
                                                   std::to_string(net.trainable_spec(l).out_filters) +
                                                   " filters");
    }
  }
}

double activate(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : z;
}

double activate_grad(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

// Prepares the input of stack layer i from the previous output.
void prepare_input(const LayerSpec& spec, std::size_t i, const Act& prev, bool raw,
                   LayerTrace& lt) {
  if (spec.kind == LayerKind::dense) {
    if (raw) {
      lt.input = flatten_input(prev.t);
    } else if (prev.spatial) {
      lt.input = pool(prev);
      lt.pooled = true;
      lt.pool_h = prev.h;
      lt.pool_w = prev.w;
    } else {
      lt.input = prev;
    }
  } else if (spec.kind == LayerKind::conv2d) {
    if (raw) {
      lt.input = spatial_input(prev.t, i);
    } else if (!prev.spatial) {
      throw DimensionError(i, "conv2d cannot follow a flat layer");
    } else {
      lt.input = prev;
    }
  } else {
    if (raw) throw DimensionError(i, "normalize layer must follow a trainable layer");
    lt.input = prev;
  }
  if (lt.input.filters != spec.in_filters) {
    throw DimensionError(i, "expects " + std::to_string(spec.in_filters) + " input filters, got " +
                                std::to_string(lt.input.filters));
  }
  if (spec.kind == LayerKind::conv2d &&
      (spec.kernel < 1 || spec.kernel > lt.input.h || spec.kernel > lt.input.w)) {
    throw DimensionError(i, "kernel " + std::to_string(spec.kernel) + " does not fit a " +
                                std::to_string(lt.input.h) + "x" + std::to_string(lt.input.w) +
                                " map");
  }
}

void dense_forward(const Act& in, const Tensor& w, std::size_t out_f,
                   std::span<const std::uint8_t> gate, Act& z) {
  const std::size_t n = in.n();
  const std::size_t in_f = in.filters;
  z.filters = out_f;
  z.t = Tensor({n, out_f});
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = &in.t[i * in_f];
    for (std::size_t o = 0; o < out_f; ++o) {
      if (!gate[o]) continue;
      const double* wr = &w[o * in_f];
      double s = 0.0;
      for (std::size_t c = 0; c < in_f; ++c) s += wr[c] * x[c];
      z.t[i * out_f + o] = s;
    }
  }
}

void conv_forward(const Act& in, const Tensor& w, std::size_t out_f, std::size_t k,
                  std::span<const std::uint8_t> gate, Act& z) {
  const std::size_t n = in.n();
  const std::size_t c_in = in.filters;
  const std::size_t oh = in.h - k + 1;
  const std::size_t ow = in.w - k + 1;
  z.filters = out_f;
  z.h = oh;
  z.w = ow;
  z.spatial = true;
  z.t = Tensor({n, out_f, oh, ow});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_f; ++o) {
      if (!gate[o]) continue;
      double* dst = &z.t[(i * out_f + o) * oh * ow];
      for (std::size_t c = 0; c < c_in; ++c) {
        const double* src = &in.t[(i * c_in + c) * in.h * in.w];
        const double* wk = &w[(o * c_in + c) * k * k];
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                s += wk[ky * k + kx] * src[(y + ky) * in.w + x + kx];
              }
            }
            dst[y * ow + x] += s;
          }
        }
      }
    }
  }
}

void normalize_forward(const Act& in, std::span<const std::uint8_t> gate, Act& z,
                       std::vector<double>& inv_std) {
  z = in;
  z.t.fill(0.0);
  const std::size_t n = in.n();
  const std::size_t p = in.plane();
  const double m = static_cast<double>(n * p);
  inv_std.assign(in.filters, 0.0);
  for (std::size_t f = 0; f < in.filters; ++f) {
    if (!gate[f]) continue;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < p; ++q) mean += in.t[(i * in.filters + f) * p + q];
    }
    mean /= m;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < p; ++q) {
        const double d = in.t[(i * in.filters + f) * p + q] - mean;
        var += d * d;
      }
    }
    var /= m;
    const double is = 1.0 / std::sqrt(var + kNormEps);
    inv_std[f] = is;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < p; ++q) {
        const std::size_t idx = (i * in.filters + f) * p + q;
        z.t[idx] = (in.t[idx] - mean) * is;
      }
    }
  }
}

Trace run_forward(const NetworkState& net, const Tensor& batch, const FilterMask& gate,
                  const Head* head) {
  check_gate(net, gate);
  if (batch.rank() < 2) throw DimensionError(0, "batch must have a sample axis");
  if (Shape(batch.shape().begin() + 1, batch.shape().end()) != net.input_shape()) {
    throw DimensionError(0, "batch sample shape " +
                                shape_to_string(Shape(batch.shape().begin() + 1, batch.shape().end())) +
                                " does not match network input " + shape_to_string(net.input_shape()));
  }
  const auto& layers = net.layers();
  const auto owner = trainable_owner(layers);
  Trace tr;
  tr.layers.resize(layers.size());
  Act prev;
  prev.t = batch;
  bool raw = true;
  std::size_t rank = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& spec = layers[i];
    LayerTrace& lt = tr.layers[i];
    prepare_input(spec, i, prev, raw, lt);
    const auto g = gate.layer(owner[i]);
    if (spec.kind == LayerKind::dense) {
      dense_forward(lt.input, net.weights()[rank], spec.out_filters, g, lt.pre);
    } else if (spec.kind == LayerKind::conv2d) {
      conv_forward(lt.input, net.weights()[rank], spec.out_filters, spec.kernel, g, lt.pre);
    } else {
      normalize_forward(lt.input, g, lt.pre, lt.inv_std);
    }
    if (spec.trainable()) ++rank;
    lt.out = lt.pre;
    const std::size_t p = lt.out.plane();
    for (std::size_t s = 0; s < lt.out.n(); ++s) {
      for (std::size_t f = 0; f < lt.out.filters; ++f) {
        double* v = &lt.out.t[(s * lt.out.filters + f) * p];
        if (!g[f]) {
          for (std::size_t q = 0; q < p; ++q) v[q] = 0.0;
        } else {
          for (std::size_t q = 0; q < p; ++q) v[q] = activate(spec.activation, v[q]);
        }
      }
    }
    prev = lt.out;
    raw = false;
  }
  if (layers.empty()) {
    tr.features = flatten_input(batch).t;
  } else {
    tr.features = prev.spatial ? pool(prev).t : prev.t;
  }
  if (head != nullptr) {
    const Tensor& hw = head->weights;
    const std::size_t n = tr.features.rows();
    const std::size_t width = tr.features.row_size();
    const std::size_t classes = hw.rows();
    if (hw.row_size() != width) {
      throw DimensionError(layers.size(), "head expects " + std::to_string(hw.row_size()) +
                                              " features, got " + std::to_string(width));
    }
    tr.logits = Tensor({n, classes});
    for (std::size_t s = 0; s < n; ++s) {
      const double* x = &tr.features[s * width];
      for (std::size_t c = 0; c < classes; ++c) {
        const double* wr = &hw[c * width];
        double acc = 0.0;
        for (std::size_t j = 0; j < width; ++j) acc += wr[j] * x[j];
        tr.logits[s * classes + c] = acc;
      }
    }
  }
  return tr;
}

std::vector<Tensor> block_capture(const NetworkState& net, const Trace& tr) {
  const auto& layers = net.layers();
  std::vector<Tensor> cap;
  cap.reserve(net.trainable_count());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool block_end = i + 1 == layers.size() || layers[i + 1].trainable();
    if (!block_end) continue;
    const Act& out = tr.layers[i].out;
    cap.push_back(out.spatial ? pool(out).t : out.t);
  }
  return cap;
}

// Loss value and d(loss)/d(logits), averaged over the batch.
double loss_and_grad(const Tensor& logits, std::span<const int> labels, LossKind kind,
                     Tensor* dlogits, std::vector<double>* sample_losses) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.row_size();
  if (labels.size() != n) throw DimensionError(0, "label count does not match batch size");
  if (dlogits) *dlogits = Tensor({n, c});
  if (sample_losses) sample_losses->assign(n, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = &logits[s * c];
    const auto y = static_cast<std::size_t>(labels[s]);
    if (y >= c) throw ParameterError("label " + std::to_string(labels[s]) + " outside head range");
    double ls = 0.0;
    if (kind == LossKind::cross_entropy) {
      const double zmax = *std::max_element(z, z + c);
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - zmax);
      const double lse = zmax + std::log(sum);
      ls = lse - z[y];
      if (dlogits) {
        for (std::size_t j = 0; j < c; ++j) {
          const double pj = std::exp(z[j] - lse);
          (*dlogits)[s * c + j] = (pj - (j == y ? 1.0 : 0.0)) * inv_n;
        }
      }
    } else {
      for (std::size_t j = 0; j < c; ++j) {
        const double d = z[j] - (j == y ? 1.0 : 0.0);
        ls += 0.5 * d * d;
        if (dlogits) (*dlogits)[s * c + j] = d * inv_n;
      }
    }
    if (sample_losses) (*sample_losses)[s] = ls;
    total += ls;
  }
  return total * inv_n;
}

void backward(const NetworkState& net, const Trace& tr, const FilterMask& gate,
              const Head& head, const Tensor& dlogits, Gradients& g) {
  const auto& layers = net.layers();
  const auto owner = trainable_owner(layers);
  const std::size_t n = tr.features.rows();
  const std::size_t width = tr.features.row_size();
  const std::size_t classes = head.weights.rows();

  g.head = Tensor(head.weights.shape());
  Tensor dfeat({n, width});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double d = dlogits[s * classes + c];
      if (d == 0.0) continue;
      for (std::size_t j = 0; j < width; ++j) {
        g.head[c * width + j] += d * tr.features[s * width + j];
        dfeat[s * width + j] += d * head.weights[c * width + j];
      }
    }
  }
  g.weights.clear();
  for (const auto& w : net.weights()) g.weights.emplace_back(w.shape());
  if (layers.empty()) return;

  // Gradient w.r.t. the last layer output.
  Tensor dout;
  {
    const Act& last = tr.layers.back().out;
    if (last.spatial) {
      dout = Tensor(last.t.shape());
      const std::size_t p = last.plane();
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t f = 0; f < last.filters; ++f) {
          const double d = dfeat[s * last.filters + f] / static_cast<double>(p);
          for (std::size_t q = 0; q < p; ++q) dout[(s * last.filters + f) * p + q] = d;
        }
      }
    } else {
      dout = dfeat;
    }
  }

  std::size_t rank = net.trainable_count();
  for (std::size_t ii = layers.size(); ii-- > 0;) {
    const LayerSpec& spec = layers[ii];
    const LayerTrace& lt = tr.layers[ii];
    const auto gbits = gate.layer(owner[ii]);
    const std::size_t f_out = lt.out.filters;
    const std::size_t p_out = lt.out.plane();
    Tensor dz(lt.pre.t.shape());
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t f = 0; f < f_out; ++f) {
        if (!gbits[f]) continue;
        for (std::size_t q = 0; q < p_out; ++q) {
          const std::size_t idx = (s * f_out + f) * p_out + q;
          dz[idx] = dout[idx] * activate_grad(spec.activation, lt.pre.t[idx]);
        }
      }
    }
    const bool need_input_grad = ii > 0;
    Tensor din(lt.input.t.shape());
    const std::size_t f_in = lt.input.filters;
    if (spec.kind == LayerKind::dense) {
      --rank;
      const Tensor& w = net.weights()[rank];
      Tensor& dw = g.weights[rank];
      for (std::size_t s = 0; s < n; ++s) {
        const double* x = &lt.input.t[s * f_in];
        for (std::size_t o = 0; o < f_out; ++o) {
          const double d = dz[s * f_out + o];
          if (d == 0.0) continue;
          double* dwr = &dw[o * f_in];
          const double* wr = &w[o * f_in];
          for (std::size_t c = 0; c < f_in; ++c) dwr[c] += d * x[c];
          if (need_input_grad) {
            double* dx = &din[s * f_in];
            for (std::size_t c = 0; c < f_in; ++c) dx[c] += d * wr[c];
          }
        }
      }
    } else if (spec.kind == LayerKind::conv2d) {
      --rank;
      const Tensor& w = net.weights()[rank];
      Tensor& dw = g.weights[rank];
      const std::size_t k = spec.kernel;
      const std::size_t ih = lt.input.h;
      const std::size_t iw = lt.input.w;
      const std::size_t oh = lt.out.h;
      const std::size_t ow = lt.out.w;
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t o = 0; o < f_out; ++o) {
          if (!gbits[o]) continue;
          const double* dzo = &dz[(s * f_out + o) * oh * ow];
          for (std::size_t c = 0; c < f_in; ++c) {
            const double* src = &lt.input.t[(s * f_in + c) * ih * iw];
            double* dsrc = &din[(s * f_in + c) * ih * iw];
            const double* wk = &w[(o * f_in + c) * k * k];
            double* dwk = &dw[(o * f_in + c) * k * k];
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t x = 0; x < ow; ++x) {
                const double d = dzo[y * ow + x];
                if (d == 0.0) continue;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    dwk[ky * k + kx] += d * src[(y + ky) * iw + x + kx];
                    if (need_input_grad) dsrc[(y + ky) * iw + x + kx] += d * wk[ky * k + kx];
                  }
                }
              }
            }
          }
        }
      }
    } else {
      // dx = inv_std / m * (m*dy - sum(dy) - xhat * sum(dy * xhat))
      const std::size_t p = p_out;
      const double m = static_cast<double>(n * p);
      for (std::size_t f = 0; f < f_out; ++f) {
        if (!gbits[f]) continue;
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t q = 0; q < p; ++q) {
            const std::size_t idx = (s * f_out + f) * p + q;
            sum_dy += dz[idx];
            sum_dy_xhat += dz[idx] * lt.pre.t[idx];
          }
        }
        const double is = lt.inv_std[f];
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t q = 0; q < p; ++q) {
            const std::size_t idx = (s * f_out + f) * p + q;
            din[idx] = is / m * (m * dz[idx] - sum_dy - lt.pre.t[idx] * sum_dy_xhat);
          }
        }
      }
    }
    if (!need_input_grad) break;
    if (lt.pooled) {
      const std::size_t p = lt.pool_h * lt.pool_w;
      Tensor expanded({n, f_in, lt.pool_h, lt.pool_w});
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t f = 0; f < f_in; ++f) {
          const double d = din[s * f_in + f] / static_cast<double>(p);
          for (std::size_t q = 0; q < p; ++q) expanded[(s * f_in + f) * p + q] = d;
        }
      }
      dout = std::move(expanded);
    } else {
      dout = std::move(din);
    }
  }
}

void check_trainable(const NetworkState& net, const TrainableMask& trainable) {
  if (trainable.layers.size() != net.trainable_count()) {
    throw DimensionError(trainable.layers.size(), "trainable mask layer count does not match network");
  }
  for (std::size_t l = 0; l < net.trainable_count(); ++l) {
    if (trainable.layers[l].size() != net.weights()[l].size()) {
      throw DimensionError(net.stack_index(l), "trainable mask size does not match weights");
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_initial >= 0.0)) throw ParameterError("lr_initial must be non-negative");
  if (!(lr_floor > 0.0)) throw ParameterError("lr_floor must be positive");
  if (lr_initial > 0.0 && lr_floor > lr_initial) throw ParameterError("lr_floor must not exceed lr_initial");
  if (!(lr_decay_factor > 1.0)) throw ParameterError("lr_decay_factor must be greater than 1");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch, std::size_t epochs) {
  if (cfg.lr_initial == 0.0) return 0.0;
  double lr = cfg.lr_initial;
  if (epoch >= epochs / 2) lr /= cfg.lr_decay_factor;
  if (epoch >= (3 * epochs) / 4) lr /= cfg.lr_decay_factor;
  return std::max(lr, cfg.lr_floor);
}

double init_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

NetworkState::NetworkState(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), seed_(seed) {
  if (input_shape_.empty()) throw DimensionError(0, "input shape must be non-empty");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    if (s.in_filters == 0 || s.out_filters == 0) throw DimensionError(i, "filter counts must be positive");
    if (s.kind == LayerKind::normalize && s.in_filters != s.out_filters) {
      throw DimensionError(i, "normalize layer must preserve the filter count");
    }
    if (s.kind == LayerKind::conv2d && s.kernel < 1) throw DimensionError(i, "kernel must be >= 1");
    if (s.trainable()) trainable_.push_back(i);
  }
  for (std::size_t l = 0; l < trainable_.size(); ++l) {
    const LayerSpec& s = layers_[trainable_[l]];
    Shape ws = s.kind == LayerKind::conv2d ? Shape{s.out_filters, s.in_filters, s.kernel, s.kernel}
                                           : Shape{s.out_filters, s.in_filters};
    Tensor w(ws);
    Rng rng(derive_seed(seed_, {l}));
    const double b = init_bound(s.fan_in());
    for (double& v : w.data()) v = rng.uniform(-b, b);
    weights_.push_back(std::move(w));
  }
  // Shape propagation check with a single zero sample.
  Shape probe_shape{1};
  probe_shape.insert(probe_shape.end(), input_shape_.begin(), input_shape_.end());
  run_forward(*this, Tensor(probe_shape), full_gate(), nullptr);
}

std::vector<std::size_t> NetworkState::filter_widths() const {
  std::vector<std::size_t> w;
  for (auto i : trainable_) w.push_back(layers_[i].out_filters);
  return w;
}

std::size_t NetworkState::feature_width() const {
  if (layers_.empty()) return shape_volume(input_shape_);
  return layers_.back().out_filters;
}

std::span<double> NetworkState::filter_weights(std::size_t l, std::size_t f) {
  const std::size_t fan = trainable_spec(l).fan_in();
  return weights_.at(l).data().subspan(f * fan, fan);
}

std::span<const double> NetworkState::filter_weights(std::size_t l, std::size_t f) const {
  const std::size_t fan = trainable_spec(l).fan_in();
  return weights_.at(l).data().subspan(f * fan, fan);
}

std::span<double> NetworkState::edge_weights(std::size_t l, std::size_t f, std::size_t s) {
  const LayerSpec& spec = trainable_spec(l);
  const std::size_t kk = spec.kind == LayerKind::conv2d ? spec.kernel * spec.kernel : 1;
  return filter_weights(l, f).subspan(s * kk, kk);
}

std::span<const double> NetworkState::edge_weights(std::size_t l, std::size_t f, std::size_t s) const {
  const LayerSpec& spec = trainable_spec(l);
  const std::size_t kk = spec.kind == LayerKind::conv2d ? spec.kernel * spec.kernel : 1;
  return filter_weights(l, f).subspan(s * kk, kk);
}

const Head& NetworkState::head(TaskId task) const {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw MissingHeadError(to_int(task));
  return it->second;
}

Head& NetworkState::head(TaskId task) {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw MissingHeadError(to_int(task));
  return it->second;
}

void NetworkState::add_head(TaskId task, int classes, std::uint64_t seed) {
  if (classes < 1) throw ParameterError("head needs at least one class");
  if (heads_.contains(task)) throw ParameterError("head for task " + to_string(task) + " already exists");
  const std::size_t width = feature_width();
  Tensor w({static_cast<std::size_t>(classes), width});
  Rng rng(seed);
  const double b = init_bound(width);
  for (double& v : w.data()) v = rng.uniform(-b, b);
  heads_.emplace(task, Head{std::move(w), false});
}

void NetworkState::seal_head(TaskId task) { head(task).sealed = true; }

TrainableMask NetworkState::all_trainable() const {
  TrainableMask m;
  for (const auto& w : weights_) m.layers.emplace_back(w.size(), 1);
  m.head = true;
  return m;
}

ForwardResult forward_with_capture(const NetworkState& net, const Tensor& batch,
                                   const FilterMask& gate, TaskId task) {
  const Head& head = net.head(task);
  Trace tr = run_forward(net, batch, gate, &head);
  return {std::move(tr.logits), block_capture(net, tr)};
}

std::vector<Tensor> capture_activations(const NetworkState& net, const Tensor& batch,
                                        const FilterMask& gate) {
  Trace tr = run_forward(net, batch, gate, nullptr);
  return block_capture(net, tr);
}

Gradients compute_gradients(const NetworkState& net, const Tensor& batch,
                            std::span<const int> labels, TaskId task, const FilterMask& gate,
                            LossKind loss) {
  const Head& head = net.head(task);
  Trace tr = run_forward(net, batch, gate, &head);
  Gradients g;
  Tensor dlogits;
  g.loss = loss_and_grad(tr.logits, labels, loss, &dlogits, &g.sample_losses);
  backward(net, tr, gate, head, dlogits, g);
  return g;
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.row_size();
  std::size_t correct = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = &logits[s * c];
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (z[j] > z[best]) best = j;
    }
    if (static_cast<int>(best) == labels[s]) ++correct;
  }
  return correct;
}

}  // namespace

double accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows();
  if (n == 0 || labels.empty()) throw EmptyDatasetError("cannot score an empty dataset");
  if (labels.size() != n) throw DimensionError(0, "label count does not match logits rows");
  return static_cast<double>(count_correct(logits, labels)) / static_cast<double>(n);
}

Tensor task_logits(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                   TaskId task, Split split) {
  const auto rows = data.indices(split);
  if (rows.empty()) throw EmptyDatasetError("dataset '" + data.name + "' has no samples in split");
  const Head& head = net.head(task);
  Batch b = make_batch(data, rows);
  return run_forward(net, b.inputs, gate, &head).logits;
}

double evaluate(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                TaskId task, Split split) {
  const auto rows = data.indices(split);
  if (rows.empty()) throw EmptyDatasetError("dataset '" + data.name + "' has no samples in split");
  std::vector<int> labels;
  labels.reserve(rows.size());
  for (auto r : rows) labels.push_back(data.labels[r]);
  return accuracy_from_logits(task_logits(net, data, gate, task, split), labels);
}

TrainingLog train_task(NetworkState& net, const TaskDataset& data, TaskId task,
                       const TrainableMask& trainable, const FilterMask& gate,
                       const TrainConfig& cfg, Phase phase) {
  cfg.validate();
  check_trainable(net, trainable);
  check_gate(net, gate);
  if (data.train_idx.empty()) throw EmptyDatasetError("dataset '" + data.name + "' has no training samples");
  if (!net.has_head(task)) {
    net.add_head(task, data.class_count, derive_seed(net.seed(), {kHeadTag, static_cast<std::uint64_t>(to_int(task))}));
  }
  if (net.head(task).sealed) throw ParameterError("head of task " + to_string(task) + " is sealed");
  if (static_cast<int>(net.head(task).weights.rows()) != data.class_count) {
    throw DimensionError(net.layers().size(), "head class count does not match dataset");
  }

  const std::size_t epochs = phase == Phase::train ? cfg.epochs_train : cfg.epochs_finetune;
  const std::size_t n = data.train_idx.size();
  TrainingLog log;
  std::vector<std::size_t> order(n);
  std::vector<double> sample_loss(n);
  for (std::size_t e = 0; e < epochs; ++e) {
    const double lr = scheduled_lr(cfg, e, epochs);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(to_int(task)),
                                   static_cast<std::uint64_t>(phase), e}));
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> rows;
      rows.reserve(end - start);
      for (std::size_t j = start; j < end; ++j) rows.push_back(data.train_idx[order[j]]);
      Batch b = make_batch(data, rows);
      const Head& head = net.head(task);
      Trace tr = run_forward(net, b.inputs, gate, &head);
      Gradients g;
      Tensor dlogits;
      g.loss = loss_and_grad(tr.logits, b.labels, LossKind::cross_entropy, &dlogits, &g.sample_losses);
      if (!std::isfinite(g.loss)) throw NumericDivergenceError(e, g.loss);
      correct += count_correct(tr.logits, b.labels);
      for (std::size_t j = start; j < end; ++j) sample_loss[order[j]] = g.sample_losses[j - start];
      if (lr == 0.0) continue;
      backward(net, tr, gate, head, dlogits, g);
      for (std::size_t l = 0; l < net.trainable_count(); ++l) {
        auto w = net.weights()[l].data();
        const auto gw = g.weights[l].data();
        const auto& bits = trainable.layers[l];
        for (std::size_t i = 0; i < w.size(); ++i) {
          if (bits[i]) w[i] -= lr * gw[i];
        }
      }
      if (trainable.head) {
        auto hw = net.head(task).weights.data();
        const auto gh = g.head.data();
        for (std::size_t i = 0; i < hw.size(); ++i) hw[i] -= lr * gh[i];
      }
    }
    double total = 0.0;
    for (double v : sample_loss) total += v;
    const double loss = total / static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericDivergenceError(e, loss);
    log.epochs.push_back({loss, static_cast<double>(correct) / static_cast<double>(n), lr});
  }
  return log;
}

GradCheckResult grad_check(const NetworkState& net, const Tensor& batch, std::span<const int> labels,
                           TaskId task, const GradCheckOptions& options) {
  const FilterMask gate = options.gate ? *options.gate : net.full_gate();
  const TrainableMask trainable = options.trainable ? *options.trainable : net.all_trainable();
  check_trainable(net, trainable);
  GradCheckResult result;
  result.analytic = compute_gradients(net, batch, labels, task, gate, options.loss);
  for (std::size_t l = 0; l < net.trainable_count(); ++l) {
    auto gw = result.analytic.weights[l].data();
    for (std::size_t i = 0; i < gw.size(); ++i) {
      if (!trainable.layers[l][i]) gw[i] = 0.0;
    }
  }
  if (!trainable.head) result.analytic.head.fill(0.0);

  NetworkState probe = net;
  const double h = options.step;
  auto loss_at = [&]() {
    Trace tr = run_forward(probe, batch, gate, &probe.head(task));
    return loss_and_grad(tr.logits, labels, options.loss, nullptr, nullptr);
  };
  auto check = [&](double& w, double analytic) {
    const double saved = w;
    w = saved + h;
    const double up = loss_at();
    w = saved - h;
    const double down = loss_at();
    w = saved;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
    result.max_rel_error = std::max(result.max_rel_error, err);
  };
  for (std::size_t l = 0; l < probe.trainable_count(); ++l) {
    auto w = probe.weights()[l].data();
    const auto gw = result.analytic.weights[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (trainable.layers[l][i]) check(w[i], gw[i]);
    }
  }
  if (trainable.head) {
    auto hw = probe.head(task).weights.data();
    const auto gh = result.analytic.head.data();
    for (std::size_t i = 0; i < hw.size(); ++i) check(hw[i], gh[i]);
  }
  return result;
}

double min_relu_margin(const NetworkState& net, const Tensor& batch, const FilterMask& gate) {
  Trace tr = run_forward(net, batch, gate, nullptr);
  const auto& layers = net.layers();
  const auto owner = trainable_owner(layers);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].activation != Activation::relu) continue;
    const auto g = gate.layer(owner[i]);
    const Act& z = tr.layers[i].pre;
    const std::size_t p = z.plane();
    for (std::size_t s = 0; s < z.n(); ++s) {
      for (std::size_t f = 0; f < z.filters; ++f) {
        if (!g[f]) continue;
        for (std::size_t q = 0; q < p; ++q) {
          margin = std::min(margin, std::abs(z.t[(s * z.filters + f) * p + q]));
        }
      }
    }
  }
  return margin;
}

}  // namespace fktlab
