#include "hwids/cnn.hpp"

#include <type_traits>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace hwids::cnn {

namespace {

constexpr double kBnEpsilon = 1e-5;

std::string padding_name(Padding p) { return p == Padding::Same ? "same" : "valid"; }

std::string pool_name(PoolKind k) {
  switch (k) {
    case PoolKind::None: return "none";
    case PoolKind::Max: return "max";
    case PoolKind::Avg: return "avg";
  }
  return "none";
}

struct Geometry {
  int l_in = 0, c_in = 0;
  int l_conv = 0, c_out = 0;
  int kernel = 0, stride = 1, pad_left = 0;
  int l_out = 0;
  PoolKind pool = PoolKind::None;
  int pool_size = 1;
  double dropout = 0.0;
};

struct Layout {
  std::vector<Geometry> blocks;
  int flat = 0;  // features entering the dense head
  int n_classes = 0;
};

Layout compute_layout(const Arch& a, bool allow_empty) {
  if (a.blocks.size() > static_cast<std::size_t>(Arch::kMaxBlocks)) {
    throw ConfigError("architecture has " + std::to_string(a.blocks.size()) + " blocks, maximum is " +
                      std::to_string(Arch::kMaxBlocks));
  }
  if (a.blocks.empty() && !allow_empty) throw ConfigError("architecture needs at least one block");
  if (a.input_len < 1) throw ConfigError("input_len must be >= 1");
  if (a.n_classes < 1) throw ConfigError("n_classes must be >= 1");
  Layout lay;
  lay.n_classes = a.n_classes;
  int length = a.input_len, channels = 1;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    const Block& b = a.blocks[i];
    const std::string where = "block " + std::to_string(i) + ": ";
    if (b.filters < 1 || b.kernel < 1 || b.stride < 1) throw ConfigError(where + "filters, kernel and stride must be >= 1");
    if (!(b.dropout >= 0.0 && b.dropout < 1.0)) throw ConfigError(where + "dropout must lie in [0, 1)");
    if (b.pool != PoolKind::None && b.pool_size < 1) throw ConfigError(where + "pool size must be >= 1");
    Geometry g;
    g.l_in = length;
    g.c_in = channels;
    g.c_out = b.filters;
    g.kernel = b.kernel;
    g.stride = b.stride;
    g.dropout = b.dropout;
    if (b.padding == Padding::Same) {
      g.l_conv = (length + b.stride - 1) / b.stride;
      const int pad_total = std::max((g.l_conv - 1) * b.stride + b.kernel - length, 0);
      g.pad_left = pad_total / 2;
    } else {
      g.l_conv = length >= b.kernel ? (length - b.kernel) / b.stride + 1 : 0;
      g.pad_left = 0;
    }
    if (g.l_conv < 1) {
      throw ConfigError(where + "convolution output length < 1 (input length " + std::to_string(length) +
                        ", kernel " + std::to_string(b.kernel) + ", " + padding_name(b.padding) + ")");
    }
    g.pool = b.pool;
    g.pool_size = b.pool == PoolKind::None ? 1 : b.pool_size;
    g.l_out = g.l_conv / g.pool_size;
    if (g.l_out < 1) throw ConfigError(where + "pooling output length < 1");
    lay.blocks.push_back(g);
    length = g.l_out;
    channels = g.c_out;
  }
  lay.flat = length * channels;
  return lay;
}

// ---------------------------------------------------------------------------
// Compute engine, instantiated for float (training/inference) and double
// (gradient checking).

template <typename T>
struct BlockCache {
  std::vector<T> xhat;     // normalized conv output
  std::vector<T> act;      // after ReLU
  std::vector<T> pooled;   // after pooling (aliases act when no pooling)
  std::vector<int> argmax; // max pooling source index per pooled element
  std::vector<T> mask;     // dropout scale per element (train only)
  std::vector<T> out;      // block output
  std::vector<T> invstd;   // per channel
};

template <typename T>
struct Cache {
  int n = 0;
  std::vector<T> input;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> probs;  // n x classes

  const std::vector<T>& block_input(std::size_t b) const { return b == 0 ? input : blocks[b - 1].out; }
  const std::vector<T>& head_input() const { return blocks.empty() ? input : blocks.back().out; }
};

template <typename T>
void conv_forward(const Geometry& g, const T* w, const T* bias, const T* x, T* z, int n) {
  for (int s = 0; s < n; ++s) {
    for (int co = 0; co < g.c_out; ++co) {
      T* o = z + (static_cast<std::size_t>(s) * g.c_out + co) * g.l_conv;
      std::fill(o, o + g.l_conv, bias[co]);
      for (int ci = 0; ci < g.c_in; ++ci) {
        const T* in = x + (static_cast<std::size_t>(s) * g.c_in + ci) * g.l_in;
        const T* wk = w + (static_cast<std::size_t>(co) * g.c_in + ci) * g.kernel;
        for (int j = 0; j < g.kernel; ++j) {
          const int off = j - g.pad_left;
          const int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
          const int top = g.l_in - 1 - off;
          if (top < 0) continue;
          const int hi = std::min(g.l_conv - 1, top / g.stride);
          const T wj = wk[j];
          for (int l = lo; l <= hi; ++l) o[l] += wj * in[l * g.stride + off];
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const Geometry& g, const T* w, const T* x, const T* dz, T* dw, T* db, T* dx, int n) {
  for (int s = 0; s < n; ++s) {
    for (int co = 0; co < g.c_out; ++co) {
      const T* d = dz + (static_cast<std::size_t>(s) * g.c_out + co) * g.l_conv;
      T sum = 0;
      for (int l = 0; l < g.l_conv; ++l) sum += d[l];
      db[co] += sum;
      for (int ci = 0; ci < g.c_in; ++ci) {
        const T* in = x + (static_cast<std::size_t>(s) * g.c_in + ci) * g.l_in;
        T* din = dx ? dx + (static_cast<std::size_t>(s) * g.c_in + ci) * g.l_in : nullptr;
        const std::size_t widx = (static_cast<std::size_t>(co) * g.c_in + ci) * g.kernel;
        for (int j = 0; j < g.kernel; ++j) {
          const int off = j - g.pad_left;
          const int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
          const int top = g.l_in - 1 - off;
          if (top < 0) continue;
          const int hi = std::min(g.l_conv - 1, top / g.stride);
          T acc = 0;
          const T wj = w[widx + j];
          for (int l = lo; l <= hi; ++l) {
            acc += d[l] * in[l * g.stride + off];
            if (din) din[l * g.stride + off] += wj * d[l];
          }
          dw[widx + j] += acc;
        }
      }
    }
  }
}

/// Runs the network. `running` (optional) receives running-statistic updates
/// in train mode; `dropout_rng` (optional) enables dropout in train mode.
template <typename T>
void forward_impl(const Layout& lay, const Parameters<T>& p, const T* x, int n, Mode mode, Rng* dropout_rng,
                  std::type_identity_t<Parameters<T>>* running, double momentum, Cache<T>& cache) {
  cache.n = n;
  const std::size_t in_len = static_cast<std::size_t>(n) *
                             (lay.blocks.empty() ? static_cast<std::size_t>(lay.flat)
                                                 : static_cast<std::size_t>(lay.blocks[0].l_in));
  cache.input.assign(x, x + in_len);
  cache.blocks.resize(lay.blocks.size());

  for (std::size_t b = 0; b < lay.blocks.size(); ++b) {
    const Geometry& g = lay.blocks[b];
    const auto& bp = p.blocks[b];
    auto& bc = cache.blocks[b];
    const std::size_t per_channel = static_cast<std::size_t>(n) * g.l_conv;
    const std::size_t conv_size = per_channel * g.c_out;

    bc.xhat.assign(conv_size, T(0));
    conv_forward(g, bp.weight.data(), bp.bias.data(), cache.block_input(b).data(), bc.xhat.data(), n);

    // Batch norm (in place on xhat) followed by ReLU into act.
    bc.invstd.assign(static_cast<std::size_t>(g.c_out), T(0));
    bc.act.resize(conv_size);
    for (int c = 0; c < g.c_out; ++c) {
      T mean, var;
      if (mode == Mode::Train) {
        double sum = 0.0, sq = 0.0;
        for (int s = 0; s < n; ++s) {
          const T* z = &bc.xhat[(static_cast<std::size_t>(s) * g.c_out + c) * g.l_conv];
          for (int l = 0; l < g.l_conv; ++l) sum += static_cast<double>(z[l]);
        }
        const double m = sum / static_cast<double>(per_channel);
        for (int s = 0; s < n; ++s) {
          const T* z = &bc.xhat[(static_cast<std::size_t>(s) * g.c_out + c) * g.l_conv];
          for (int l = 0; l < g.l_conv; ++l) {
            const double d = static_cast<double>(z[l]) - m;
            sq += d * d;
          }
        }
        mean = static_cast<T>(m);
        var = static_cast<T>(sq / static_cast<double>(per_channel));
        if (running) {
          auto& rp = running->blocks[b];
          rp.running_mean[c] = static_cast<T>(momentum * rp.running_mean[c] + (1.0 - momentum) * mean);
          rp.running_var[c] = static_cast<T>(momentum * rp.running_var[c] + (1.0 - momentum) * var);
        }
      } else {
        mean = bp.running_mean[c];
        var = bp.running_var[c];
      }
      const T invstd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kBnEpsilon));
      bc.invstd[c] = invstd;
      for (int s = 0; s < n; ++s) {
        const std::size_t base = (static_cast<std::size_t>(s) * g.c_out + c) * g.l_conv;
        for (int l = 0; l < g.l_conv; ++l) {
          T& xh = bc.xhat[base + l];
          xh = (xh - mean) * invstd;
          const T y = bp.gamma[c] * xh + bp.beta[c];
          bc.act[base + l] = y > T(0) ? y : T(0);
        }
      }
    }

    // Pooling.
    const std::size_t out_size = static_cast<std::size_t>(n) * g.c_out * g.l_out;
    if (g.pool == PoolKind::None) {
      bc.pooled = bc.act;
      bc.argmax.clear();
    } else {
      bc.pooled.assign(out_size, T(0));
      if (g.pool == PoolKind::Max) bc.argmax.assign(out_size, 0);
      for (std::size_t row = 0; row < static_cast<std::size_t>(n) * g.c_out; ++row) {
        const T* a = &bc.act[row * g.l_conv];
        T* o = &bc.pooled[row * g.l_out];
        for (int l = 0; l < g.l_out; ++l) {
          const int start = l * g.pool_size;
          if (g.pool == PoolKind::Max) {
            int best = start;
            for (int q = start + 1; q < start + g.pool_size; ++q) {
              if (a[q] > a[best]) best = q;
            }
            o[l] = a[best];
            bc.argmax[row * g.l_out + l] = best;
          } else {
            T sum = 0;
            for (int q = start; q < start + g.pool_size; ++q) sum += a[q];
            o[l] = sum / static_cast<T>(g.pool_size);
          }
        }
      }
    }

    // Inverted dropout.
    if (mode == Mode::Train && dropout_rng && g.dropout > 0.0) {
      const T keep_scale = static_cast<T>(1.0 / (1.0 - g.dropout));
      bc.mask.resize(out_size);
      bc.out.resize(out_size);
      for (std::size_t i = 0; i < out_size; ++i) {
        bc.mask[i] = uniform01(*dropout_rng) < g.dropout ? T(0) : keep_scale;
        bc.out[i] = bc.pooled[i] * bc.mask[i];
      }
    } else {
      bc.mask.clear();
      bc.out = bc.pooled;
    }
  }

  // Dense head + softmax.
  const auto& h = cache.head_input();
  const int k = lay.n_classes;
  cache.probs.assign(static_cast<std::size_t>(n) * k, T(0));
  for (int s = 0; s < n; ++s) {
    const T* xin = &h[static_cast<std::size_t>(s) * lay.flat];
    T* z = &cache.probs[static_cast<std::size_t>(s) * k];
    for (int o = 0; o < k; ++o) {
      const T* w = &p.dense_weight[static_cast<std::size_t>(o) * lay.flat];
      T acc = p.dense_bias[o];
      for (int i = 0; i < lay.flat; ++i) acc += w[i] * xin[i];
      z[o] = acc;
    }
    const T mx = *std::max_element(z, z + k);
    T sum = 0;
    for (int o = 0; o < k; ++o) {
      z[o] = std::exp(z[o] - mx);
      sum += z[o];
    }
    for (int o = 0; o < k; ++o) z[o] /= sum;
  }
}

template <typename T>
double cross_entropy(const Cache<T>& cache, std::span<const int> labels, int k) {
  double loss = 0.0;
  for (int s = 0; s < cache.n; ++s) {
    const double pr = static_cast<double>(cache.probs[static_cast<std::size_t>(s) * k + labels[s]]);
    loss -= std::log(std::max(pr, 1e-30));
  }
  return cache.n ? loss / cache.n : 0.0;
}

template <typename T>
Parameters<T> zeros_like(const Parameters<T>& p) {
  Parameters<T> g;
  g.blocks.resize(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    g.blocks[b].weight.assign(p.blocks[b].weight.size(), T(0));
    g.blocks[b].bias.assign(p.blocks[b].bias.size(), T(0));
    g.blocks[b].gamma.assign(p.blocks[b].gamma.size(), T(0));
    g.blocks[b].beta.assign(p.blocks[b].beta.size(), T(0));
  }
  g.dense_weight.assign(p.dense_weight.size(), T(0));
  g.dense_bias.assign(p.dense_bias.size(), T(0));
  return g;
}

/// Gradients of mean cross-entropy with respect to trainable parameters,
/// for a train-mode forward pass stored in `cache`.
template <typename T>
void backward_impl(const Layout& lay, const Parameters<T>& p, const Cache<T>& cache, std::span<const int> labels,
                   Parameters<T>& grad) {
  const int n = cache.n;
  const int k = lay.n_classes;
  const auto& h = cache.head_input();
  std::vector<T> dlogits(cache.probs);
  for (int s = 0; s < n; ++s) {
    dlogits[static_cast<std::size_t>(s) * k + labels[s]] -= T(1);
  }
  for (auto& v : dlogits) v /= static_cast<T>(n);

  std::vector<T> dx(static_cast<std::size_t>(n) * lay.flat, T(0));
  for (int s = 0; s < n; ++s) {
    const T* xin = &h[static_cast<std::size_t>(s) * lay.flat];
    T* dxs = &dx[static_cast<std::size_t>(s) * lay.flat];
    for (int o = 0; o < k; ++o) {
      const T d = dlogits[static_cast<std::size_t>(s) * k + o];
      grad.dense_bias[o] += d;
      T* gw = &grad.dense_weight[static_cast<std::size_t>(o) * lay.flat];
      const T* w = &p.dense_weight[static_cast<std::size_t>(o) * lay.flat];
      for (int i = 0; i < lay.flat; ++i) {
        gw[i] += d * xin[i];
        dxs[i] += d * w[i];
      }
    }
  }

  for (std::size_t bi = lay.blocks.size(); bi-- > 0;) {
    const Geometry& g = lay.blocks[bi];
    const auto& bp = p.blocks[bi];
    const auto& bc = cache.blocks[bi];
    auto& bg = grad.blocks[bi];

    if (!bc.mask.empty()) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= bc.mask[i];
    }

    const std::size_t conv_size = static_cast<std::size_t>(n) * g.c_out * g.l_conv;
    std::vector<T> dact;
    if (g.pool == PoolKind::None) {
      dact = std::move(dx);
    } else {
      dact.assign(conv_size, T(0));
      for (std::size_t row = 0; row < static_cast<std::size_t>(n) * g.c_out; ++row) {
        for (int l = 0; l < g.l_out; ++l) {
          const T d = dx[row * g.l_out + l];
          if (g.pool == PoolKind::Max) {
            dact[row * g.l_conv + bc.argmax[row * g.l_out + l]] += d;
          } else {
            const T share = d / static_cast<T>(g.pool_size);
            for (int q = l * g.pool_size; q < (l + 1) * g.pool_size; ++q) dact[row * g.l_conv + q] += share;
          }
        }
      }
    }

    // ReLU + batch norm (batch statistics).
    const double m = static_cast<double>(n) * g.l_conv;
    std::vector<T> dz(conv_size);
    for (int c = 0; c < g.c_out; ++c) {
      double dbeta = 0.0, dgamma = 0.0;
      for (int s = 0; s < n; ++s) {
        const std::size_t base = (static_cast<std::size_t>(s) * g.c_out + c) * g.l_conv;
        for (int l = 0; l < g.l_conv; ++l) {
          const T dy = bc.act[base + l] > T(0) ? dact[base + l] : T(0);
          dact[base + l] = dy;
          dbeta += static_cast<double>(dy);
          dgamma += static_cast<double>(dy) * static_cast<double>(bc.xhat[base + l]);
        }
      }
      bg.beta[c] += static_cast<T>(dbeta);
      bg.gamma[c] += static_cast<T>(dgamma);
      const double scale = static_cast<double>(bp.gamma[c]) * static_cast<double>(bc.invstd[c]) / m;
      for (int s = 0; s < n; ++s) {
        const std::size_t base = (static_cast<std::size_t>(s) * g.c_out + c) * g.l_conv;
        for (int l = 0; l < g.l_conv; ++l) {
          dz[base + l] = static_cast<T>(
              scale * (m * static_cast<double>(dact[base + l]) - dbeta - static_cast<double>(bc.xhat[base + l]) * dgamma));
        }
      }
    }

    std::vector<T> din(bi > 0 ? static_cast<std::size_t>(n) * g.c_in * g.l_in : 0, T(0));
    conv_backward(g, bp.weight.data(), cache.block_input(bi).data(), dz.data(), bg.weight.data(), bg.bias.data(),
                  bi > 0 ? din.data() : nullptr, n);
    dx = std::move(din);
  }
}

template <typename T>
std::vector<std::vector<T>*> trainable(Parameters<T>& p) {
  std::vector<std::vector<T>*> out;
  for (auto& b : p.blocks) {
    out.push_back(&b.weight);
    out.push_back(&b.bias);
    out.push_back(&b.gamma);
    out.push_back(&b.beta);
  }
  out.push_back(&p.dense_weight);
  out.push_back(&p.dense_bias);
  return out;
}

template <typename To, typename From>
Parameters<To> convert(const Parameters<From>& p) {
  auto cv = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
  Parameters<To> out;
  for (const auto& b : p.blocks) {
    out.blocks.push_back({cv(b.weight), cv(b.bias), cv(b.gamma), cv(b.beta), cv(b.running_mean), cv(b.running_var)});
  }
  out.dense_weight = cv(p.dense_weight);
  out.dense_bias = cv(p.dense_bias);
  return out;
}

template <typename T>
Parameters<T> init_parameters(const Layout& lay, std::uint64_t seed) {
  Rng rng(seed);
  auto he_uniform = [&rng](std::size_t count, int fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> w(count);
    for (auto& v : w) v = static_cast<T>(uniform_real(rng, -limit, limit));
    return w;
  };
  Parameters<T> p;
  for (const auto& g : lay.blocks) {
    typename Parameters<T>::BlockParams b;
    const auto c_out = static_cast<std::size_t>(g.c_out);
    b.weight = he_uniform(c_out * g.c_in * g.kernel, g.c_in * g.kernel);
    b.bias.assign(c_out, T(0));
    b.gamma.assign(c_out, T(1));
    b.beta.assign(c_out, T(0));
    b.running_mean.assign(c_out, T(0));
    b.running_var.assign(c_out, T(1));
    p.blocks.push_back(std::move(b));
  }
  p.dense_weight = he_uniform(static_cast<std::size_t>(lay.n_classes) * lay.flat, lay.flat);
  p.dense_bias.assign(static_cast<std::size_t>(lay.n_classes), T(0));
  return p;
}

void check_batch(const Arch& arch, std::size_t width) {
  if (width != static_cast<std::size_t>(arch.input_len)) {
    throw ShapeError("model expects " + std::to_string(arch.input_len) + " features, got " + std::to_string(width));
  }
}

struct Adam {
  std::vector<std::vector<float>> m, v;
  long step = 0;

  explicit Adam(Parameters<float>& p) {
    for (auto* vec : trainable(p)) {
      m.emplace_back(vec->size(), 0.0f);
      v.emplace_back(vec->size(), 0.0f);
    }
  }

  void update(Parameters<float>& p, Parameters<float>& g, const TrainConfig& cfg, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    const auto b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
    const auto step_size = static_cast<float>(lr * std::sqrt(c2) / c1);
    const auto eps = static_cast<float>(cfg.adam_epsilon * std::sqrt(c2));
    auto params = trainable(p);
    auto grads = trainable(g);
    for (std::size_t t = 0; t < params.size(); ++t) {
      auto& w = *params[t];
      const auto& d = *grads[t];
      auto& mt = m[t];
      auto& vt = v[t];
      for (std::size_t i = 0; i < w.size(); ++i) {
        mt[i] = b1 * mt[i] + (1.0f - b1) * d[i];
        vt[i] = b2 * vt[i] + (1.0f - b2) * d[i] * d[i];
        w[i] -= step_size * mt[i] / (std::sqrt(vt[i]) + eps);
      }
    }
  }
};

std::vector<float> to_float_rows(const Matrix& m) { return std::vector<float>(m.data.begin(), m.data.end()); }

// Mean loss and accuracy in inference mode, evaluated in chunks.
std::pair<double, double> infer_loss_accuracy(const Layout& lay, const Parameters<float>& p,
                                              const std::vector<float>& x, std::span<const int> labels, int width) {
  const int n = static_cast<int>(labels.size());
  if (n == 0) return {0.0, 0.0};
  constexpr int kChunk = 1024;
  Cache<float> cache;
  double loss = 0.0;
  std::size_t correct = 0;
  for (int start = 0; start < n; start += kChunk) {
    const int count = std::min(kChunk, n - start);
    forward_impl(lay, p, &x[static_cast<std::size_t>(start) * width], count, Mode::Infer, nullptr, nullptr, 0.0, cache);
    loss += cross_entropy(cache, labels.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(count)),
                          lay.n_classes) *
            count;
    for (int s = 0; s < count; ++s) {
      const float* pr = &cache.probs[static_cast<std::size_t>(s) * lay.n_classes];
      const auto pred = std::max_element(pr, pr + lay.n_classes) - pr;
      if (pred == labels[static_cast<std::size_t>(start + s)]) ++correct;
    }
  }
  return {loss / n, static_cast<double>(correct) / n};
}

// Signature of every piecewise-linear decision (ReLU sign, max-pool choice).
template <typename T>
std::vector<int> kink_signature(const Cache<T>& cache) {
  std::vector<int> sig;
  for (const auto& b : cache.blocks) {
    for (T a : b.act) sig.push_back(a > T(0) ? 1 : 0);
    sig.insert(sig.end(), b.argmax.begin(), b.argmax.end());
  }
  return sig;
}

}  // namespace

void to_json(nlohmann::json& j, const Block& b) {
  j = nlohmann::json{{"filters", b.filters},
                     {"kernel", b.kernel},
                     {"stride", b.stride},
                     {"padding", padding_name(b.padding)},
                     {"dropout", b.dropout},
                     {"pool", pool_name(b.pool)}};
  if (b.pool != PoolKind::None) j["pool_size"] = b.pool_size;
}

void from_json(const nlohmann::json& j, Block& b) {
  b = Block{};
  j.at("filters").get_to(b.filters);
  j.at("kernel").get_to(b.kernel);
  b.stride = j.value("stride", 1);
  const auto pad = j.value("padding", std::string("same"));
  if (pad == "same") {
    b.padding = Padding::Same;
  } else if (pad == "valid") {
    b.padding = Padding::Valid;
  } else {
    throw ConfigError("unknown padding '" + pad + "'");
  }
  b.dropout = j.value("dropout", 0.0);
  const auto pool = j.value("pool", std::string("none"));
  if (pool == "none") {
    b.pool = PoolKind::None;
  } else if (pool == "max") {
    b.pool = PoolKind::Max;
  } else if (pool == "avg") {
    b.pool = PoolKind::Avg;
  } else {
    throw ConfigError("unknown pooling '" + pool + "'");
  }
  b.pool_size = j.value("pool_size", 2);
}

void to_json(nlohmann::json& j, const Arch& a) {
  j = nlohmann::json{{"input_len", a.input_len}, {"n_classes", a.n_classes}, {"blocks", a.blocks}};
}

void from_json(const nlohmann::json& j, Arch& a) {
  j.at("input_len").get_to(a.input_len);
  j.at("n_classes").get_to(a.n_classes);
  j.at("blocks").get_to(a.blocks);
}

std::vector<LayerShape> shape_trace(const Arch& arch) {
  const Layout lay = compute_layout(arch, false);
  std::vector<LayerShape> out;
  out.push_back({"input", -1, arch.input_len, 1});
  for (std::size_t b = 0; b < lay.blocks.size(); ++b) {
    const auto& g = lay.blocks[b];
    out.push_back({"conv", static_cast<int>(b), g.l_conv, g.c_out});
    if (g.pool != PoolKind::None) out.push_back({"pool", static_cast<int>(b), g.l_out, g.c_out});
  }
  out.push_back({"dense", -1, 1, arch.n_classes});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = params.dense_weight.size() + params.dense_bias.size();
  for (const auto& b : params.blocks) {
    n += b.weight.size() + b.bias.size() + b.gamma.size() + b.beta.size() + b.running_mean.size() +
         b.running_var.size();
  }
  return n;
}

std::vector<float> Model::flatten() const {
  std::vector<float> flat;
  flat.reserve(parameter_count());
  auto put = [&flat](const std::vector<float>& v) { flat.insert(flat.end(), v.begin(), v.end()); };
  for (const auto& b : params.blocks) {
    put(b.weight);
    put(b.bias);
    put(b.gamma);
    put(b.beta);
    put(b.running_mean);
    put(b.running_var);
  }
  put(params.dense_weight);
  put(params.dense_bias);
  return flat;
}

void Model::unflatten(std::span<const float> flat) {
  params = init_parameters<float>(compute_layout(arch, false), 0);
  if (flat.size() != parameter_count()) {
    throw ShapeError("parameter vector has " + std::to_string(flat.size()) + " values, architecture needs " +
                     std::to_string(parameter_count()));
  }
  std::size_t pos = 0;
  auto take = [&](std::vector<float>& v) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), v.size(), v.begin());
    pos += v.size();
  };
  for (auto& b : params.blocks) {
    take(b.weight);
    take(b.bias);
    take(b.gamma);
    take(b.beta);
    take(b.running_mean);
    take(b.running_var);
  }
  take(params.dense_weight);
  take(params.dense_bias);
}

Model init_model(const Arch& arch, std::uint64_t seed) {
  return Model{arch, init_parameters<float>(compute_layout(arch, false), seed)};
}

Matrix forward(const Model& model, const Matrix& batch, Mode mode, std::uint64_t dropout_seed) {
  check_batch(model.arch, batch.cols);
  const Layout lay = compute_layout(model.arch, false);
  const auto x = to_float_rows(batch);
  Cache<float> cache;
  Matrix out(batch.rows, static_cast<std::size_t>(model.arch.n_classes));
  if (mode == Mode::Train) {
    // Batch statistics couple all rows, so train mode runs as one batch.
    Rng rng(dropout_seed);
    forward_impl(lay, model.params, x.data(), static_cast<int>(batch.rows), mode, &rng, nullptr, 0.0, cache);
    std::copy(cache.probs.begin(), cache.probs.end(), out.data.begin());
    return out;
  }
  constexpr std::size_t kChunk = 1024;
  const auto width = batch.cols;
  for (std::size_t start = 0; start < batch.rows; start += kChunk) {
    const std::size_t count = std::min(kChunk, batch.rows - start);
    forward_impl(lay, model.params, x.data() + start * width, static_cast<int>(count), mode, nullptr, nullptr, 0.0,
                 cache);
    std::copy(cache.probs.begin(), cache.probs.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * out.cols));
  }
  return out;
}

std::vector<double> predict_proba(const Model& model, std::span<const double> x) {
  Matrix m(1, x.size());
  std::copy(x.begin(), x.end(), m.data.begin());
  return forward(model, m, Mode::Infer).data;
}

void TrainConfig::validate() const {
  if (max_epochs < 1 || batch_size < 1) throw ConfigError("max_epochs and batch_size must be positive");
  if (!(initial_lr > 0.0) || !(min_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(plateau_decay_factor > 0.0 && plateau_decay_factor < 1.0)) throw ConfigError("plateau_decay_factor must lie in (0, 1)");
  if (plateau_patience < 1 || early_stop_patience < 1) throw ConfigError("patience values must be >= 1");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"max_epochs", c.max_epochs},
                     {"initial_lr", c.initial_lr},
                     {"batch_size", c.batch_size},
                     {"plateau_decay_factor", c.plateau_decay_factor},
                     {"plateau_patience", c.plateau_patience},
                     {"min_lr", c.min_lr},
                     {"early_stop_patience", c.early_stop_patience},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.initial_lr = j.value("initial_lr", c.initial_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.plateau_decay_factor = j.value("plateau_decay_factor", c.plateau_decay_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.seed = j.value("seed", c.seed);
}

PlateauSchedule::PlateauSchedule(const TrainConfig& cfg)
    : cfg_(cfg), lr_(cfg.initial_lr), best_(std::numeric_limits<double>::infinity()) {}

PlateauSchedule::Step PlateauSchedule::observe(double val_loss) {
  ++epoch_;
  Step step;
  if (val_loss < best_ - cfg_.min_improvement) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    plateau_wait_ = 0;
    step.improved = true;
    return step;
  }
  if (++plateau_wait_ >= cfg_.plateau_patience) {
    const double next = std::max(lr_ * cfg_.plateau_decay_factor, cfg_.min_lr);
    step.lr_reduced = next < lr_;
    lr_ = next;
    plateau_wait_ = 0;
  }
  step.stop = epoch_ - best_epoch_ >= cfg_.early_stop_patience;
  return step;
}

std::pair<Model, History> train(Model model, const dataio::Dataset& train_set, const dataio::Dataset& val,
                                const TrainConfig& cfg) {
  cfg.validate();
  const Layout lay = compute_layout(model.arch, false);
  check_batch(model.arch, train_set.dim());
  if (val.rows() > 0) check_batch(model.arch, val.dim());
  if (train_set.rows() == 0) throw DataError("training set is empty");
  for (const auto* d : {&train_set, &val}) {
    for (int y : d->labels) {
      if (y < 0 || y >= model.arch.n_classes) throw DataError("label outside the model's class range");
    }
  }

  const int width = model.arch.input_len;
  const auto x_train = to_float_rows(train_set.features);
  const auto x_val = to_float_rows(val.features);
  const int n = static_cast<int>(train_set.rows());

  Rng rng(cfg.seed);
  Adam adam(model.params);
  PlateauSchedule schedule(cfg);
  History history;
  Model best = model;
  Cache<float> cache;
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> batch;
  std::vector<int> batch_labels;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = schedule.lr();
    shuffle(std::span(order), rng);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      batch.resize(static_cast<std::size_t>(count) * width);
      batch_labels.resize(static_cast<std::size_t>(count));
      for (int s = 0; s < count; ++s) {
        const std::size_t r = order[static_cast<std::size_t>(start + s)];
        std::copy_n(&x_train[r * width], width, &batch[static_cast<std::size_t>(s) * width]);
        batch_labels[static_cast<std::size_t>(s)] = train_set.labels[r];
      }
      forward_impl(lay, model.params, batch.data(), count, Mode::Train, &rng, &model.params, cfg.bn_momentum, cache);
      const double loss = cross_entropy(cache, batch_labels, lay.n_classes);
      if (!std::isfinite(loss)) throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch), epoch);
      loss_sum += loss * count;
      auto grad = zeros_like(model.params);
      backward_impl(lay, model.params, cache, batch_labels, grad);
      adam.update(model.params, grad, cfg, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / n;
    if (val.rows() > 0) {
      std::tie(rec.val_loss, rec.val_accuracy) = infer_loss_accuracy(lay, model.params, x_val, val.labels, width);
    } else {
      rec.val_loss = rec.train_loss;
    }
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch), epoch);
    }
    history.epochs.push_back(rec);
    const auto step = schedule.observe(rec.val_loss);
    if (step.improved) best = model;
    if (step.stop) {
      history.early_stopped = true;
      break;
    }
  }
  history.best_epoch = schedule.best_epoch();
  return {std::move(best), std::move(history)};
}

GradCheckResult gradient_check(const Arch& arch, std::uint64_t seed, double eps, int rows) {
  if (rows < 1 || rows > 8) throw ConfigError("gradient_check uses between 1 and 8 rows");
  const Layout lay = compute_layout(arch, true);
  auto params = convert<double>(init_parameters<float>(lay, seed));
  // Non-trivial BN affine parameters so their gradients are exercised.
  Rng rng(derive_seed(seed, {1}));
  for (auto& b : params.blocks) {
    for (auto& v : b.gamma) v = uniform_real(rng, 0.5, 1.5);
    for (auto& v : b.beta) v = uniform_real(rng, -0.2, 0.2);
  }
  std::vector<double> x(static_cast<std::size_t>(rows) * arch.input_len);
  for (auto& v : x) v = uniform01(rng);
  std::vector<int> labels(static_cast<std::size_t>(rows));
  for (auto& y : labels) y = static_cast<int>(uniform_int(rng, 0, arch.n_classes - 1));

  Cache<double> cache;
  auto loss_at = [&](std::vector<int>* sig) {
    forward_impl(lay, params, x.data(), rows, Mode::Train, nullptr, nullptr, 0.0, cache);
    if (sig) *sig = kink_signature(cache);
    return cross_entropy(cache, labels, arch.n_classes);
  };

  std::vector<int> base_sig;
  loss_at(&base_sig);
  auto grad = zeros_like(params);
  backward_impl(lay, params, cache, labels, grad);

  GradCheckResult result;
  auto values = trainable(params);
  auto grads = trainable(grad);
  std::vector<int> sig_plus, sig_minus;
  for (std::size_t t = 0; t < values.size(); ++t) {
    auto& vec = *values[t];
    for (std::size_t i = 0; i < vec.size(); ++i) {
      const double saved = vec[i];
      vec[i] = saved + eps;
      const double up = loss_at(&sig_plus);
      vec[i] = saved - eps;
      const double down = loss_at(&sig_minus);
      vec[i] = saved;
      if (sig_plus != base_sig || sig_minus != base_sig) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = (*grads[t])[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

EvalReport evaluate(const Model& model, const dataio::Dataset& data) {
  check_batch(model.arch, data.dim());
  const Matrix probs = forward(model, data.features, Mode::Infer);
  std::vector<int> pred(data.rows());
  for (std::size_t r = 0; r < data.rows(); ++r) pred[r] = static_cast<int>(argmax(probs.row(r)));
  return evaluate_predictions(data.labels, pred, model.arch.n_classes);
}

}  // namespace hwids::cnn
