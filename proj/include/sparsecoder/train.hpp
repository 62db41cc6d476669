#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparsecoder/coder.hpp"
#include "sparsecoder/error.hpp"
#include "sparsecoder/shardio.hpp"
#include "sparsecoder/tensor.hpp"

namespace sparsecoder {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;
  std::uint64_t n_steps = 1000;
  std::uint64_t dead_token_window = 1'000'000;
  std::uint64_t seed = 0;
  std::uint64_t log_every = 100;

  void validate() const {
    require(learning_rate > 0.0, "learning_rate must be > 0");
    require(beta1 > 0.0 && beta1 < 1.0, "beta1 must be in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "beta2 must be in (0, 1)");
    require(epsilon > 0.0, "epsilon must be > 0");
    require(batch_size >= 1, "batch_size must be >= 1");
  }
};

// One tensor per trainable parameter; used for gradients and Adam moments.
template <typename T>
struct ParamTensors {
  Matrix<T> encoder;
  Vector<T> encoder_bias;
  Matrix<T> decoder;
  Vector<T> decoder_bias;
  std::optional<Matrix<T>> skip;

  template <typename C>
  static ParamTensors zeros_like(const BasicSparseCoder<C>& c) {
    ParamTensors p;
    p.encoder = Matrix<T>(c.encoder.rows(), c.encoder.cols());
    p.encoder_bias.assign(c.encoder_bias.size(), T{0});
    p.decoder = Matrix<T>(c.decoder.rows(), c.decoder.cols());
    p.decoder_bias.assign(c.decoder_bias.size(), T{0});
    if (c.skip) p.skip = Matrix<T>(c.skip->rows(), c.skip->cols());
    return p;
  }

  template <typename C>
  bool matches(const BasicSparseCoder<C>& c) const {
    return encoder.rows() == c.encoder.rows() && encoder.cols() == c.encoder.cols() &&
           encoder_bias.size() == c.encoder_bias.size() && decoder.rows() == c.decoder.rows() &&
           decoder.cols() == c.decoder.cols() && decoder_bias.size() == c.decoder_bias.size() &&
           skip.has_value() == c.skip.has_value() &&
           (!skip || (skip->rows() == c.skip->rows() && skip->cols() == c.skip->cols()));
  }

  void zero() {
    encoder.fill(T{0});
    std::fill(encoder_bias.begin(), encoder_bias.end(), T{0});
    decoder.fill(T{0});
    std::fill(decoder_bias.begin(), decoder_bias.end(), T{0});
    if (skip) skip->fill(T{0});
  }

  // Visits (name, flat view) pairs in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    f("encoder", encoder.flat());
    f("encoder_bias", std::span<T>(encoder_bias));
    f("decoder", decoder.flat());
    f("decoder_bias", std::span<T>(decoder_bias));
    if (skip) f("skip", skip->flat());
  }
  template <typename F>
  void for_each(F&& f) const {
    f("encoder", encoder.flat());
    f("encoder_bias", std::span<const T>(encoder_bias));
    f("decoder", decoder.flat());
    f("decoder_bias", std::span<const T>(decoder_bias));
    if (skip) f("skip", skip->flat());
  }

  friend bool operator==(const ParamTensors&, const ParamTensors&) = default;
};

template <typename T>
using BasicGradients = ParamTensors<T>;
using Gradients = BasicGradients<float>;

// Same visiting order as ParamTensors::for_each.
template <typename T, typename F>
void for_each_param(BasicSparseCoder<T>& c, F&& f) {
  f("encoder", c.encoder.flat());
  f("encoder_bias", std::span<T>(c.encoder_bias));
  f("decoder", c.decoder.flat());
  f("decoder_bias", std::span<T>(c.decoder_bias));
  if (c.skip) f("skip", c.skip->flat());
}

template <typename T>
struct BasicTrainState {
  ParamTensors<T> m;
  ParamTensors<T> v;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  // Value of tokens_seen right after the latent was last selected; 0 if never.
  std::vector<std::uint64_t> last_fired;
  std::uint64_t seed = 0;

  static BasicTrainState fresh(const BasicSparseCoder<T>& c, std::uint64_t seed = 0) {
    BasicTrainState s;
    s.m = ParamTensors<T>::zeros_like(c);
    s.v = ParamTensors<T>::zeros_like(c);
    s.last_fired.assign(c.n_latents(), 0);
    s.seed = seed;
    return s;
  }

  friend bool operator==(const BasicTrainState&, const BasicTrainState&) = default;
};

using TrainState = BasicTrainState<float>;

// The vector the coder consumes for a row. SAEs reconstruct the target
// activation, so their input is the row's target.
inline std::span<const float> coder_input(Arch arch, const ShardRow& row) {
  return arch == Arch::SAE ? std::span<const float>(row.target) : std::span<const float>(row.input);
}

namespace detail {

template <typename T>
void check_batch(const BasicSparseCoder<T>& c, std::span<const ShardRow> batch) {
  if (batch.empty()) fail("empty batch");
  for (const auto& r : batch) {
    if (coder_input(c.config.arch, r).size() != c.d_in() || r.target.size() != c.d_out()) {
      fail("batch row dimension mismatch");
    }
  }
}

}  // namespace detail

// Mean over the batch of ||f(x) - target||^2 / d_out.
template <typename T>
double loss(const BasicSparseCoder<T>& c, std::span<const ShardRow> batch) {
  detail::check_batch(c, batch);
  double total = 0.0;
  std::vector<T> x(c.d_in());
  for (const auto& r : batch) {
    auto src = coder_input(c.config.arch, r);
    std::copy(src.begin(), src.end(), x.begin());
    const auto y = c.forward(x);
    double se = 0.0;
    for (std::size_t o = 0; o < c.d_out(); ++o) {
      const double d = double(y[o]) - double(r.target[o]);
      se += d * d;
    }
    total += se / double(c.d_out());
  }
  return total / double(batch.size());
}

// Accumulates the MSE gradient of `batch` into `grads` (which must be zeroed by
// the caller) and returns the batch loss. The TopK selection is held fixed, so
// gradient reaches only the selected latents. `on_code` sees each row's code.
template <typename T, typename OnCode>
double accumulate_backward(const BasicSparseCoder<T>& c, std::span<const ShardRow> batch,
                           ParamTensors<T>& grads, OnCode&& on_code) {
  detail::check_batch(c, batch);
  const std::size_t d_in = c.d_in();
  const std::size_t d_out = c.d_out();
  const double scale = 2.0 / (double(d_out) * double(batch.size()));
  std::vector<T> x(d_in);
  std::vector<T> y(d_out);
  std::vector<double> resid(d_out);
  double total = 0.0;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& row = batch[b];
    auto src = coder_input(c.config.arch, row);
    std::copy(src.begin(), src.end(), x.begin());
    const SparseCode<T> code = c.encode(x);
    c.decode_into(code, x, y);
    on_code(b, code);

    double se = 0.0;
    for (std::size_t o = 0; o < d_out; ++o) {
      const double d = double(y[o]) - double(row.target[o]);
      se += d * d;
      resid[o] = scale * d;
    }
    total += se / double(d_out);

    for (std::size_t o = 0; o < d_out; ++o) {
      const double r = resid[o];
      grads.decoder_bias[o] += static_cast<T>(r);
      auto grow = grads.decoder.row(o);
      for (std::size_t s = 0; s < code.size(); ++s) {
        grow[code.indices[s]] += static_cast<T>(r * double(code.values[s]));
      }
      if (c.skip) {
        auto srow = grads.skip->row(o);
        for (std::size_t i = 0; i < d_in; ++i) srow[i] += static_cast<T>(r * double(x[i]));
      }
    }

    for (std::size_t s = 0; s < code.size(); ++s) {
      const std::uint32_t j = code.indices[s];
      double g = 0.0;
      for (std::size_t o = 0; o < d_out; ++o) g += double(c.decoder(o, j)) * resid[o];
      grads.encoder_bias[j] += static_cast<T>(g);
      auto erow = grads.encoder.row(j);
      for (std::size_t i = 0; i < d_in; ++i) erow[i] += static_cast<T>(g * double(x[i]));
    }
  }
  return total / double(batch.size());
}

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  ParamTensors<T> grads;
};

template <typename T>
BackwardResult<T> backward(const BasicSparseCoder<T>& c, std::span<const ShardRow> batch) {
  BackwardResult<T> out;
  out.grads = ParamTensors<T>::zeros_like(c);
  out.loss = accumulate_backward(c, batch, out.grads, [](std::size_t, const SparseCode<T>&) {});
  return out;
}

// Bias-corrected Adam. Rejects non-finite gradients before touching anything.
template <typename T>
void adam_step(BasicSparseCoder<T>& c, BasicTrainState<T>& state, const ParamTensors<T>& grads,
               const TrainConfig& cfg) {
  bool finite = true;
  grads.for_each([&](std::string_view, std::span<const T> g) { finite = finite && all_finite(g); });
  if (!finite) fail("non-finite gradient");
  require(grads.matches(c) && state.m.matches(c) && state.v.matches(c),
          "gradient or moment shapes do not match coder");

  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));

  std::vector<std::span<const T>> g_views;
  std::vector<std::span<T>> m_views;
  std::vector<std::span<T>> v_views;
  grads.for_each([&](std::string_view, std::span<const T> s) { g_views.push_back(s); });
  state.m.for_each([&](std::string_view, std::span<T> s) { m_views.push_back(s); });
  state.v.for_each([&](std::string_view, std::span<T> s) { v_views.push_back(s); });

  std::size_t k = 0;
  for_each_param(c, [&](std::string_view, std::span<T> p) {
    auto g = g_views[k];
    auto m = m_views[k];
    auto v = v_views[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = double(g[i]);
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon);
      p[i] = static_cast<T>(double(p[i]) - update);
    }
    ++k;
  });
  state.step = t;
}

// Latents idle for more than the window. A latent that never fired counts from
// token 0, so nothing is dead before `dead_token_window` tokens have been seen.
template <typename T>
std::vector<std::uint32_t> dead_latents(const BasicTrainState<T>& state, const TrainConfig& cfg) {
  std::vector<std::uint32_t> out;
  for (std::size_t j = 0; j < state.last_fired.size(); ++j) {
    if (state.tokens_seen - state.last_fired[j] > cfg.dead_token_window) {
      out.push_back(static_cast<std::uint32_t>(j));
    }
  }
  return out;
}

struct TrainLogRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::size_t dead = 0;
};

struct TrainCallbacks {
  std::function<void(const TrainLogRecord&)> on_log;
  std::function<void(std::string_view)> on_notice;
};

template <typename T>
struct TrainResult {
  BasicSparseCoder<T> coder;
  BasicTrainState<T> state;
  std::vector<double> loss_curve;  // batch loss before each step's update
};

// Runs cfg.n_steps Adam steps over consecutive batches from `source`, which
// must provide next(ShardRow&) and rewind(). The source wraps around when it
// runs out.
template <typename T, typename Source>
TrainResult<T> train(BasicSparseCoder<T> coder, Source& source, const TrainConfig& cfg,
                     const TrainCallbacks& callbacks = {},
                     std::optional<BasicTrainState<T>> resume = std::nullopt) {
  cfg.validate();
  coder.validate();
  TrainResult<T> res{std::move(coder), {}, {}};
  res.state = resume ? std::move(*resume) : BasicTrainState<T>::fresh(res.coder, cfg.seed);
  auto& state = res.state;
  require(state.last_fired.size() == res.coder.n_latents(), "train state does not match coder");

  std::vector<ShardRow> batch(cfg.batch_size);
  ParamTensors<T> grads = ParamTensors<T>::zeros_like(res.coder);
  std::uint64_t epoch = 0;
  res.loss_curve.reserve(cfg.n_steps);

  for (std::uint64_t s = 0; s < cfg.n_steps; ++s) {
    for (auto& row : batch) {
      if (!source.next(row)) {
        source.rewind();
        ++epoch;
        if (callbacks.on_notice) {
          callbacks.on_notice("dataset exhausted; starting epoch " + std::to_string(epoch + 1));
        }
        if (!source.next(row)) fail("dataset is empty");
      }
    }
    grads.zero();
    const std::uint64_t base = state.tokens_seen;
    const double l = accumulate_backward(res.coder, std::span<const ShardRow>(batch), grads,
                                         [&](std::size_t b, const SparseCode<T>& code) {
                                           for (auto j : code.indices) state.last_fired[j] = base + b + 1;
                                         });
    state.tokens_seen += batch.size();
    adam_step(res.coder, state, grads, cfg);
    res.loss_curve.push_back(l);

    const bool last = s + 1 == cfg.n_steps;
    if (callbacks.on_log && (last || (cfg.log_every > 0 && state.step % cfg.log_every == 0))) {
      callbacks.on_log({state.step, l, dead_latents(state, cfg).size()});
    }
  }
  return res;
}

// Per-coordinate mean of the coder's training target over the first
// `max_rows` rows.
template <typename Source>
std::vector<float> estimate_target_mean(Source& source, std::uint64_t max_rows = 100'000) {
  std::vector<double> acc;
  ShardRow row;
  std::uint64_t n = 0;
  while (n < max_rows && source.next(row)) {
    if (acc.empty()) acc.assign(row.target.size(), 0.0);
    for (std::size_t o = 0; o < acc.size(); ++o) acc[o] += row.target[o];
    ++n;
  }
  source.rewind();
  if (n == 0) fail("zero rows");
  std::vector<float> mean(acc.size());
  for (std::size_t o = 0; o < acc.size(); ++o) mean[o] = static_cast<float>(acc[o] / double(n));
  return mean;
}

}  // namespace sparsecoder
