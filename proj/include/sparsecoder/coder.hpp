#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparsecoder/error.hpp"
#include "sparsecoder/rng.hpp"
#include "sparsecoder/tensor.hpp"

namespace sparsecoder {

enum class Arch : std::uint8_t { SAE, Transcoder, SkipTranscoder };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::SAE: return "sae";
    case Arch::Transcoder: return "transcoder";
    case Arch::SkipTranscoder: return "skip";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s) {
  if (s == "sae") return Arch::SAE;
  if (s == "transcoder" || s == "st") return Arch::Transcoder;
  if (s == "skip" || s == "skip_transcoder" || s == "sst") return Arch::SkipTranscoder;
  fail("unknown arch '" + std::string(s) + "'");
}

struct CoderConfig {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t n_latents = 0;
  std::size_t k = 0;
  Arch arch = Arch::SkipTranscoder;
  std::uint64_t seed = 0;

  void validate() const {
    require(d_in >= 1 && d_out >= 1 && n_latents >= 1, "coder dims must be >= 1");
    require(k >= 1 && k <= n_latents, "k must satisfy 1 <= k <= n_latents");
    require(arch != Arch::SAE || d_in == d_out, "sae requires d_in == d_out");
  }

  friend bool operator==(const CoderConfig&, const CoderConfig&) = default;
};

// Selected latents of one example. Indices are strictly increasing; values are
// the raw pre-activations at those indices.
template <typename T>
struct SparseCode {
  std::vector<std::uint32_t> indices;
  std::vector<T> values;

  std::size_t size() const noexcept { return indices.size(); }
};

// Strict total order used for TopK: larger value first, lower index on ties.
template <typename T>
struct TopKOrder {
  std::span<const T> values;
  bool operator()(std::uint32_t a, std::uint32_t b) const noexcept {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  }
};

// Indices of the k largest entries, returned in increasing index order.
template <typename T>
std::vector<std::uint32_t> top_k_indices(std::span<const T> values, std::size_t k) {
  std::vector<std::uint32_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0u);
  k = std::min(k, idx.size());
  const TopKOrder<T> order{values};
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), order);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// One-hidden-layer sparse coder:
//
//   f(x) = decoder * TopK(encoder * x + encoder_bias) + skip * x + decoder_bias
//
// `skip` is present only for the skip-transcoder architecture. An SAE is the
// same object trained with its input equal to its target.
template <typename T>
struct BasicSparseCoder {
  CoderConfig config;
  Matrix<T> encoder;       // n_latents x d_in
  Vector<T> encoder_bias;  // n_latents
  Matrix<T> decoder;       // d_out x n_latents
  Vector<T> decoder_bias;  // d_out
  std::optional<Matrix<T>> skip;  // d_out x d_in

  // Decoder and skip start at zero and the output bias at the target mean, so
  // the coder computes the constant target_mean before any training.
  static BasicSparseCoder init(const CoderConfig& cfg, std::span<const T> target_mean) {
    cfg.validate();
    require(target_mean.size() == cfg.d_out, "target_mean length must equal d_out");
    BasicSparseCoder c;
    c.config = cfg;
    c.encoder = Matrix<T>(cfg.n_latents, cfg.d_in);
    const double bound = 1.0 / std::sqrt(double(cfg.d_in));
    Rng rng(mix_seed(cfg.seed, 0));
    for (T& w : c.encoder.flat()) w = static_cast<T>(rng.uniform(-bound, bound));
    c.encoder_bias.assign(cfg.n_latents, T{0});
    c.decoder = Matrix<T>(cfg.d_out, cfg.n_latents);
    c.decoder_bias.assign(target_mean.begin(), target_mean.end());
    if (cfg.arch == Arch::SkipTranscoder) c.skip = Matrix<T>(cfg.d_out, cfg.d_in);
    return c;
  }

  std::size_t d_in() const noexcept { return config.d_in; }
  std::size_t d_out() const noexcept { return config.d_out; }
  std::size_t n_latents() const noexcept { return config.n_latents; }
  bool has_skip() const noexcept { return skip.has_value(); }

  // Throws if any tensor disagrees with the config.
  void validate() const {
    config.validate();
    require(encoder.rows() == config.n_latents && encoder.cols() == config.d_in,
            "encoder shape mismatch");
    require(encoder_bias.size() == config.n_latents, "encoder_bias shape mismatch");
    require(decoder.rows() == config.d_out && decoder.cols() == config.n_latents,
            "decoder shape mismatch");
    require(decoder_bias.size() == config.d_out, "decoder_bias shape mismatch");
    require(has_skip() == (config.arch == Arch::SkipTranscoder),
            "skip tensor present iff arch is skip");
    if (skip) {
      require(skip->rows() == config.d_out && skip->cols() == config.d_in, "skip shape mismatch");
    }
  }

  void preactivations(std::span<const T> x, std::span<T> out) const {
    for (std::size_t j = 0; j < config.n_latents; ++j) {
      auto w = encoder.row(j);
      double acc = double(encoder_bias[j]);
      for (std::size_t c = 0; c < config.d_in; ++c) acc += double(w[c]) * double(x[c]);
      out[j] = static_cast<T>(acc);
    }
  }

  SparseCode<T> encode(std::span<const T> x) const {
    require(x.size() == config.d_in, "input length must equal d_in");
    require(all_finite(x), "non-finite input");
    std::vector<T> pre(config.n_latents);
    preactivations(x, pre);
    SparseCode<T> code;
    code.indices = top_k_indices<T>(pre, config.k);
    code.values.reserve(code.indices.size());
    for (auto j : code.indices) code.values.push_back(pre[j]);
    return code;
  }

  void decode_into(const SparseCode<T>& code, std::span<const T> x, std::span<T> out) const {
    require(out.size() == config.d_out, "output length must equal d_out");
    require(code.indices.size() == code.values.size(), "code indices/values length mismatch");
    for (auto j : code.indices) require(j < config.n_latents, "code index out of range");
    if (skip) require(x.size() == config.d_in, "input length must equal d_in");
    for (std::size_t o = 0; o < config.d_out; ++o) {
      double acc = double(decoder_bias[o]);
      auto drow = decoder.row(o);
      for (std::size_t s = 0; s < code.indices.size(); ++s) {
        acc += double(drow[code.indices[s]]) * double(code.values[s]);
      }
      if (skip) {
        auto srow = skip->row(o);
        for (std::size_t c = 0; c < config.d_in; ++c) acc += double(srow[c]) * double(x[c]);
      }
      out[o] = static_cast<T>(acc);
    }
  }

  Vector<T> decode(const SparseCode<T>& code, std::span<const T> x) const {
    Vector<T> out(config.d_out);
    decode_into(code, x, out);
    return out;
  }

  Vector<T> forward(std::span<const T> x) const { return decode(encode(x), x); }

  template <typename U>
  BasicSparseCoder<U> cast() const {
    BasicSparseCoder<U> c;
    c.config = config;
    c.encoder = encoder.template cast<U>();
    c.encoder_bias = cast_vector<U, T>(encoder_bias);
    c.decoder = decoder.template cast<U>();
    c.decoder_bias = cast_vector<U, T>(decoder_bias);
    if (skip) c.skip = skip->template cast<U>();
    return c;
  }

  friend bool operator==(const BasicSparseCoder&, const BasicSparseCoder&) = default;
};

using SparseCoder = BasicSparseCoder<float>;

// Turns a skip transcoder trained on an MLP (x -> mlp(x)) into one that
// approximates the residual update (x -> x + mlp(x)) by adding the identity to
// the skip matrix. Returns a modified copy.
template <typename T>
BasicSparseCoder<T> convert_to_residual(const BasicSparseCoder<T>& coder) {
  if (coder.config.arch != Arch::SkipTranscoder || !coder.skip) {
    fail("convert requires skip architecture");
  }
  require(coder.config.d_in == coder.config.d_out, "convert requires d_in == d_out");
  BasicSparseCoder<T> out = coder;
  for (std::size_t i = 0; i < out.config.d_in; ++i) (*out.skip)(i, i) += T{1};
  return out;
}

}  // namespace sparsecoder
