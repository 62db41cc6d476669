#pragma once

// Ground-truth data: planted-dictionary regression sets and a tiny
// next-token model whose MLP block serves as the transcoder target.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "sparsecoder/checkpoint.hpp"
#include "sparsecoder/coder.hpp"
#include "sparsecoder/error.hpp"
#include "sparsecoder/rng.hpp"
#include "sparsecoder/shardio.hpp"
#include "sparsecoder/tensor.hpp"

namespace sparsecoder {

// y = sum_i max(0, detectors_i . x - thresholds_i) * directions_i + linear x + offset
struct PlantedDictionary {
  Matrix<double> detectors;   // n_features x d_in, unit rows
  Vector<double> thresholds;  // n_features
  Matrix<double> directions;  // d_out x n_features, unit columns
  std::optional<Matrix<double>> linear;  // d_out x d_in
  Vector<double> offset;      // d_out
  double feature_prob = 0.0;
  std::uint64_t seed = 0;

  std::size_t n_features() const { return detectors.rows(); }
  std::size_t d_in() const { return detectors.cols(); }
  std::size_t d_out() const { return directions.rows(); }

  void validate() const {
    require(n_features() >= 1, "planted dictionary needs >= 1 feature");
    require(thresholds.size() == n_features(), "thresholds length mismatch");
    require(directions.cols() == n_features(), "directions shape mismatch");
    require(offset.size() == d_out(), "offset length mismatch");
    if (linear) require(linear->rows() == d_out() && linear->cols() == d_in(), "linear shape mismatch");
  }

  // Rectified feature activations for input x.
  Vector<double> feature_activations(std::span<const double> x) const {
    Vector<double> a(n_features());
    for (std::size_t i = 0; i < n_features(); ++i) {
      auto u = detectors.row(i);
      double z = 0.0;
      for (std::size_t c = 0; c < d_in(); ++c) z += u[c] * x[c];
      a[i] = std::max(0.0, z - thresholds[i]);
    }
    return a;
  }

  Vector<double> target(std::span<const double> x) const {
    require(x.size() == d_in(), "input length must equal d_in");
    const auto a = feature_activations(x);
    Vector<double> y(offset);
    for (std::size_t o = 0; o < d_out(); ++o) {
      auto v = directions.row(o);
      for (std::size_t i = 0; i < n_features(); ++i) y[o] += a[i] * v[i];
      if (linear) {
        auto l = linear->row(o);
        for (std::size_t c = 0; c < d_in(); ++c) y[o] += l[c] * x[c];
      }
    }
    return y;
  }
};

struct PlantedOptions {
  std::size_t n_features = 16;
  std::size_t d_in = 32;
  std::size_t d_out = 32;
  // Per-feature firing probability under standard Gaussian input.
  double feature_prob = 0.1;
  // Entries of the linear map are N(0, linear_scale^2 / d_in); 0 disables it.
  double linear_scale = 1.0;
  double offset_scale = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void normalize(std::span<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

}  // namespace detail

inline PlantedDictionary make_planted_dictionary(const PlantedOptions& o) {
  require(o.n_features >= 1 && o.d_in >= 1 && o.d_out >= 1, "planted dims must be >= 1");
  require(o.feature_prob > 0.0 && o.feature_prob < 1.0, "feature_prob must be in (0, 1)");
  Rng rng(mix_seed(o.seed, 1));
  PlantedDictionary d;
  d.seed = o.seed;
  d.feature_prob = o.feature_prob;
  d.detectors = Matrix<double>(o.n_features, o.d_in);
  for (std::size_t i = 0; i < o.n_features; ++i) {
    for (double& v : d.detectors.row(i)) v = rng.normal();
    detail::normalize(d.detectors.row(i));
  }
  // Unit detectors make detectors_i . x standard normal for Gaussian x.
  const boost::math::normal_distribution<double> std_normal;
  d.thresholds.assign(o.n_features, boost::math::quantile(std_normal, 1.0 - o.feature_prob));
  Matrix<double> cols(o.n_features, o.d_out);
  for (std::size_t i = 0; i < o.n_features; ++i) {
    for (double& v : cols.row(i)) v = rng.normal();
    detail::normalize(cols.row(i));
  }
  d.directions = Matrix<double>(o.d_out, o.n_features);
  for (std::size_t i = 0; i < o.n_features; ++i) {
    for (std::size_t r = 0; r < o.d_out; ++r) d.directions(r, i) = cols(i, r);
  }
  if (o.linear_scale > 0.0) {
    d.linear = Matrix<double>(o.d_out, o.d_in);
    const double s = o.linear_scale / std::sqrt(double(o.d_in));
    for (double& v : d.linear->flat()) v = s * rng.normal();
  }
  d.offset.resize(o.d_out);
  for (double& v : d.offset) v = o.offset_scale * rng.normal();
  d.validate();
  return d;
}

// A dictionary whose single feature can never fire, so targets are exactly
// linear x + offset.
inline PlantedDictionary make_affine_dictionary(std::size_t d_in, std::size_t d_out,
                                                double linear_scale, std::uint64_t seed) {
  PlantedOptions o;
  o.n_features = 1;
  o.d_in = d_in;
  o.d_out = d_out;
  o.linear_scale = linear_scale;
  o.seed = seed;
  PlantedDictionary d = make_planted_dictionary(o);
  d.thresholds.assign(1, 1e30);
  return d;
}

enum class InputDist : std::uint8_t { Gaussian, SparseCode };

inline InputDist parse_input_dist(std::string_view s) {
  if (s == "gaussian") return InputDist::Gaussian;
  if (s == "sparse" || s == "sparse_code") return InputDist::SparseCode;
  fail("unknown input distribution '" + std::string(s) + "'");
}

// Draws rows (x, y). x is rounded to float before y is computed, so every
// stored row satisfies the formula up to the final float rounding of y.
class PlantedGenerator {
 public:
  PlantedGenerator(const PlantedDictionary& dict, InputDist dist, std::uint64_t seed)
      : dict_(&dict), dist_(dist), rng_(mix_seed(seed, 2)), x_(dict.d_in()) {
    dict.validate();
  }

  ShardRow next() {
    std::fill(x_.begin(), x_.end(), 0.0);
    if (dist_ == InputDist::Gaussian) {
      for (double& v : x_) v = rng_.normal();
    } else {
      for (std::size_t i = 0; i < dict_->n_features(); ++i) {
        if (rng_.uniform() < dict_->feature_prob) {
          const double a = rng_.uniform(1.0, 3.0);
          auto u = dict_->detectors.row(i);
          for (std::size_t c = 0; c < x_.size(); ++c) x_[c] += a * u[c];
        }
      }
      for (double& v : x_) v += 0.1 * rng_.normal();
    }
    ShardRow row;
    row.input.resize(x_.size());
    for (std::size_t c = 0; c < x_.size(); ++c) {
      row.input[c] = static_cast<float>(x_[c]);
      x_[c] = row.input[c];
    }
    const auto y = dict_->target(x_);
    row.target.assign(y.begin(), y.end());
    return row;
  }

 private:
  const PlantedDictionary* dict_;
  InputDist dist_;
  Rng rng_;
  std::vector<double> x_;
};

inline std::vector<ShardRow> gen_planted_rows(const PlantedDictionary& dict, std::size_t n_rows,
                                              InputDist dist, std::uint64_t seed) {
  PlantedGenerator gen(dict, dist, seed);
  std::vector<ShardRow> rows;
  rows.reserve(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i) rows.push_back(gen.next());
  return rows;
}

inline ShardHeader gen_planted(const PlantedDictionary& dict, std::uint64_t n_rows, InputDist dist,
                               std::uint64_t seed, const fs::path& path) {
  PlantedGenerator gen(dict, dist, seed);
  ShardWriter w(path, static_cast<std::uint32_t>(dict.d_in()), static_cast<std::uint32_t>(dict.d_out()));
  for (std::uint64_t i = 0; i < n_rows; ++i) w.write(gen.next());
  return w.finish();
}

inline TensorArchive planted_archive(const PlantedDictionary& d) {
  auto to_f32 = [](const Matrix<double>& m) { return make_tensor(m.cast<float>()); };
  TensorArchive ar;
  ar.meta = {{"kind", "planted_dictionary"},
             {"n_features", d.n_features()},
             {"d_in", d.d_in()},
             {"d_out", d.d_out()},
             {"feature_prob", d.feature_prob},
             {"seed", d.seed},
             {"thresholds", d.thresholds},
             {"has_linear", d.linear.has_value()}};
  ar.tensors["detectors"] = to_f32(d.detectors);
  ar.tensors["directions"] = to_f32(d.directions);
  if (d.linear) ar.tensors["linear"] = to_f32(*d.linear);
  ar.tensors["offset"] = make_tensor(cast_vector<float, double>(d.offset));
  return ar;
}

inline PlantedDictionary planted_from_archive(const TensorArchive& ar) {
  if (ar.meta.value("kind", "") != "planted_dictionary") fail("checkpoint is not a planted dictionary");
  const auto n = ar.meta.at("n_features").get<std::size_t>();
  const auto d_in = ar.meta.at("d_in").get<std::size_t>();
  const auto d_out = ar.meta.at("d_out").get<std::size_t>();
  PlantedDictionary d;
  d.feature_prob = ar.meta.at("feature_prob").get<double>();
  d.seed = ar.meta.at("seed").get<std::uint64_t>();
  d.thresholds = ar.meta.at("thresholds").get<std::vector<double>>();
  d.detectors = get_matrix(ar, "detectors", n, d_in).cast<double>();
  d.directions = get_matrix(ar, "directions", d_out, n).cast<double>();
  if (ar.meta.at("has_linear").get<bool>()) d.linear = get_matrix(ar, "linear", d_out, d_in).cast<double>();
  const auto off = get_vector(ar, "offset", d_out);
  d.offset.assign(off.begin(), off.end());
  d.validate();
  return d;
}

struct RecoveryScore {
  double score = 0.0;
  std::size_t zero_columns_skipped = 0;
};

// Mean over planted directions of the best |cosine| against any nonzero
// decoder column.
template <typename T>
RecoveryScore recovery_score(const BasicSparseCoder<T>& coder, const PlantedDictionary& dict) {
  require(coder.d_out() == dict.d_out(), "coder d_out does not match dictionary");
  const std::size_t n = coder.n_latents();
  std::vector<double> norms(n, 0.0);
  RecoveryScore out;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t o = 0; o < coder.d_out(); ++o) {
      norms[j] += double(coder.decoder(o, j)) * double(coder.decoder(o, j));
    }
    norms[j] = std::sqrt(norms[j]);
    if (norms[j] == 0.0) ++out.zero_columns_skipped;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < dict.n_features(); ++i) {
    double vnorm = 0.0;
    for (std::size_t o = 0; o < dict.d_out(); ++o) vnorm += dict.directions(o, i) * dict.directions(o, i);
    vnorm = std::sqrt(vnorm);
    double best = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (norms[j] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t o = 0; o < dict.d_out(); ++o) dot += double(coder.decoder(o, j)) * dict.directions(o, i);
      best = std::max(best, std::abs(dot) / (norms[j] * vnorm));
    }
    total += best;
  }
  out.score = total / double(dict.n_features());
  return out;
}

struct ToyLMConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t d_mlp = 64;
  // Weight of the previous token's embedding in the MLP input.
  double context_mix = 0.5;
  double unembed_scale = 2.0;
  std::uint64_t seed = 0;
};

// Next-token model over (previous, current) token pairs:
//
//   x      = pre * (embed[cur] + context_mix * embed[prev])
//   logits = unembed * (x + mlp(x)),   mlp(x) = W_out relu(W_in x + b_in) + b_out
//
// The MLP block is the patch target; its input/output are both d_model wide.
struct ToyLM {
  ToyLMConfig config;
  Matrix<float> embed;     // vocab x d_model
  Matrix<float> pre;       // d_model x d_model
  Matrix<float> mlp_in;    // d_mlp x d_model
  Vector<float> mlp_in_bias;
  Matrix<float> mlp_out;   // d_model x d_mlp
  Vector<float> mlp_out_bias;
  Matrix<float> unembed;   // vocab x d_model

  static ToyLM init(const ToyLMConfig& cfg) {
    require(cfg.vocab >= 2 && cfg.d_model >= 1 && cfg.d_mlp >= 1, "toy model dims too small");
    Rng rng(mix_seed(cfg.seed, 3));
    auto gauss = [&](Matrix<float>& m, double sd) {
      for (float& v : m.flat()) v = static_cast<float>(sd * rng.normal());
    };
    const double dm = double(cfg.d_model);
    ToyLM m;
    m.config = cfg;
    m.embed = Matrix<float>(cfg.vocab, cfg.d_model);
    gauss(m.embed, 1.0);
    m.pre = Matrix<float>(cfg.d_model, cfg.d_model);
    gauss(m.pre, 1.0 / std::sqrt(dm));
    m.mlp_in = Matrix<float>(cfg.d_mlp, cfg.d_model);
    gauss(m.mlp_in, std::sqrt(2.0 / dm));
    m.mlp_in_bias.resize(cfg.d_mlp);
    for (float& v : m.mlp_in_bias) v = static_cast<float>(0.1 * rng.normal());
    m.mlp_out = Matrix<float>(cfg.d_model, cfg.d_mlp);
    gauss(m.mlp_out, 1.0 / std::sqrt(double(cfg.d_mlp)));
    m.mlp_out_bias.assign(cfg.d_model, 0.0f);
    m.unembed = Matrix<float>(cfg.vocab, cfg.d_model);
    gauss(m.unembed, cfg.unembed_scale / std::sqrt(dm));
    return m;
  }

  std::size_t d_model() const { return config.d_model; }
  std::size_t vocab() const { return config.vocab; }

  // `prev` is absent at the first position.
  Vector<float> mlp_input(std::optional<std::uint32_t> prev, std::uint32_t cur) const {
    require(cur < config.vocab && (!prev || *prev < config.vocab), "token out of range");
    std::vector<double> e(config.d_model);
    for (std::size_t c = 0; c < config.d_model; ++c) {
      e[c] = embed(cur, c);
      if (prev) e[c] += config.context_mix * double(embed(*prev, c));
    }
    Vector<float> x(config.d_model);
    matvec<float, double>(pre, e, x);
    return x;
  }

  Vector<float> mlp(std::span<const float> x) const {
    Vector<float> h(config.d_mlp);
    for (std::size_t j = 0; j < config.d_mlp; ++j) {
      double acc = double(mlp_in_bias[j]);
      auto w = mlp_in.row(j);
      for (std::size_t c = 0; c < config.d_model; ++c) acc += double(w[c]) * double(x[c]);
      h[j] = std::max(0.0f, static_cast<float>(acc));
    }
    Vector<float> out(config.d_model);
    for (std::size_t o = 0; o < config.d_model; ++o) {
      double acc = double(mlp_out_bias[o]);
      auto w = mlp_out.row(o);
      for (std::size_t j = 0; j < config.d_mlp; ++j) acc += double(w[j]) * double(h[j]);
      out[o] = static_cast<float>(acc);
    }
    return out;
  }

  std::vector<double> logits(std::span<const float> x, std::span<const float> block_out) const {
    std::vector<double> l(config.vocab);
    for (std::size_t t = 0; t < config.vocab; ++t) {
      auto u = unembed.row(t);
      double acc = 0.0;
      for (std::size_t c = 0; c < config.d_model; ++c) {
        acc += double(u[c]) * (double(x[c]) + double(block_out[c]));
      }
      l[t] = acc;
    }
    return l;
  }
};

// -log softmax(logits)[target]
inline double cross_entropy(std::span<const double> logits, std::uint32_t target) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return mx + std::log(s) - logits[target];
}

inline TensorArchive toylm_archive(const ToyLM& m) {
  TensorArchive ar;
  ar.meta = {{"kind", "toy_lm"},
             {"vocab", m.config.vocab},
             {"d_model", m.config.d_model},
             {"d_mlp", m.config.d_mlp},
             {"context_mix", m.config.context_mix},
             {"unembed_scale", m.config.unembed_scale},
             {"seed", m.config.seed}};
  ar.tensors["embed"] = make_tensor(m.embed);
  ar.tensors["pre"] = make_tensor(m.pre);
  ar.tensors["mlp_in"] = make_tensor(m.mlp_in);
  ar.tensors["mlp_in_bias"] = make_tensor(m.mlp_in_bias);
  ar.tensors["mlp_out"] = make_tensor(m.mlp_out);
  ar.tensors["mlp_out_bias"] = make_tensor(m.mlp_out_bias);
  ar.tensors["unembed"] = make_tensor(m.unembed);
  return ar;
}

inline ToyLM toylm_from_archive(const TensorArchive& ar) {
  if (ar.meta.value("kind", "") != "toy_lm") fail("checkpoint is not a toy model");
  ToyLM m;
  auto& c = m.config;
  c.vocab = ar.meta.at("vocab").get<std::size_t>();
  c.d_model = ar.meta.at("d_model").get<std::size_t>();
  c.d_mlp = ar.meta.at("d_mlp").get<std::size_t>();
  c.context_mix = ar.meta.at("context_mix").get<double>();
  c.unembed_scale = ar.meta.at("unembed_scale").get<double>();
  c.seed = ar.meta.at("seed").get<std::uint64_t>();
  m.embed = get_matrix(ar, "embed", c.vocab, c.d_model);
  m.pre = get_matrix(ar, "pre", c.d_model, c.d_model);
  m.mlp_in = get_matrix(ar, "mlp_in", c.d_mlp, c.d_model);
  m.mlp_in_bias = get_vector(ar, "mlp_in_bias", c.d_mlp);
  m.mlp_out = get_matrix(ar, "mlp_out", c.d_model, c.d_mlp);
  m.mlp_out_bias = get_vector(ar, "mlp_out_bias", c.d_model);
  m.unembed = get_matrix(ar, "unembed", c.vocab, c.d_model);
  return m;
}

// Token files: "TOKS", u16 version (1), u16 reserved, u32 vocab, u64 count,
// then count x u32 token ids. Little-endian.
inline constexpr std::array<char, 4> kTokensMagic{'T', 'O', 'K', 'S'};

inline void write_tokens(std::span<const std::uint32_t> tokens, std::uint32_t vocab, const fs::path& path) {
  std::vector<char> buf;
  buf.insert(buf.end(), kTokensMagic.begin(), kTokensMagic.end());
  le::put(buf, std::uint16_t{1});
  le::put(buf, std::uint16_t{0});
  le::put(buf, vocab);
  le::put(buf, std::uint64_t(tokens.size()));
  for (auto t : tokens) le::put(buf, t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path.string() + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail("write failed on '" + path.string() + "'");
}

struct TokenFile {
  std::uint32_t vocab = 0;
  std::vector<std::uint32_t> tokens;
};

inline TokenFile read_tokens(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || !std::equal(kTokensMagic.begin(), kTokensMagic.end(), buf.begin())) {
    fail("bad magic");
  }
  if (le::get<std::uint16_t>(buf.data() + 4) != 1) fail("unsupported token file version");
  TokenFile f;
  f.vocab = le::get<std::uint32_t>(buf.data() + 8);
  const auto n = le::get<std::uint64_t>(buf.data() + 12);
  if (buf.size() != 20 + n * 4) fail("truncated: '" + path.string() + "'");
  f.tokens.resize(n);
  std::memcpy(f.tokens.data(), buf.data() + 20, n * 4);
  for (auto t : f.tokens) require(t < f.vocab, "token id out of range");
  return f;
}

struct ToyCorpus {
  std::vector<std::uint32_t> tokens;
  std::vector<ShardRow> rows;  // (mlp input, mlp output) at each position
};

// Samples tokens from the model's own next-token distribution (first token
// uniform) and records the MLP block's input/output at every position.
inline ToyCorpus gen_toy_corpus(const ToyLM& model, std::size_t n_tokens, std::uint64_t seed) {
  if (n_tokens == 0) fail("empty corpus");
  Rng rng(mix_seed(seed, 4));
  ToyCorpus c;
  c.tokens.reserve(n_tokens);
  c.rows.reserve(n_tokens);
  c.tokens.push_back(static_cast<std::uint32_t>(rng.below(model.vocab())));
  std::vector<double> probs(model.vocab());
  for (std::size_t i = 0; i < n_tokens; ++i) {
    std::optional<std::uint32_t> prev;
    if (i > 0) prev = c.tokens[i - 1];
    ShardRow row;
    row.input = model.mlp_input(prev, c.tokens[i]);
    row.target = model.mlp(row.input);
    if (i + 1 < n_tokens) {
      const auto l = model.logits(row.input, row.target);
      const double mx = *std::max_element(l.begin(), l.end());
      double z = 0.0;
      for (std::size_t t = 0; t < l.size(); ++t) z += probs[t] = std::exp(l[t] - mx);
      double u = rng.uniform() * z;
      std::uint32_t next = static_cast<std::uint32_t>(l.size() - 1);
      for (std::size_t t = 0; t < l.size(); ++t) {
        u -= probs[t];
        if (u < 0.0) {
          next = static_cast<std::uint32_t>(t);
          break;
        }
      }
      c.tokens.push_back(next);
    }
    c.rows.push_back(std::move(row));
  }
  return c;
}

}  // namespace sparsecoder
