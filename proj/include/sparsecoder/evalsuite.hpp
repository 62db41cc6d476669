#pragma once

// Evaluations over a trained coder: reconstruction (FVU), patched
// cross-entropy, latent density statistics, activating-example sampling,
// detection/fuzzing score aggregation and sparse probing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsecoder/coder.hpp"
#include "sparsecoder/error.hpp"
#include "sparsecoder/rng.hpp"
#include "sparsecoder/shardio.hpp"
#include "sparsecoder/synth.hpp"
#include "sparsecoder/train.hpp"

namespace sparsecoder {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Fraction of variance unexplained

struct FvuReport {
  double fvu = 0.0;
  double variance_explained_pct = 0.0;
  double mse = 0.0;
  double target_variance = 0.0;
  std::uint64_t n_rows = 0;
};

// Two passes: per-coordinate target mean, then residual and deviation sums.
// fvu = sum ||f(x) - y||^2 / sum ||y - mean||^2.
template <typename T, typename Source>
FvuReport fvu(const BasicSparseCoder<T>& coder, Source& source) {
  const std::size_t d_out = coder.d_out();
  std::vector<double> mean(d_out, 0.0);
  ShardRow row;
  std::uint64_t n = 0;
  source.rewind();
  while (source.next(row)) {
    require(row.target.size() == d_out, "dataset d_out does not match coder");
    for (std::size_t o = 0; o < d_out; ++o) mean[o] += row.target[o];
    ++n;
  }
  require(n >= 2, "fvu needs at least 2 rows");
  for (double& m : mean) m /= double(n);

  source.rewind();
  double ss_res = 0.0;
  double ss_tot = 0.0;
  std::vector<T> x(coder.d_in());
  while (source.next(row)) {
    auto in = coder_input(coder.config.arch, row);
    require(in.size() == coder.d_in(), "dataset d_in does not match coder");
    std::copy(in.begin(), in.end(), x.begin());
    const auto y = coder.forward(x);
    for (std::size_t o = 0; o < d_out; ++o) {
      const double r = double(y[o]) - double(row.target[o]);
      const double t = double(row.target[o]) - mean[o];
      ss_res += r * r;
      ss_tot += t * t;
    }
  }
  source.rewind();
  if (ss_tot == 0.0) fail("degenerate variance");
  FvuReport rep;
  rep.n_rows = n;
  rep.mse = ss_res / (double(n) * double(d_out));
  rep.target_variance = ss_tot / (double(n) * double(d_out));
  rep.fvu = ss_res / ss_tot;
  rep.variance_explained_pct = 100.0 * (1.0 - rep.fvu);
  return rep;
}

// ---------------------------------------------------------------------------
// Cross-entropy increase when the coder replaces the toy model's MLP block

struct PatchReport {
  double ce_base = 0.0;
  double ce_patched = 0.0;
  double delta_ce = 0.0;
  double delta_ce_pct = 0.0;
  std::uint64_t n_predictions = 0;
};

// Transcoders replace mlp(x) with f(x); an SAE reconstructs the block output,
// so it is patched in as f(mlp(x)).
template <typename T>
PatchReport patch_delta_ce(const ToyLM& model, const BasicSparseCoder<T>& coder,
                           std::span<const std::uint32_t> tokens) {
  if (tokens.size() < 2) fail("empty corpus");
  require(coder.d_in() == model.d_model() && coder.d_out() == model.d_model(),
          "coder dims do not match the toy model's MLP block");
  double base = 0.0;
  double patched = 0.0;
  std::vector<T> in(coder.d_in());
  std::vector<float> replaced(coder.d_out());
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    std::optional<std::uint32_t> prev;
    if (i > 0) prev = tokens[i - 1];
    const auto x = model.mlp_input(prev, tokens[i]);
    const auto out = model.mlp(x);
    base += cross_entropy(model.logits(x, out), tokens[i + 1]);

    const auto& src = coder.config.arch == Arch::SAE ? out : x;
    std::copy(src.begin(), src.end(), in.begin());
    const auto y = coder.forward(in);
    std::copy(y.begin(), y.end(), replaced.begin());
    patched += cross_entropy(model.logits(x, replaced), tokens[i + 1]);
  }
  PatchReport rep;
  rep.n_predictions = tokens.size() - 1;
  rep.ce_base = base / double(rep.n_predictions);
  rep.ce_patched = patched / double(rep.n_predictions);
  rep.delta_ce = rep.ce_patched - rep.ce_base;
  rep.delta_ce_pct = 100.0 * rep.delta_ce / rep.ce_base;
  return rep;
}

// ---------------------------------------------------------------------------
// Latent density statistics

inline constexpr int kDensityBins = 40;
inline constexpr double kDensityLog10Min = -7.0;
inline constexpr double kDensityLog10Max = 0.0;

struct LatentStat {
  std::uint64_t active_count = 0;
  double activation_sum = 0.0;
  double density = 0.0;
  // activation_sum / total tokens
  double mean_activation = 0.0;
  // activation_sum / active tokens (0 if never active)
  double cah = 0.0;
  bool dead = true;
};

struct LatentStatsReport {
  std::uint64_t n_tokens = 0;
  std::vector<LatentStat> latents;
  // Counts over log10(density) in [-7, 0], kDensityBins equal-width bins;
  // densities below 1e-7 land in bin 0. Dead latents are counted separately.
  std::vector<std::uint64_t> histogram;
  std::uint64_t dead_count = 0;
};

inline int density_bin(double density) {
  const double width = (kDensityLog10Max - kDensityLog10Min) / kDensityBins;
  const int b = static_cast<int>(std::floor((std::log10(density) - kDensityLog10Min) / width));
  return std::clamp(b, 0, kDensityBins - 1);
}

class LatentStatsAccumulator {
 public:
  explicit LatentStatsAccumulator(std::size_t n_latents) : counts_(n_latents, 0), sums_(n_latents, 0.0) {}

  template <typename T>
  void add(const SparseCode<T>& code) {
    add(code.indices, std::span<const T>(code.values));
  }

  // A latent counts as active on a token when it is selected with a nonzero value.
  template <typename T>
  void add(std::span<const std::uint32_t> indices, std::span<const T> values) {
    for (std::size_t s = 0; s < indices.size(); ++s) {
      require(indices[s] < counts_.size(), "latent index out of range");
      if (values[s] != T{0}) {
        ++counts_[indices[s]];
        sums_[indices[s]] += double(values[s]);
      }
    }
    ++n_tokens_;
  }

  LatentStatsReport finish() const {
    LatentStatsReport r;
    r.n_tokens = n_tokens_;
    r.histogram.assign(kDensityBins, 0);
    r.latents.resize(counts_.size());
    for (std::size_t j = 0; j < counts_.size(); ++j) {
      LatentStat& s = r.latents[j];
      s.active_count = counts_[j];
      s.activation_sum = sums_[j];
      if (n_tokens_ > 0) {
        s.density = double(counts_[j]) / double(n_tokens_);
        s.mean_activation = sums_[j] / double(n_tokens_);
      }
      s.cah = counts_[j] > 0 ? sums_[j] / double(counts_[j]) : 0.0;
      s.dead = counts_[j] == 0;
      if (s.dead) {
        ++r.dead_count;
      } else {
        ++r.histogram[density_bin(s.density)];
      }
    }
    return r;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::vector<double> sums_;
  std::uint64_t n_tokens_ = 0;
};

template <typename T, typename Source>
LatentStatsReport latent_stats(const BasicSparseCoder<T>& coder, Source& source) {
  LatentStatsAccumulator acc(coder.n_latents());
  ShardRow row;
  std::vector<T> x(coder.d_in());
  source.rewind();
  std::uint64_t n = 0;
  while (source.next(row)) {
    auto in = coder_input(coder.config.arch, row);
    require(in.size() == coder.d_in(), "dataset d_in does not match coder");
    std::copy(in.begin(), in.end(), x.begin());
    acc.add(coder.encode(x));
    ++n;
  }
  source.rewind();
  require(n > 0, "zero rows");
  return acc.finish();
}

// ---------------------------------------------------------------------------
// Activating examples binned by activation quantile

struct SampleOptions {
  std::size_t n_quantiles = 10;
  std::size_t n_per_quantile = 5;
  std::size_t n_non_activating = 50;
  std::size_t window = 32;
  // Position of the activating token of record inside the window.
  std::size_t record_offset = 24;
  std::uint64_t seed = 0;
};

struct ExampleWindow {
  std::uint64_t start = 0;  // corpus position of the first token
  std::vector<std::uint32_t> tokens;
  std::vector<float> activations;
  std::vector<std::uint8_t> active;  // activation > 0
  std::uint64_t record_position = 0;  // corpus position the example was drawn for
  int bin = -1;  // quantile bin, -1 for non-activating windows
  bool padded = false;  // shorter than the window because of a corpus edge
};

struct LatentExamples {
  std::uint32_t latent = 0;
  std::uint64_t n_positive = 0;
  // Activation range [lo, hi] of each bin, in bin order.
  std::vector<std::pair<float, float>> bin_ranges;
  std::vector<std::vector<ExampleWindow>> bins;
  std::vector<ExampleWindow> non_activating;
  bool degraded = false;  // fewer positive activations than requested bins
};

struct QuantileExampleSet {
  SampleOptions options;
  std::vector<LatentExamples> latents;
};

// Dense per-token activations for the given latents (0 where not selected).
template <typename T, typename Source>
std::vector<std::vector<float>> latent_activation_traces(const BasicSparseCoder<T>& coder, Source& source,
                                                         std::span<const std::uint32_t> latents) {
  for (auto j : latents) require(j < coder.n_latents(), "latent id out of range");
  std::vector<std::vector<float>> traces(latents.size());
  ShardRow row;
  std::vector<T> x(coder.d_in());
  source.rewind();
  while (source.next(row)) {
    auto in = coder_input(coder.config.arch, row);
    require(in.size() == coder.d_in(), "dataset d_in does not match coder");
    std::copy(in.begin(), in.end(), x.begin());
    const auto code = coder.encode(x);
    for (std::size_t l = 0; l < latents.size(); ++l) {
      auto it = std::lower_bound(code.indices.begin(), code.indices.end(), latents[l]);
      const bool hit = it != code.indices.end() && *it == latents[l];
      traces[l].push_back(hit ? static_cast<float>(code.values[it - code.indices.begin()]) : 0.0f);
    }
  }
  source.rewind();
  return traces;
}

// Positions sorted ascending by (activation, position) and split into
// equal-count bins: bin b holds sorted entries [b*n/Q, (b+1)*n/Q).
inline std::vector<std::vector<std::uint64_t>> quantile_bins(std::span<const float> trace, std::size_t n_bins) {
  std::vector<std::uint64_t> pos;
  for (std::uint64_t i = 0; i < trace.size(); ++i) {
    if (trace[i] > 0.0f) pos.push_back(i);
  }
  std::sort(pos.begin(), pos.end(), [&](std::uint64_t a, std::uint64_t b) {
    return trace[a] < trace[b] || (trace[a] == trace[b] && a < b);
  });
  const std::size_t n = pos.size();
  n_bins = std::min(n_bins, n);
  std::vector<std::vector<std::uint64_t>> bins(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].assign(pos.begin() + static_cast<std::ptrdiff_t>(b * n / n_bins),
                   pos.begin() + static_cast<std::ptrdiff_t>((b + 1) * n / n_bins));
  }
  return bins;
}

inline ExampleWindow make_window(std::span<const std::uint32_t> tokens, std::span<const float> trace,
                                 std::uint64_t start, std::uint64_t end) {
  ExampleWindow w;
  w.start = start;
  for (std::uint64_t p = start; p < end; ++p) {
    w.tokens.push_back(tokens[p]);
    w.activations.push_back(trace[p]);
    w.active.push_back(trace[p] > 0.0f ? 1 : 0);
  }
  return w;
}

inline LatentExamples sample_latent_examples(std::span<const std::uint32_t> tokens, std::span<const float> trace,
                                             std::uint32_t latent, const SampleOptions& opt) {
  require(trace.size() == tokens.size(), "activation trace length does not match corpus");
  require(opt.window >= 1 && opt.record_offset < opt.window, "invalid window placement");
  require(tokens.size() >= opt.window, "corpus shorter than one window");
  require(opt.n_quantiles >= 1, "n_quantiles must be >= 1");

  LatentExamples ex;
  ex.latent = latent;
  auto bins = quantile_bins(trace, opt.n_quantiles);
  for (const auto& b : bins) ex.n_positive += b.size();
  if (ex.n_positive == 0) fail("dead latent " + std::to_string(latent));
  ex.degraded = bins.size() < opt.n_quantiles;

  Rng rng(mix_seed(opt.seed, latent));
  const std::int64_t n = static_cast<std::int64_t>(tokens.size());
  for (std::size_t b = 0; b < bins.size(); ++b) {
    auto& members = bins[b];
    ex.bin_ranges.emplace_back(trace[members.front()], trace[members.back()]);
    const std::size_t take = std::min(opt.n_per_quantile, members.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(members[i], members[i + rng.below(members.size() - i)]);
    }
    std::vector<std::uint64_t> chosen(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(chosen.begin(), chosen.end());
    std::vector<ExampleWindow> windows;
    for (auto p : chosen) {
      const std::int64_t s = std::int64_t(p) - std::int64_t(opt.record_offset);
      const std::int64_t e = s + std::int64_t(opt.window);
      auto w = make_window(tokens, trace, std::uint64_t(std::max<std::int64_t>(s, 0)),
                           std::uint64_t(std::min(e, n)));
      w.padded = s < 0 || e > n;
      w.record_position = p;
      w.bin = static_cast<int>(b);
      windows.push_back(std::move(w));
    }
    ex.bins.push_back(std::move(windows));
  }

  // Full windows containing no positive activation.
  std::vector<std::uint64_t> prefix(tokens.size() + 1, 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) prefix[i + 1] = prefix[i] + (trace[i] > 0.0f ? 1 : 0);
  std::vector<std::uint64_t> starts;
  for (std::uint64_t s = 0; s + opt.window <= tokens.size(); ++s) {
    if (prefix[s + opt.window] == prefix[s]) starts.push_back(s);
  }
  const std::size_t take = std::min(opt.n_non_activating, starts.size());
  for (std::size_t i = 0; i < take; ++i) std::swap(starts[i], starts[i + rng.below(starts.size() - i)]);
  starts.resize(take);
  std::sort(starts.begin(), starts.end());
  for (auto s : starts) {
    auto w = make_window(tokens, trace, s, s + opt.window);
    w.record_position = s;
    ex.non_activating.push_back(std::move(w));
  }
  return ex;
}

inline QuantileExampleSet sample_quantile_examples(std::span<const std::uint32_t> tokens,
                                                   const std::vector<std::vector<float>>& traces,
                                                   std::span<const std::uint32_t> latents,
                                                   const SampleOptions& opt) {
  require(traces.size() == latents.size(), "one trace per latent required");
  QuantileExampleSet set;
  set.options = opt;
  for (std::size_t l = 0; l < latents.size(); ++l) {
    set.latents.push_back(sample_latent_examples(tokens, traces[l], latents[l], opt));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Detection / fuzzing aggregation

struct JudgedExample {
  std::string id;
  bool ground_truth = false;
  bool judged = false;
};

struct ClassRates {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t true_positives = 0;
  std::size_t true_negatives = 0;
};

inline ClassRates class_rates(std::span<const JudgedExample> judged) {
  ClassRates r;
  for (const auto& e : judged) {
    if (e.ground_truth) {
      ++r.positives;
      if (e.judged) ++r.true_positives;
    } else {
      ++r.negatives;
      if (!e.judged) ++r.true_negatives;
    }
  }
  return r;
}

// Balanced accuracy: mean of true-positive and true-negative rates.
inline double detection_score(std::span<const JudgedExample> judged) {
  const auto r = class_rates(judged);
  if (r.positives == 0 || r.negatives == 0) fail("detection score needs both classes");
  return 0.5 * (double(r.true_positives) / double(r.positives) +
                double(r.true_negatives) / double(r.negatives));
}

// Balanced accuracy over whichever classes are present.
inline double fuzzing_score(std::span<const JudgedExample> judged) {
  const auto r = class_rates(judged);
  if (r.positives == 0 && r.negatives == 0) fail("no judged examples");
  if (r.negatives == 0) return double(r.true_positives) / double(r.positives);
  if (r.positives == 0) return double(r.true_negatives) / double(r.negatives);
  return 0.5 * (double(r.true_positives) / double(r.positives) +
                double(r.true_negatives) / double(r.negatives));
}

struct JudgedFile {
  std::vector<JudgedExample> detection;
  std::vector<JudgedExample> fuzzing;
};

// Line-delimited JSON: {"id": ..., "ground_truth": bool, "judged": bool,
// "task": "detection"|"fuzzing"}; task defaults to detection. Blank lines are
// ignored.
inline JudgedFile read_judged_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open '" + path.string() + "'");
  JudgedFile f;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      JudgedExample e;
      e.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      e.ground_truth = j.at("ground_truth").get<bool>();
      e.judged = j.at("judged").get<bool>();
      const std::string task = j.value("task", "detection");
      if (task == "detection") {
        f.detection.push_back(std::move(e));
      } else if (task == "fuzzing") {
        f.fuzzing.push_back(std::move(e));
      } else {
        fail("unknown task '" + task + "'");
      }
    } catch (const nlohmann::json::exception& ex) {
      fail(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Sparse probing

struct ProbeOptions {
  std::size_t m = 1;
  double train_fraction = 0.8;
  std::size_t iterations = 1000;
  double learning_rate = 0.5;
  std::uint64_t seed = 0;
};

struct ProbeReport {
  std::vector<std::uint32_t> selected;  // feature indices used by the probe
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline ProbeSplit probe_split(std::size_t n, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 5));
  rng.shuffle(std::span<std::size_t>(perm));
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * double(n)));
  ProbeSplit s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  return s;
}

// |mean1 - mean0| / pooled standard deviation, per column, over `rows`.
inline std::vector<double> class_separation(const Matrix<double>& features, std::span<const std::uint8_t> labels,
                                            std::span<const std::size_t> rows) {
  const std::size_t d = features.cols();
  std::vector<double> sum[2] = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  std::size_t count[2] = {0, 0};
  for (auto r : rows) {
    const int c = labels[r] ? 1 : 0;
    ++count[c];
    for (std::size_t j = 0; j < d; ++j) sum[c][j] += features(r, j);
  }
  std::vector<double> out(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    const double m0 = sum[0][j] / double(count[0]);
    const double m1 = sum[1][j] / double(count[1]);
    double ss = 0.0;
    for (auto r : rows) {
      const double mu = labels[r] ? m1 : m0;
      ss += (features(r, j) - mu) * (features(r, j) - mu);
    }
    const double dof = double(count[0] + count[1]) - 2.0;
    const double sd = dof > 0.0 ? std::sqrt(ss / dof) : 0.0;
    const double diff = std::abs(m1 - m0);
    if (sd > 0.0) {
      out[j] = diff / sd;
    } else {
      out[j] = diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
  }
  return out;
}

// Logistic regression on the chosen columns, z-scored with training-split
// statistics, fitted by full-batch gradient descent.
inline ProbeReport fit_logistic_probe(const Matrix<double>& features, std::span<const std::uint8_t> labels,
                                      const ProbeSplit& split, std::vector<std::uint32_t> columns,
                                      const ProbeOptions& opt) {
  const std::size_t m = columns.size();
  std::vector<double> mu(m, 0.0), sd(m, 0.0);
  for (std::size_t c = 0; c < m; ++c) {
    for (auto r : split.train) mu[c] += features(r, columns[c]);
    mu[c] /= double(split.train.size());
    for (auto r : split.train) {
      const double d = features(r, columns[c]) - mu[c];
      sd[c] += d * d;
    }
    sd[c] = std::sqrt(sd[c] / double(split.train.size()));
    if (sd[c] == 0.0) sd[c] = 1.0;
  }
  auto z = [&](std::size_t r, std::size_t c) { return (features(r, columns[c]) - mu[c]) / sd[c]; };

  std::vector<double> w(m, 0.0);
  double bias = 0.0;
  std::vector<double> gw(m);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (auto r : split.train) {
      double s = bias;
      for (std::size_t c = 0; c < m; ++c) s += w[c] * z(r, c);
      const double p = 1.0 / (1.0 + std::exp(-s));
      const double err = p - (labels[r] ? 1.0 : 0.0);
      gb += err;
      for (std::size_t c = 0; c < m; ++c) gw[c] += err * z(r, c);
    }
    const double scale = opt.learning_rate / double(split.train.size());
    bias -= scale * gb;
    for (std::size_t c = 0; c < m; ++c) w[c] -= scale * gw[c];
  }
  auto accuracy = [&](std::span<const std::size_t> rows) {
    if (rows.empty()) return 0.0;
    std::size_t correct = 0;
    for (auto r : rows) {
      double s = bias;
      for (std::size_t c = 0; c < m; ++c) s += w[c] * z(r, c);
      if ((s > 0.0) == bool(labels[r])) ++correct;
    }
    return double(correct) / double(rows.size());
  };
  ProbeReport rep;
  rep.train_accuracy = accuracy(split.train);
  rep.test_accuracy = accuracy(split.test);
  rep.selected = std::move(columns);
  rep.n_train = split.train.size();
  rep.n_test = split.test.size();
  return rep;
}

namespace detail {

inline std::vector<std::uint8_t> probe_labels(std::span<const ShardRow> labeled) {
  std::vector<std::uint8_t> labels;
  for (const auto& r : labeled) {
    require(!r.target.empty(), "labeled rows need a label in target[0]");
    labels.push_back(r.target[0] > 0.5f ? 1 : 0);
  }
  return labels;
}

inline void check_probe_split(std::span<const std::uint8_t> labels, const ProbeSplit& s) {
  std::size_t pos = 0;
  for (auto r : s.train) pos += labels[r];
  if (pos == 0 || pos == s.train.size()) fail("probe needs both classes in the training split");
  require(!s.test.empty(), "probe test split is empty");
}

}  // namespace detail

// Labeled rows carry the input in `input` and the binary label in target[0].
// Selects the m latents whose activations best separate the classes on the
// training split and reports held-out accuracy of a logistic probe on them.
template <typename T>
ProbeReport sparse_probe(const BasicSparseCoder<T>& coder, std::span<const ShardRow> labeled,
                         const ProbeOptions& opt) {
  require(opt.m >= 1 && opt.m <= coder.n_latents(), "probe m must be in [1, n_latents]");
  const auto labels = detail::probe_labels(labeled);
  const auto split = probe_split(labeled.size(), opt.train_fraction, opt.seed);
  detail::check_probe_split(labels, split);

  Matrix<double> acts(labeled.size(), coder.n_latents());
  std::vector<T> x(coder.d_in());
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    require(labeled[r].input.size() == coder.d_in(), "labeled input length must equal d_in");
    std::copy(labeled[r].input.begin(), labeled[r].input.end(), x.begin());
    const auto code = coder.encode(x);
    for (std::size_t s = 0; s < code.size(); ++s) acts(r, code.indices[s]) = double(code.values[s]);
  }
  const auto sep = class_separation(acts, labels, split.train);
  const auto chosen = top_k_indices<double>(sep, opt.m);
  return fit_logistic_probe(acts, labels, split, chosen, opt);
}

// Same probe on every raw input coordinate; the reference a coder's latents
// are compared against.
inline ProbeReport logistic_baseline(std::span<const ShardRow> labeled, const ProbeOptions& opt) {
  require(!labeled.empty(), "empty labeled dataset");
  const auto labels = detail::probe_labels(labeled);
  const auto split = probe_split(labeled.size(), opt.train_fraction, opt.seed);
  detail::check_probe_split(labels, split);
  const std::size_t d = labeled.front().input.size();
  Matrix<double> feats(labeled.size(), d);
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    require(labeled[r].input.size() == d, "labeled rows differ in length");
    for (std::size_t c = 0; c < d; ++c) feats(r, c) = labeled[r].input[c];
  }
  std::vector<std::uint32_t> all(d);
  std::iota(all.begin(), all.end(), 0u);
  return fit_logistic_probe(feats, labels, split, all, opt);
}

// ---------------------------------------------------------------------------
// Report serialization

inline nlohmann::json to_json(const FvuReport& r) {
  return {{"schema_version", kReportSchemaVersion},
          {"report", "fvu"},
          {"fvu", r.fvu},
          {"variance_explained_pct", r.variance_explained_pct},
          {"mse", r.mse},
          {"target_variance", r.target_variance},
          {"n_rows", r.n_rows}};
}

inline nlohmann::json to_json(const PatchReport& r) {
  return {{"schema_version", kReportSchemaVersion},
          {"report", "patch"},
          {"ce_base", r.ce_base},
          {"ce_patched", r.ce_patched},
          {"delta_ce", r.delta_ce},
          {"delta_ce_pct", r.delta_ce_pct},
          {"n_predictions", r.n_predictions}};
}

inline nlohmann::json to_json(const LatentStatsReport& r) {
  nlohmann::json lat = nlohmann::json::array();
  for (std::size_t j = 0; j < r.latents.size(); ++j) {
    const auto& s = r.latents[j];
    lat.push_back({{"latent", j},
                   {"density", s.density},
                   {"mean_activation", s.mean_activation},
                   {"cah", s.cah},
                   {"active_count", s.active_count},
                   {"dead", s.dead}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"report", "density"},
          {"n_tokens", r.n_tokens},
          {"dead_count", r.dead_count},
          {"histogram",
           {{"log10_min", kDensityLog10Min}, {"log10_max", kDensityLog10Max}, {"counts", r.histogram}}},
          {"latents", lat}};
}

inline nlohmann::json to_json(const ProbeReport& r, const std::string& name = "probe") {
  return {{"schema_version", kReportSchemaVersion},
          {"report", name},
          {"selected", r.selected},
          {"train_accuracy", r.train_accuracy},
          {"test_accuracy", r.test_accuracy},
          {"n_train", r.n_train},
          {"n_test", r.n_test}};
}

inline nlohmann::json to_json(const ExampleWindow& w) {
  return {{"start", w.start},
          {"record_position", w.record_position},
          {"bin", w.bin},
          {"padded", w.padded},
          {"tokens", w.tokens},
          {"activations", w.activations},
          {"active", w.active}};
}

inline nlohmann::json to_json(const QuantileExampleSet& set) {
  nlohmann::json lat = nlohmann::json::array();
  for (const auto& ex : set.latents) {
    nlohmann::json bins = nlohmann::json::array();
    for (std::size_t b = 0; b < ex.bins.size(); ++b) {
      nlohmann::json ws = nlohmann::json::array();
      for (const auto& w : ex.bins[b]) ws.push_back(to_json(w));
      bins.push_back({{"bin", b}, {"lo", ex.bin_ranges[b].first}, {"hi", ex.bin_ranges[b].second}, {"examples", ws}});
    }
    nlohmann::json non = nlohmann::json::array();
    for (const auto& w : ex.non_activating) non.push_back(to_json(w));
    lat.push_back({{"latent", ex.latent},
                   {"n_positive", ex.n_positive},
                   {"degraded", ex.degraded},
                   {"bins", bins},
                   {"non_activating", non}});
  }
  const auto& o = set.options;
  return {{"schema_version", kReportSchemaVersion},
          {"report", "examples"},
          {"window", o.window},
          {"record_offset", o.record_offset},
          {"n_quantiles", o.n_quantiles},
          {"n_per_quantile", o.n_per_quantile},
          {"n_non_activating", o.n_non_activating},
          {"seed", o.seed},
          {"latents", lat}};
}

}  // namespace sparsecoder
