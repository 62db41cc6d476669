// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fail. Tolerances are fixed here and nowhere else.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sys/wait.h>

#include "oracles.hpp"

using namespace sparsecoder;

namespace {

constexpr double kGradRelTol = 1e-4;
constexpr double kGradDenomFloor = 1e-6;
constexpr double kResidualRelTol = 1e-6;
constexpr double kAffineFvu = 1e-3;
constexpr double kAffineSkipRel = 0.05;
constexpr double kAffineLr = 5e-3;
constexpr int kSkipWinsNeeded = 9;
constexpr double kPatchExactTol = 1e-6;
constexpr double kRecoveryMin = 0.9;
constexpr double kMeanPredictorTol = 1e-6;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void check(const char* name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s  %-22s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double max_grad_error(const BasicSparseCoder<double>& c, const std::vector<ShardRow>& batch) {
  std::vector<std::vector<std::uint32_t>> masks;
  for (const auto& r : batch) {
    const auto& src = c.config.arch == Arch::SAE ? r.target : r.input;
    masks.push_back(c.encode(std::vector<double>(src.begin(), src.end())).indices);
  }
  const auto analytic = backward(c, batch);
  std::vector<std::span<const double>> grads;
  analytic.grads.for_each([&](std::string_view, std::span<const double> g) { grads.push_back(g); });
  const double h = 1e-5;
  double worst = 0.0;
  auto probe = c;
  std::size_t t = 0;
  for_each_param(probe, [&](std::string_view, std::span<double> p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      const double up = oracle::masked_loss(probe, batch, masks);
      p[i] = orig - h;
      const double down = oracle::masked_loss(probe, batch, masks);
      p[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = grads[t][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradDenomFloor}));
    }
    ++t;
  });
  return worst;
}

Outcome gradient_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  int coders = 0;
  for (Arch arch : {Arch::SAE, Arch::Transcoder, Arch::SkipTranscoder}) {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t d_in = 1 + rng.below(8);
      const std::size_t d_out = arch == Arch::SAE ? d_in : 1 + rng.below(8);
      const std::size_t n = 1 + rng.below(16);
      const std::size_t k = 1 + rng.below(std::min<std::size_t>(4, n));
      const auto c = oracle::random_coder<double>({d_in, d_out, n, k, arch, 0}, rng.next_u64());
      const auto rows = oracle::random_rows(4, d_in, d_out, rng.next_u64());
      worst = std::max(worst, max_grad_error(c, rows));
      ++coders;
    }
  }
  return {worst < kGradRelTol, std::to_string(coders) + " coders, max rel err " + num(worst)};
}

Outcome constant_at_init() {
  Rng rng(7);
  std::size_t bad = 0, total = 0;
  for (Arch arch : {Arch::SAE, Arch::Transcoder, Arch::SkipTranscoder}) {
    const std::size_t d_in = 12, d_out = arch == Arch::SAE ? 12 : 9;
    std::vector<float> mean(d_out);
    for (auto& m : mean) m = float(5.0 * rng.normal());
    const auto c = SparseCoder::init({d_in, d_out, 48, 6, arch, rng.next_u64()}, mean);
    for (int i = 0; i < 1000; ++i) {
      std::vector<float> x(d_in);
      for (auto& v : x) v = float(100.0 * rng.normal());
      bad += c.forward(x) != mean;
      ++total;
    }
  }
  return {bad == 0, std::to_string(total) + " inputs, " + std::to_string(bad) + " differ from b2"};
}

Outcome topk_oracle() {
  Rng rng(99);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.below(128);
    const std::size_t k = 1 + rng.below(n);
    const std::size_t d = 1 + rng.below(6);
    auto c = oracle::random_coder<float>({d, d, n, k, Arch::Transcoder, 0}, rng.next_u64());
    if (trial % 3 == 0) {
      for (float& v : c.encoder.flat()) v = std::round(v * 2.f) / 2.f;
      for (float& v : c.encoder_bias) v = std::round(v);
    }
    std::vector<float> x(d);
    for (auto& v : x) v = float(trial % 3 == 0 ? std::round(rng.normal()) : rng.normal());
    const auto code = c.encode(x);
    const auto pre = oracle::dense_preacts(c, x);
    const auto want = oracle::sort_and_take(std::vector<double>(pre.begin(), pre.end()), k);
    bool ok = code.indices == want;
    for (std::size_t s = 0; ok && s < code.size(); ++s) ok = code.values[s] == pre[code.indices[s]];
    mismatches += !ok;
  }
  return {mismatches == 0, "10000 encodes, " + std::to_string(mismatches) + " mismatches"};
}

// Relative error is taken against max(1, |x|, |f(x)|, |g(x)|) per coordinate.
Outcome residual_conversion() {
  Rng rng(31);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t d = 1 + rng.below(16);
    const auto c = oracle::random_coder<float>({d, d, 4 * d, 1 + rng.below(4 * d), Arch::SkipTranscoder, 0}, rng.next_u64());
    const auto r = convert_to_residual(c);
    std::vector<float> x(d);
    for (auto& v : x) v = float(rng.normal());
    const auto a = c.forward(x);
    const auto b = r.forward(x);
    for (std::size_t o = 0; o < d; ++o) {
      const double scale = std::max({1.0, std::abs(double(x[o])), std::abs(double(a[o])), std::abs(double(b[o]))});
      worst = std::max(worst, std::abs((double(b[o]) - double(a[o])) - double(x[o])) / scale);
    }
  }
  return {worst <= kResidualRelTol, "1000 cases, max rel err " + num(worst)};
}

Outcome affine_recovery() {
  const auto dict = make_affine_dictionary(32, 32, 1.0, 7);
  const auto rows = gen_planted_rows(dict, 20000, InputDist::Gaussian, 8);
  RowSpanSource src(rows);
  TrainConfig tc;
  tc.n_steps = 2000;
  tc.learning_rate = kAffineLr;
  const auto res = train(SparseCoder::init({32, 32, 64, 8, Arch::SkipTranscoder, 1}, estimate_target_mean(src)), src, tc);
  const double f = fvu(res.coder, src).fvu;
  double num2 = 0.0, den2 = 0.0;
  for (std::size_t i = 0; i < dict.linear->flat().size(); ++i) {
    const double a = dict.linear->flat()[i];
    num2 += (res.coder.skip->flat()[i] - a) * (res.coder.skip->flat()[i] - a);
    den2 += a * a;
  }
  const double rel = std::sqrt(num2 / den2);
  return {f < kAffineFvu && rel < kAffineSkipRel, "fvu " + num(f) + ", |W_skip - A|/|A| " + num(rel)};
}

Outcome skip_beats_plain() {
  int wins = 0;
  std::string detail;
  for (int s = 0; s < 10; ++s) {
    PlantedOptions po;
    po.n_features = 32;
    po.d_in = 32;
    po.d_out = 32;
    po.feature_prob = 0.1;
    po.linear_scale = 1.0;
    po.seed = 100 + s;
    const auto dict = make_planted_dictionary(po);
    const auto rows = gen_planted_rows(dict, 20000, InputDist::Gaussian, 200 + s);
    const auto held = gen_planted_rows(dict, 5000, InputDist::Gaussian, 400 + s);
    RowSpanSource src(rows), hsrc(held);
    const auto mean = estimate_target_mean(src);
    double f[2];
    for (int a = 0; a < 2; ++a) {
      TrainConfig tc;
      tc.n_steps = 1000;
      const auto res = train(SparseCoder::init({32, 32, 64, 8, a ? Arch::SkipTranscoder : Arch::Transcoder,
                                                std::uint64_t(3 + s)}, mean), src, tc);
      f[a] = fvu(res.coder, hsrc).fvu;
    }
    wins += f[1] < f[0];
    if (s == 0) detail = "seed 0: skip " + num(f[1]) + " vs plain " + num(f[0]);
  }
  return {wins >= kSkipWinsNeeded, std::to_string(wins) + "/10 wins; " + detail};
}

Outcome patching() {
  // Coder identical to the MLP: large positive input bias keeps the ReLU linear.
  ToyLMConfig small;
  small.seed = 21;
  auto exact_model = ToyLM::init(small);
  for (auto& b : exact_model.mlp_in_bias) b += 100.f;
  const auto exact_corpus = gen_toy_corpus(exact_model, 2000, 22);
  const std::size_t d = small.d_model, h = small.d_mlp;
  auto copy = SparseCoder::init({d, d, h, h, Arch::Transcoder, 0}, std::vector<float>(d, 0.f));
  copy.encoder = exact_model.mlp_in;
  copy.encoder_bias = exact_model.mlp_in_bias;
  copy.decoder = exact_model.mlp_out;
  copy.decoder_bias = exact_model.mlp_out_bias;
  const double exact = patch_delta_ce(exact_model, copy, exact_corpus.tokens).delta_ce;

  ToyLMConfig mc;
  mc.seed = 11;
  const auto model = ToyLM::init(mc);
  const auto corpus = gen_toy_corpus(model, 20000, 12);
  const auto eval = gen_toy_corpus(model, 5000, 13);
  RowSpanSource src(corpus.rows);
  const auto mean = estimate_target_mean(src);
  TrainConfig tc;
  tc.n_steps = 2000;
  double init_dce = 0.0, dce[2] = {0.0, 0.0};
  const std::size_t ks[2] = {32, 128};
  for (int i = 0; i < 2; ++i) {
    const auto init = SparseCoder::init({32, 32, 256, ks[i], Arch::Transcoder, 9}, mean);
    if (i == 0) init_dce = patch_delta_ce(model, init, eval.tokens).delta_ce;
    dce[i] = patch_delta_ce(model, train(init, src, tc).coder, eval.tokens).delta_ce;
  }
  const bool ok = std::abs(exact) < kPatchExactTol && init_dce > 0.0 && dce[1] <= dce[0];
  return {ok, "exact " + num(exact) + ", init " + num(init_dce) + ", k32 " + num(dce[0]) + ", k128 " + num(dce[1])};
}

Outcome dictionary_recovery() {
  PlantedOptions po;
  po.n_features = 16;
  po.d_in = 32;
  po.d_out = 32;
  po.seed = 300;
  const auto dict = make_planted_dictionary(po);
  const auto rows = gen_planted_rows(dict, 50000, InputDist::Gaussian, 301);
  RowSpanSource src(rows);
  TrainConfig tc;
  tc.n_steps = 3000;
  const auto res = train(SparseCoder::init({32, 32, 64, 8, Arch::SkipTranscoder, 5}, estimate_target_mean(src)), src, tc);
  const double score = recovery_score(res.coder, dict).score;
  return {score > kRecoveryMin, "mean max |cos| " + num(score)};
}

Outcome metric_oracles() {
  std::vector<std::string> failed;
  // Mean predictor.
  const auto rows = oracle::random_rows(1000, 6, 5, 17);
  RowSpanSource src(rows);
  const auto init = SparseCoder::init({6, 5, 12, 3, Arch::Transcoder, 0}, estimate_target_mean(src));
  const double f = fvu(init, src).fvu;
  if (std::abs(f - 1.0) > kMeanPredictorTol) failed.push_back("fvu " + num(f));

  // 10-token trace: latent 0 fires 2, 1, 3 on three tokens.
  LatentStatsAccumulator acc(2);
  for (int t = 0; t < 10; ++t) {
    SparseCode<float> code;
    if (t == 1) code = {{0}, {2.f}};
    if (t == 4) code = {{0}, {1.f}};
    if (t == 8) code = {{0}, {3.f}};
    acc.add(code);
  }
  const auto ls = acc.finish();
  if (ls.latents[0].active_count != 3 || ls.latents[0].density != 3.0 / 10.0 ||
      ls.latents[0].mean_activation != 6.0 / 10.0 || ls.latents[0].cah != 2.0 || !ls.latents[1].dead) {
    failed.push_back("density/cah");
  }

  std::vector<JudgedExample> perfect, constant;
  for (int i = 0; i < 20; ++i) {
    perfect.push_back({std::to_string(i), i % 2 == 0, i % 2 == 0});
    constant.push_back({std::to_string(i), i % 3 == 0, true});
  }
  if (detection_score(perfect) != 1.0) failed.push_back("perfect judge");
  if (detection_score(constant) != 0.5) failed.push_back("constant judge");

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng.below(500);
    std::vector<float> trace(n, 0.f);
    for (auto& v : trace)
      if (rng.uniform() < 0.3) v = float(std::round(rng.uniform(0.0, 5.0) * 8.0) / 8.0 + 0.125);
    const std::size_t q = 10;
    const auto bins = quantile_bins(trace, q);
    std::vector<std::pair<float, std::uint64_t>> pos;
    for (std::uint64_t i = 0; i < n; ++i)
      if (trace[i] > 0.f) pos.emplace_back(trace[i], i);
    std::sort(pos.begin(), pos.end());
    const std::size_t nb = std::min(q, pos.size());
    bool ok = bins.size() == nb;
    for (std::size_t b = 0; ok && b < nb; ++b) {
      const std::size_t lo = b * pos.size() / nb, hi = (b + 1) * pos.size() / nb;
      ok = bins[b].size() == hi - lo;
      for (std::size_t i = 0; ok && i < bins[b].size(); ++i) ok = bins[b][i] == pos[lo + i].second;
    }
    if (!ok) {
      failed.push_back("quantile bins trial " + std::to_string(trial));
      break;
    }
  }
  std::string detail = failed.empty() ? "fvu " + num(f) + ", trace, judges, 200 bin trials" : "failed:";
  for (const auto& s : failed) detail += " " + s;
  return {failed.empty(), detail};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + SPARSECODER_CLI_PATH + "' " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  oracle::TempDir dir("accept");
  const std::vector<std::string> reports{"fvu.json", "density.json", "patch.json", "probe.json", "recovery.json"};
  for (const char* tag : {"a", "b"}) {
    const std::string root = (dir / tag).string();
    const std::string toy = root + "/toy", planted = root + "/planted";
    int rc = 0;
    rc |= run_cli("synth --kind planted --rows 5000 --d-in 16 --d-out 16 --n-features 8 --label-feature 0 --seed 5 --out " + planted);
    rc |= run_cli("train --data " + planted + "/data.shard --arch skip --k 8 --n-latents 32 --steps 300 --seed 5 --out " + planted + "/runs");
    rc |= run_cli("eval --checkpoint " + planted + "/runs/skip_k8_n32/coder.ckpt --data " + planted + "/data.shard --labels " +
                  planted + "/labels.shard --dictionary " + planted + "/dictionary.ckpt --all --seed 5 --out " + root + "/eval");
    rc |= run_cli("synth --kind toy --tokens 3000 --vocab 32 --d-model 16 --d-mlp 32 --seed 6 --out " + toy);
    rc |= run_cli("train --data " + toy + "/data.shard --arch transcoder --k 8 --n-latents 64 --steps 300 --seed 6 --out " + toy + "/runs");
    rc |= run_cli("eval --checkpoint " + toy + "/runs/transcoder_k8_n64/coder.ckpt --model " + toy + "/toylm.ckpt --tokens " +
                  toy + "/tokens.toks --patch --out " + root + "/eval");
    if (rc != 0) return {false, "pipeline run " + std::string(tag) + " failed"};
  }
  for (const auto& r : reports) {
    const auto a = oracle::file_bytes(dir / ("a/eval/" + r));
    const auto b = oracle::file_bytes(dir / ("b/eval/" + r));
    if (a.empty() || a != b) return {false, r + " differs"};
  }
  return {true, std::to_string(reports.size()) + " reports byte-identical across two runs"};
}

}  // namespace

int main() {
  check("gradient-oracle", gradient_oracle);
  check("constant-at-init", constant_at_init);
  check("topk-oracle", topk_oracle);
  check("residual-conversion", residual_conversion);
  check("affine-recovery", affine_recovery);
  check("skip-beats-plain", skip_beats_plain);
  check("patching-sanity", patching);
  check("dictionary-recovery", dictionary_recovery);
  check("metric-oracles", metric_oracles);
  check("determinism", determinism);
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
