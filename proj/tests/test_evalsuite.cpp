#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "sparsecoder/evalsuite.hpp"

using namespace sparsecoder;
using oracle::TempDir;

namespace {

std::vector<ShardRow> rows_from_coder(const SparseCoder& c, std::size_t n, std::uint64_t seed) {
  auto rows = oracle::random_rows(n, c.d_in(), c.d_out(), seed);
  for (auto& r : rows) r.target = c.forward(r.input);
  return rows;
}

// Transcoder whose weights are the toy model's MLP. With every latent kept and
// pre-activations forced positive it computes the MLP exactly.
SparseCoder copy_of_mlp(const ToyLM& m) {
  const std::size_t d = m.d_model(), h = m.config.d_mlp;
  auto c = SparseCoder::init({d, d, h, h, Arch::Transcoder, 0}, std::vector<float>(d, 0.f));
  c.encoder = m.mlp_in;
  c.encoder_bias = m.mlp_in_bias;
  c.decoder = m.mlp_out;
  c.decoder_bias = m.mlp_out_bias;
  return c;
}

std::vector<JudgedExample> judged(std::size_t pos, std::size_t tp, std::size_t neg, std::size_t tn) {
  std::vector<JudgedExample> v;
  for (std::size_t i = 0; i < pos; ++i) v.push_back({"p" + std::to_string(i), true, i < tp});
  for (std::size_t i = 0; i < neg; ++i) v.push_back({"n" + std::to_string(i), false, i >= tn});
  return v;
}

}  // namespace

TEST_CASE("fvu: perfect predictor, init coder and oracle", "[fvu]") {
  const auto c = oracle::random_coder<float>({4, 3, 8, 2, Arch::SkipTranscoder, 0}, 1);
  const auto rows = rows_from_coder(c, 200, 2);
  RowSpanSource src(rows);
  CHECK(fvu(c, src).fvu == 0.0);

  const auto noisy = oracle::random_rows(500, 4, 3, 3);
  RowSpanSource nsrc(noisy);
  const auto init = SparseCoder::init({4, 3, 8, 2, Arch::Transcoder, 0}, estimate_target_mean(nsrc));
  const auto rep = fvu(init, nsrc);
  CHECK(std::abs(rep.fvu - 1.0) < 1e-6);
  CHECK(rep.n_rows == 500);

  for (int trial = 0; trial < 20; ++trial) {
    const auto rc = oracle::random_coder<float>({4, 3, 8, 2, Arch::SkipTranscoder, 0}, 10 + trial);
    const auto r = fvu(rc, nsrc);
    const double want = oracle::two_pass_fvu(rc, noisy);
    CHECK(std::abs(r.fvu - want) <= 1e-10 * std::max(1.0, want));
    CHECK(r.variance_explained_pct == Catch::Approx(100.0 * (1.0 - r.fvu)));
  }
}

TEST_CASE("fvu rejects degenerate data", "[fvu]") {
  const auto c = SparseCoder::init({2, 2, 4, 1, Arch::Transcoder, 0}, std::vector<float>(2, 0.f));
  std::vector<ShardRow> flat(10, ShardRow{{1.f, 2.f}, {3.f, 3.f}});
  RowSpanSource src(flat);
  CHECK_THROWS_WITH(fvu(c, src), Catch::Matchers::ContainsSubstring("degenerate variance"));
  std::vector<ShardRow> one(1, ShardRow{{1.f, 2.f}, {3.f, 3.f}});
  RowSpanSource one_src(one);
  CHECK_THROWS(fvu(c, one_src));
}

TEST_CASE("patching the exact MLP leaves cross-entropy unchanged", "[patch]") {
  ToyLMConfig cfg;
  cfg.vocab = 16;
  cfg.d_model = 8;
  cfg.d_mlp = 12;
  cfg.seed = 3;
  auto model = ToyLM::init(cfg);
  for (auto& b : model.mlp_in_bias) b += 100.f;
  const auto corpus = gen_toy_corpus(model, 300, 4);

  const auto rep = patch_delta_ce(model, copy_of_mlp(model), corpus.tokens);
  CHECK(rep.delta_ce == 0.0);
  CHECK(rep.n_predictions == 299);

  // An identity SAE on the block output is also exact.
  auto sae = SparseCoder::init({8, 8, 8, 8, Arch::SAE, 0}, std::vector<float>(8, 0.f));
  sae.encoder.fill(0.f);
  for (std::size_t i = 0; i < 8; ++i) {
    sae.encoder(i, i) = 1.f;
    sae.decoder(i, i) = 1.f;
  }
  CHECK(patch_delta_ce(model, sae, corpus.tokens).delta_ce == 0.0);
}

TEST_CASE("patching an untrained coder raises cross-entropy", "[patch]") {
  ToyLMConfig cfg;
  cfg.vocab = 16;
  cfg.d_model = 8;
  cfg.d_mlp = 16;
  cfg.seed = 5;
  const auto model = ToyLM::init(cfg);
  const auto corpus = gen_toy_corpus(model, 2000, 6);
  RowSpanSource src(corpus.rows);
  const auto init = SparseCoder::init({8, 8, 16, 4, Arch::Transcoder, 0}, estimate_target_mean(src));
  const auto rep = patch_delta_ce(model, init, corpus.tokens);
  CHECK(rep.delta_ce > 0.0);
  CHECK(rep.delta_ce_pct == Catch::Approx(100.0 * rep.delta_ce / rep.ce_base));

  CHECK_THROWS_WITH(patch_delta_ce(model, init, std::vector<std::uint32_t>{1}),
                    Catch::Matchers::ContainsSubstring("empty corpus"));
}

TEST_CASE("density statistics on a hand trace", "[density]") {
  LatentStatsAccumulator acc(3);
  const std::vector<std::pair<std::size_t, float>> fires{{1, 2.f}, {4, 1.f}, {8, 3.f}};
  for (std::size_t t = 0; t < 10; ++t) {
    SparseCode<float> code;
    for (const auto& [pos, v] : fires) {
      if (pos == t) {
        code.indices = {0};
        code.values = {v};
      }
    }
    // Latent 2 is selected on every token but always at zero.
    code.indices.push_back(2);
    code.values.push_back(0.f);
    acc.add(code);
  }
  const auto r = acc.finish();
  CHECK(r.n_tokens == 10);
  CHECK(r.latents[0].density == Catch::Approx(0.3));
  CHECK(r.latents[0].mean_activation == Catch::Approx(0.6));
  CHECK(r.latents[0].cah == Catch::Approx(2.0));
  CHECK_FALSE(r.latents[0].dead);
  CHECK(r.latents[1].dead);
  CHECK(r.latents[1].density == 0.0);
  CHECK(r.latents[2].dead);
  CHECK(r.dead_count == 2);
  CHECK(r.histogram[37] == 1);
  std::uint64_t total = r.dead_count;
  for (auto h : r.histogram) total += h;
  CHECK(total == 3);
}

TEST_CASE("density bins", "[density]") {
  CHECK(density_bin(1.0) == 39);
  CHECK(density_bin(1e-7) == 0);
  CHECK(density_bin(1e-9) == 0);
  CHECK(density_bin(0.3) == 37);
  CHECK(density_bin(1e-3) == 22);
}

TEST_CASE("latent_stats matches a brute-force recount", "[density][property]") {
  const CoderConfig cfg{5, 5, 20, 3, Arch::Transcoder, 0};
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = oracle::random_coder<float>(cfg, 300 + trial);
    const auto rows = oracle::random_rows(400, 5, 5, 400 + trial);
    RowSpanSource src(rows);
    const auto rep = latent_stats(c, src);
    std::vector<std::uint64_t> count(20, 0);
    std::vector<double> sum(20, 0.0);
    for (const auto& r : rows) {
      const auto pre = oracle::dense_preacts(c, r.input);
      for (auto j : oracle::sort_and_take(std::vector<double>(pre.begin(), pre.end()), 3)) {
        if (pre[j] != 0.f) {
          ++count[j];
          sum[j] += pre[j];
        }
      }
    }
    std::uint64_t hist_total = rep.dead_count;
    for (auto h : rep.histogram) hist_total += h;
    CHECK(hist_total == 20);
    for (std::size_t j = 0; j < 20; ++j) {
      CHECK(rep.latents[j].active_count == count[j]);
      CHECK(rep.latents[j].activation_sum == Catch::Approx(sum[j]).margin(1e-9));
      CHECK(rep.latents[j].dead == (count[j] == 0));
    }
  }
}

TEST_CASE("quantile bins follow sorted order", "[sample][property]") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng.below(300);
    std::vector<float> trace(n, 0.f);
    for (auto& v : trace) {
      if (rng.uniform() < 0.4) v = static_cast<float>(std::round(rng.uniform(0.0, 8.0) * 4.0) / 4.0 + 0.25);
    }
    const std::size_t q = 1 + rng.below(12);
    const auto bins = quantile_bins(trace, q);

    std::vector<std::pair<float, std::uint64_t>> pos;
    for (std::uint64_t i = 0; i < n; ++i)
      if (trace[i] > 0.f) pos.emplace_back(trace[i], i);
    std::sort(pos.begin(), pos.end());
    const std::size_t nb = std::min(q, pos.size());
    REQUIRE(bins.size() == nb);
    std::size_t flat = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t lo = b * pos.size() / nb, hi = (b + 1) * pos.size() / nb;
      REQUIRE(bins[b].size() == hi - lo);
      for (std::size_t i = 0; i < bins[b].size(); ++i) CHECK(bins[b][i] == pos[lo + i].second);
      if (b + 1 < nb && !bins[b + 1].empty()) CHECK(trace[bins[b].back()] <= trace[bins[b + 1].front()]);
      flat += bins[b].size();
    }
    CHECK(flat == pos.size());
  }
}

TEST_CASE("sampling with exactly one activation per bin", "[sample]") {
  const std::size_t n = 400;
  std::vector<std::uint32_t> tokens(n);
  for (std::size_t i = 0; i < n; ++i) tokens[i] = std::uint32_t(i % 7);
  std::vector<float> trace(n, 0.f);
  for (int i = 0; i < 10; ++i) trace[30 + 37 * i] = float(10 - i);
  SampleOptions opt;
  const auto ex = sample_latent_examples(tokens, trace, 3, opt);
  CHECK(ex.n_positive == 10);
  CHECK_FALSE(ex.degraded);
  REQUIRE(ex.bins.size() == 10);
  for (std::size_t b = 0; b < 10; ++b) {
    REQUIRE(ex.bins[b].size() == 1);
    const auto& w = ex.bins[b][0];
    CHECK(trace[w.record_position] == float(b + 1));
    CHECK(ex.bin_ranges[b].first == float(b + 1));
    CHECK(w.bin == int(b));
    if (!w.padded) {
      CHECK(w.tokens.size() == 32);
      CHECK(w.record_position - w.start == 24);
    }
    for (std::size_t i = 0; i < w.tokens.size(); ++i) CHECK(w.tokens[i] == tokens[w.start + i]);
  }
  for (const auto& w : ex.non_activating) {
    CHECK(w.tokens.size() == 32);
    for (auto a : w.active) CHECK(a == 0);
  }

  const auto again = sample_latent_examples(tokens, trace, 3, opt);
  CHECK(to_json(QuantileExampleSet{opt, {again}}).dump() == to_json(QuantileExampleSet{opt, {ex}}).dump());
}

TEST_CASE("sampling edge cases", "[sample]") {
  std::vector<std::uint32_t> tokens(100, 1);
  std::vector<float> trace(100, 0.f);
  SampleOptions opt;
  CHECK_THROWS_WITH(sample_latent_examples(tokens, trace, 9, opt), Catch::Matchers::ContainsSubstring("dead latent 9"));

  trace[2] = 1.f;
  trace[50] = 2.f;
  trace[99] = 3.f;
  const auto ex = sample_latent_examples(tokens, trace, 0, opt);
  CHECK(ex.degraded);
  CHECK(ex.bins.size() == 3);
  CHECK(ex.bins[0][0].padded);
  CHECK(ex.bins[0][0].start == 0);
  CHECK(ex.bins[2][0].padded);
  CHECK(ex.bins[2][0].start + ex.bins[2][0].tokens.size() == 100);
  CHECK_FALSE(ex.bins[1][0].padded);
}

TEST_CASE("traces agree with encode", "[sample]") {
  const auto c = oracle::random_coder<float>({4, 4, 10, 3, Arch::Transcoder, 0}, 5);
  const auto rows = oracle::random_rows(50, 4, 4, 6);
  RowSpanSource src(rows);
  const std::vector<std::uint32_t> lat{0, 4, 9};
  const auto traces = latent_activation_traces(c, src, lat);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto pre = oracle::dense_preacts(c, rows[t].input);
    const auto sel = oracle::sort_and_take(std::vector<double>(pre.begin(), pre.end()), 3);
    for (std::size_t l = 0; l < lat.size(); ++l) {
      const bool on = std::find(sel.begin(), sel.end(), lat[l]) != sel.end();
      CHECK(traces[l][t] == (on ? pre[lat[l]] : 0.f));
    }
  }
}

TEST_CASE("detection and fuzzing scores", "[scores]") {
  CHECK(detection_score(judged(10, 10, 10, 10)) == 1.0);
  // A judge that always answers yes.
  CHECK(detection_score(judged(10, 10, 30, 0)) == 0.5);
  CHECK(detection_score(judged(50, 40, 50, 45)) == Catch::Approx(0.85));
  CHECK_THROWS_WITH(detection_score(judged(10, 5, 0, 0)), Catch::Matchers::ContainsSubstring("both classes"));
  CHECK(fuzzing_score(judged(10, 7, 0, 0)) == Catch::Approx(0.7));
  CHECK(fuzzing_score(judged(0, 0, 4, 1)) == Catch::Approx(0.25));

  auto v = judged(13, 9, 21, 5);
  auto flipped = v;
  for (auto& e : flipped) {
    e.ground_truth = !e.ground_truth;
    e.judged = !e.judged;
  }
  CHECK(detection_score(v) == Catch::Approx(detection_score(flipped)));
}

TEST_CASE("judged file parsing", "[scores]") {
  TempDir dir("judged");
  {
    std::ofstream f(dir / "j.jsonl");
    f << R"({"id": "a", "ground_truth": true, "judged": true})" << "\n\n"
      << R"({"id": 7, "ground_truth": false, "judged": true, "task": "detection"})" << "\n"
      << R"({"id": "c", "ground_truth": true, "judged": false, "task": "fuzzing"})" << "\n";
  }
  const auto j = read_judged_file(dir / "j.jsonl");
  REQUIRE(j.detection.size() == 2);
  CHECK(j.detection[1].id == "7");
  CHECK(j.fuzzing.size() == 1);
  CHECK(detection_score(j.detection) == 0.5);

  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"id": "a", "ground_truth": true, "judged": true})" << "\n" << "{not json\n";
  }
  CHECK_THROWS_WITH(read_judged_file(dir / "bad.jsonl"), Catch::Matchers::ContainsSubstring("bad.jsonl:2"));
  {
    std::ofstream f(dir / "task.jsonl");
    f << R"({"id": "a", "ground_truth": true, "judged": true, "task": "ranking"})" << "\n";
  }
  CHECK_THROWS_WITH(read_judged_file(dir / "task.jsonl"), Catch::Matchers::ContainsSubstring("unknown task"));
}

TEST_CASE("probe split is a seeded partition", "[probe]") {
  const auto a = probe_split(100, 0.8, 3);
  const auto b = probe_split(100, 0.8, 3);
  CHECK(a.train == b.train);
  CHECK(a.train.size() == 80);
  CHECK(a.test.size() == 20);
  std::vector<std::size_t> all(a.train);
  all.insert(all.end(), a.test.begin(), a.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(all[i] == i);
  CHECK(probe_split(100, 0.8, 4).train != a.train);
}

TEST_CASE("sparse probe on a separable latent", "[probe]") {
  // Latents read +x0, +x1, -x0, -x1; the label is the sign of x0.
  auto c = SparseCoder::init({2, 2, 4, 4, Arch::Transcoder, 0}, std::vector<float>(2, 0.f));
  c.encoder.fill(0.f);
  c.encoder(0, 0) = 1.f;
  c.encoder(1, 1) = 1.f;
  c.encoder(2, 0) = -1.f;
  c.encoder(3, 1) = -1.f;
  Rng rng(2);
  std::vector<ShardRow> rows;
  for (int i = 0; i < 500; ++i) {
    const bool y = rng.uniform() < 0.5;
    rows.push_back({{float((y ? 1.0 : -1.0) + 0.1 * rng.normal()), float(rng.normal())}, {y ? 1.f : 0.f}});
  }
  ProbeOptions opt;
  opt.m = 1;
  const auto rep = sparse_probe(c, rows, opt);
  REQUIRE(rep.selected.size() == 1);
  CHECK((rep.selected[0] == 0 || rep.selected[0] == 2));
  CHECK(rep.test_accuracy == 1.0);
  CHECK(rep.n_test == 100);
}

TEST_CASE("sparse probe on random labels is near chance", "[probe]") {
  const auto c = oracle::random_coder<float>({8, 8, 32, 8, Arch::Transcoder, 0}, 3);
  auto rows = oracle::random_rows(2000, 8, 1, 4);
  Rng rng(5);
  for (auto& r : rows) r.target[0] = rng.uniform() < 0.5 ? 1.f : 0.f;
  ProbeOptions opt;
  opt.m = 4;
  const auto rep = sparse_probe(c, rows, opt);
  CHECK(rep.n_test == 400);
  CHECK(std::abs(rep.test_accuracy - 0.5) <= 0.05);

  for (auto& r : rows) r.target[0] = 1.f;
  CHECK_THROWS_WITH(sparse_probe(c, rows, opt), Catch::Matchers::ContainsSubstring("both classes"));
}

TEST_CASE("class separation statistic", "[probe]") {
  Matrix<double> f(4, 2);
  f(0, 0) = 0; f(1, 0) = 2; f(2, 0) = 4; f(3, 0) = 6;
  f(0, 1) = 1; f(1, 1) = 1; f(2, 1) = 1; f(3, 1) = 1;
  const std::vector<std::uint8_t> labels{0, 0, 1, 1};
  const std::vector<std::size_t> rows{0, 1, 2, 3};
  const auto s = class_separation(f, labels, rows);
  // Means 1 and 5, pooled sd sqrt((1+1+1+1)/2).
  CHECK(s[0] == Catch::Approx(4.0 / std::sqrt(2.0)));
  CHECK(s[1] == 0.0);
}

TEST_CASE("report json is stable", "[report]") {
  FvuReport r{0.25, 75.0, 0.5, 2.0, 10};
  const auto j = to_json(r);
  CHECK(j["schema_version"] == kReportSchemaVersion);
  CHECK(j["report"] == "fvu");
  CHECK(j.dump() == to_json(r).dump());
}
