// sparsecoder: generate data, train coders, evaluate them, emit reports.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sparsecoder/sparsecoder.hpp"

namespace sc = sparsecoder;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void usage(const std::string& msg) { throw UsageError(msg); }

void emit_error(const char* kind, const std::string& msg) {
  std::cerr << json{{"error", kind}, {"message", msg}}.dump() << "\n";
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) sc::fail("cannot open '" + p.string() + "' for writing");
  out << s;
  if (!out) sc::fail("write failed on '" + p.string() + "'");
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// Shared state for one invocation: where outputs go and what to record.
struct Run {
  CLI::App* app = nullptr;
  CLI::App* sub = nullptr;
  std::vector<std::string> argv;
  std::string out;
  std::uint64_t seed = 0;

  fs::path out_dir() const {
    fs::path dir = out;
    if (dir.empty()) {
      const char* env = std::getenv("SPARSECODER_OUT");
      dir = env && *env ? fs::path(env) : fs::path(".");
    }
    fs::create_directories(dir);
    return dir;
  }

  // The manifest records everything needed to re-run the command; the
  // timestamp lives here and nowhere else.
  void manifest(const fs::path& dir, const std::vector<std::string>& outputs, json extra = json::object()) const {
    json m;
    m["command"] = sub->get_name();
    m["argv"] = argv;
    m["config"] = "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
    m["seed"] = seed;
    m["versions"] = {{"sparsecoder", sc::kVersion},
                     {"report_schema", sc::kReportSchemaVersion},
                     {"compiler", __VERSION__}};
    m["outputs"] = outputs;
    m["created_utc"] = utc_now();
    for (auto& [k, v] : extra.items()) m[k] = v;
    write_json(dir / ("manifest." + sub->get_name() + ".json"), m);
  }
};

json coder_json(const sc::SparseCoder& c) { return sc::coder_config_to_json(c.config); }

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string kind;
  std::uint64_t rows = 10000;
  std::size_t d_in = 32;
  std::size_t d_out = 32;
  std::size_t n_features = 16;
  double feature_prob = 0.1;
  double linear_scale = 1.0;
  double offset_scale = 1.0;
  std::string input_dist = "gaussian";
  long label_feature = -1;
  std::uint64_t dict_seed = 0;
  bool dict_seed_set = false;
  std::size_t tokens = 10000;
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t d_mlp = 64;
  double context_mix = 0.5;
  std::string model;
};

void cmd_synth(Run& run, const SynthOpts& o) {
  const fs::path dir = run.out_dir();
  std::vector<std::string> outputs;
  const std::uint64_t dict_seed = o.dict_seed_set ? o.dict_seed : run.seed;
  if (o.kind == "planted" || o.kind == "affine") {
    sc::PlantedDictionary dict;
    if (o.kind == "planted") {
      sc::PlantedOptions p;
      p.n_features = o.n_features;
      p.d_in = o.d_in;
      p.d_out = o.d_out;
      p.feature_prob = o.feature_prob;
      p.linear_scale = o.linear_scale;
      p.offset_scale = o.offset_scale;
      p.seed = dict_seed;
      dict = sc::make_planted_dictionary(p);
    } else {
      dict = sc::make_affine_dictionary(o.d_in, o.d_out, o.linear_scale, dict_seed);
    }
    const auto dist = sc::parse_input_dist(o.input_dist);
    if (o.rows == 0) sc::fail("zero rows");
    sc::gen_planted(dict, o.rows, dist, run.seed, dir / "data.shard");
    sc::write_archive(sc::planted_archive(dict), dir / "dictionary.ckpt");
    outputs = {"data.shard", "dictionary.ckpt"};
    if (o.label_feature >= 0) {
      const auto f = static_cast<std::size_t>(o.label_feature);
      if (f >= dict.n_features()) usage("--label-feature out of range");
      // Same inputs as data.shard; target is 1 when feature f is active.
      sc::PlantedGenerator gen(dict, dist, run.seed);
      sc::ShardWriter w(dir / "labels.shard", static_cast<std::uint32_t>(dict.d_in()), 1);
      std::vector<double> x(dict.d_in());
      for (std::uint64_t i = 0; i < o.rows; ++i) {
        const auto row = gen.next();
        std::copy(row.input.begin(), row.input.end(), x.begin());
        const float label = dict.feature_activations(x)[f] > 0.0 ? 1.0f : 0.0f;
        w.write(row.input, std::vector<float>{label});
      }
      w.finish();
      outputs.push_back("labels.shard");
    }
  } else if (o.kind == "toy") {
    sc::ToyLM model;
    if (!o.model.empty()) {
      model = sc::toylm_from_archive(sc::read_archive(o.model));
    } else {
      sc::ToyLMConfig cfg;
      cfg.vocab = o.vocab;
      cfg.d_model = o.d_model;
      cfg.d_mlp = o.d_mlp;
      cfg.context_mix = o.context_mix;
      cfg.seed = dict_seed;
      model = sc::ToyLM::init(cfg);
    }
    const auto corpus = sc::gen_toy_corpus(model, o.tokens, run.seed);
    sc::write_archive(sc::toylm_archive(model), dir / "toylm.ckpt");
    sc::write_tokens(corpus.tokens, static_cast<std::uint32_t>(model.vocab()), dir / "tokens.toks");
    sc::write_shard(corpus.rows, dir / "data.shard");
    outputs = {"toylm.ckpt", "tokens.toks", "data.shard"};
  } else {
    usage("unknown --kind '" + o.kind + "'");
  }
  run.manifest(dir, outputs);
  std::cout << json{{"synth", o.kind}, {"out", dir.string()}, {"outputs", outputs}}.dump() << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data;
  std::vector<std::string> arch{"skip"};
  std::vector<std::size_t> k{32};
  std::vector<std::size_t> n_latents{256};
  sc::TrainConfig cfg;
  std::uint64_t mean_rows = 100000;
};

void cmd_train(Run& run, TrainOpts o) {
  auto ds = sc::ShardDataset::open(o.data);
  const fs::path dir = run.out_dir();
  o.cfg.seed = run.seed;
  std::vector<sc::Arch> archs;
  for (const auto& a : o.arch) archs.push_back(sc::parse_arch(a));
  for (auto k : o.k)
    for (auto n : o.n_latents)
      if (k > n) usage("--k " + std::to_string(k) + " exceeds --n-latents " + std::to_string(n));

  std::vector<std::string> outputs;
  json runs = json::array();
  for (auto arch : archs) {
    // SAEs only see the target side.
    const std::size_t d_in = arch == sc::Arch::SAE ? ds.d_out() : ds.d_in();
    for (auto k : o.k) {
      for (auto n : o.n_latents) {
        const sc::CoderConfig cc{d_in, ds.d_out(), n, k, arch, run.seed};
        cc.validate();
        auto cursor = ds.cursor();
        const auto mean = sc::estimate_target_mean(cursor, o.mean_rows);
        const std::string name = std::string(sc::to_string(arch)) + "_k" + std::to_string(k) + "_n" + std::to_string(n);
        const fs::path sub = dir / name;
        fs::create_directories(sub);

        std::ostringstream log;
        sc::TrainCallbacks cb;
        cb.on_log = [&](const sc::TrainLogRecord& r) {
          log << json{{"step", r.step}, {"loss", r.loss}, {"dead", r.dead}}.dump() << "\n";
        };
        bool noticed = false;
        cb.on_notice = [&](std::string_view msg) {
          if (!noticed) std::cerr << name << ": " << msg << " (further wraps not reported)\n";
          noticed = true;
        };
        const auto res = sc::train(sc::SparseCoder::init(cc, mean), cursor, o.cfg, cb);
        sc::save_checkpoint(res.coder, res.state, sub / "coder.ckpt", o.cfg);
        write_text(sub / "loss.jsonl", log.str());
        const std::vector<std::string> files{"coder.ckpt", "loss.jsonl"};
        run.manifest(sub, files, {{"grid_point", {{"arch", std::string(sc::to_string(arch))}, {"k", k}, {"n_latents", n}}}});
        outputs.push_back(name + "/coder.ckpt");
        outputs.push_back(name + "/loss.jsonl");
        json summary{{"run", name},
                     {"final_loss", res.loss_curve.empty() ? 0.0 : res.loss_curve.back()},
                     {"dead", sc::dead_latents(res.state, o.cfg).size()}};
        std::cout << summary.dump() << "\n";
        runs.push_back(summary);
      }
    }
  }
  run.manifest(dir, outputs, {{"runs", runs}});
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string checkpoint;
  std::string data;
  std::string model;
  std::string tokens;
  std::string labels;
  std::string dictionary;
  bool fvu = false;
  bool density = false;
  bool patch = false;
  bool probe = false;
  bool recovery = false;
  bool all = false;
  std::size_t probe_m = 1;
  std::size_t probe_iterations = 1000;
  double probe_lr = 0.5;
};

json with_coder(json report, const sc::SparseCoder& c) {
  report["coder"] = coder_json(c);
  return report;
}

void cmd_eval(Run& run, EvalOpts o) {
  if (o.all) {
    o.fvu = o.density = !o.data.empty();
    o.patch = !o.model.empty() && !o.tokens.empty();
    o.probe = !o.labels.empty();
    o.recovery = !o.dictionary.empty();
  }
  if (!(o.fvu || o.density || o.patch || o.probe || o.recovery)) usage("no evaluation selected");
  if ((o.fvu || o.density) && o.data.empty()) usage("--fvu/--density need --data");
  if (o.patch && (o.model.empty() || o.tokens.empty())) usage("--patch needs --model and --tokens");
  if (o.probe && o.labels.empty()) usage("--probe needs --labels");
  if (o.recovery && o.dictionary.empty()) usage("--recovery needs --dictionary");

  const auto coder = sc::load_checkpoint(o.checkpoint).coder;
  const fs::path dir = run.out_dir();
  std::vector<std::string> outputs;
  json summary = json::object();

  if (o.fvu || o.density) {
    auto ds = sc::ShardDataset::open(o.data);
    auto cursor = ds.cursor();
    if (o.fvu) {
      const auto r = sc::fvu(coder, cursor);
      write_json(dir / "fvu.json", with_coder(sc::to_json(r), coder));
      outputs.push_back("fvu.json");
      summary["fvu"] = r.fvu;
      summary["variance_explained_pct"] = r.variance_explained_pct;
    }
    if (o.density) {
      const auto r = sc::latent_stats(coder, cursor);
      write_json(dir / "density.json", with_coder(sc::to_json(r), coder));
      outputs.push_back("density.json");
      summary["dead"] = r.dead_count;
    }
  }
  if (o.patch) {
    const auto model = sc::toylm_from_archive(sc::read_archive(o.model));
    const auto toks = sc::read_tokens(o.tokens);
    const auto r = sc::patch_delta_ce(model, coder, toks.tokens);
    write_json(dir / "patch.json", with_coder(sc::to_json(r), coder));
    outputs.push_back("patch.json");
    summary["delta_ce"] = r.delta_ce;
  }
  if (o.probe) {
    const auto rows = sc::read_all_rows(o.labels);
    sc::ProbeOptions po;
    po.m = o.probe_m;
    po.iterations = o.probe_iterations;
    po.learning_rate = o.probe_lr;
    po.seed = run.seed;
    const auto sparse = sc::sparse_probe(coder, rows, po);
    const auto base = sc::logistic_baseline(rows, po);
    json rep = with_coder(sc::to_json(sparse), coder);
    rep["baseline"] = sc::to_json(base, "baseline");
    rep["baseline"].erase("schema_version");
    write_json(dir / "probe.json", rep);
    outputs.push_back("probe.json");
    summary["probe_test_accuracy"] = sparse.test_accuracy;
    summary["baseline_test_accuracy"] = base.test_accuracy;
  }
  if (o.recovery) {
    const auto dict = sc::planted_from_archive(sc::read_archive(o.dictionary));
    const auto r = sc::recovery_score(coder, dict);
    write_json(dir / "recovery.json", with_coder({{"schema_version", sc::kReportSchemaVersion},
                                                  {"report", "recovery"},
                                                  {"score", r.score},
                                                  {"zero_columns_skipped", r.zero_columns_skipped},
                                                  {"n_features", dict.n_features()}},
                                                 coder));
    outputs.push_back("recovery.json");
    summary["recovery"] = r.score;
  }
  run.manifest(dir, outputs);
  std::cout << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------
// sample, score, convert

struct SampleCliOpts {
  std::string checkpoint;
  std::string data;
  std::string tokens;
  std::vector<std::uint32_t> latents;
  sc::SampleOptions opt;
};

void cmd_sample(Run& run, SampleCliOpts o) {
  const auto coder = sc::load_checkpoint(o.checkpoint).coder;
  auto ds = sc::ShardDataset::open(o.data);
  const auto toks = sc::read_tokens(o.tokens);
  if (ds.n_rows() != toks.tokens.size()) sc::fail("activation rows do not match token count");
  auto cursor = ds.cursor();
  const auto traces = sc::latent_activation_traces(coder, cursor, o.latents);
  o.opt.seed = run.seed;
  const auto set = sc::sample_quantile_examples(toks.tokens, traces, o.latents, o.opt);
  const fs::path dir = run.out_dir();
  write_json(dir / "examples.json", with_coder(sc::to_json(set), coder));
  run.manifest(dir, {"examples.json"});
  json summary = json::array();
  for (const auto& ex : set.latents) {
    summary.push_back({{"latent", ex.latent}, {"n_positive", ex.n_positive}, {"degraded", ex.degraded}});
  }
  std::cout << summary.dump() << "\n";
}

void cmd_score(Run& run, const std::string& judged) {
  const auto f = sc::read_judged_file(judged);
  if (f.detection.empty() && f.fuzzing.empty()) sc::fail("no judged examples");
  json rep{{"schema_version", sc::kReportSchemaVersion}, {"report", "scores"}};
  auto task = [](const std::vector<sc::JudgedExample>& v, double score) {
    const auto r = sc::class_rates(v);
    return json{{"score", score},
                {"positives", r.positives},
                {"negatives", r.negatives},
                {"true_positives", r.true_positives},
                {"true_negatives", r.true_negatives}};
  };
  rep["detection"] = f.detection.empty() ? json(nullptr) : task(f.detection, sc::detection_score(f.detection));
  rep["fuzzing"] = f.fuzzing.empty() ? json(nullptr) : task(f.fuzzing, sc::fuzzing_score(f.fuzzing));
  const fs::path dir = run.out_dir();
  write_json(dir / "scores.json", rep);
  run.manifest(dir, {"scores.json"});
  std::cout << json{{"detection", rep["detection"].is_null() ? json(nullptr) : rep["detection"]["score"]},
                    {"fuzzing", rep["fuzzing"].is_null() ? json(nullptr) : rep["fuzzing"]["score"]}}
                   .dump()
            << "\n";
}

void cmd_convert(Run& run, const std::string& checkpoint, const std::string& output) {
  const auto coder = sc::load_checkpoint(checkpoint).coder;
  const auto converted = sc::convert_to_residual(coder);
  const fs::path dir = run.out_dir();
  const fs::path out = output.empty() ? dir / "residual.ckpt" : fs::path(output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  sc::save_coder(converted, out);
  const fs::path mdir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  run.manifest(mdir, {out.filename().string()});
  std::cout << json{{"converted", out.string()}}.dump() << "\n";
}

// ---------------------------------------------------------------------------
// report --plot

std::string fmt(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << v;
  return s.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) sc::fail("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    sc::fail(p.string() + ": " + e.what());
  }
}

std::string svg_open(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string svg_text(double x, double y, const std::string& t, const char* anchor = "middle") {
  return "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" text-anchor=\"" + anchor + "\">" + t + "</text>\n";
}

std::string density_svg(const json& rep) {
  const auto counts = rep.at("histogram").at("counts").get<std::vector<std::uint64_t>>();
  const double lo = rep["histogram"]["log10_min"].get<double>();
  const double hi = rep["histogram"]["log10_max"].get<double>();
  const auto dead = rep.at("dead_count").get<std::uint64_t>();
  const int W = 640, H = 360, L = 50, R = 20, T = 30, B = 50;
  std::uint64_t top = dead;
  for (auto c : counts) top = std::max(top, c);
  if (top == 0) top = 1;
  const double pw = W - L - R, ph = H - T - B;
  const double bw = pw / double(counts.size() + 2);
  std::string s = svg_open(W, H);
  s += svg_text(W / 2.0, 18, "Latent density (log10), " + std::to_string(dead) + " dead");
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const double h = ph * double(counts[b]) / double(top);
    s += "<rect x=\"" + fmt(L + bw * double(b)) + "\" y=\"" + fmt(T + ph - h) + "\" width=\"" + fmt(bw * 0.9) +
         "\" height=\"" + fmt(h) + "\" fill=\"#4477aa\"/>\n";
  }
  const double dh = ph * double(dead) / double(top);
  s += "<rect x=\"" + fmt(L + bw * double(counts.size() + 1)) + "\" y=\"" + fmt(T + ph - dh) + "\" width=\"" +
       fmt(bw * 0.9) + "\" height=\"" + fmt(dh) + "\" fill=\"#cc6677\"/>\n";
  s += svg_text(L + bw * (double(counts.size()) + 1.45), H - B + 14, "dead");
  s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(T + ph) + "\" x2=\"" + fmt(L + pw) + "\" y2=\"" + fmt(T + ph) +
       "\" stroke=\"black\"/>\n";
  for (int e = int(lo); e <= int(hi); ++e) {
    const double x = L + bw * double(counts.size()) * (double(e) - lo) / (hi - lo);
    s += svg_text(x, H - B + 14, std::to_string(e));
  }
  s += svg_text(L + pw / 2.0, H - 12, "log10 density");
  s += svg_text(12, T + 10, std::to_string(top), "start");
  s += "</svg>\n";
  return s;
}

std::string pareto_svg(const std::vector<json>& reports, const std::string& metric) {
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (const auto& r : reports) {
    if (!r.contains(metric)) sc::fail("report lacks metric '" + metric + "'");
    const auto& c = r.at("coder");
    series[c.at("arch").get<std::string>()].emplace_back(double(c.at("k").get<std::size_t>()),
                                                         r.at(metric).get<double>());
  }
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end());
    for (auto [x, y] : pts) {
      xmin = std::min(xmin, std::log2(x));
      xmax = std::max(xmax, std::log2(x));
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const int W = 640, H = 400, L = 70, R = 120, T = 30, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double x) { return L + pw * (std::log2(x) - xmin) / (xmax - xmin); };
  auto py = [&](double y) { return T + ph * (1.0 - (y - ymin) / (ymax - ymin)); };
  const char* colors[] = {"#4477aa", "#cc6677", "#228833", "#ccbb44", "#66ccee"};
  std::string s = svg_open(W, H);
  s += svg_text(W / 2.0, 18, metric + " vs k");
  s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(T + ph) + "\" x2=\"" + fmt(L + pw) + "\" y2=\"" + fmt(T + ph) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(T) + "\" x2=\"" + fmt(L) + "\" y2=\"" + fmt(T + ph) +
       "\" stroke=\"black\"/>\n";
  std::ostringstream ylo, yhi;
  ylo.precision(4);
  yhi.precision(4);
  ylo << ymin;
  yhi << ymax;
  s += svg_text(L - 6, T + ph, ylo.str(), "end");
  s += svg_text(L - 6, T + 8, yhi.str(), "end");
  s += svg_text(L + pw / 2.0, H - 12, "k (log2 scale)");
  std::size_t idx = 0;
  for (const auto& [name, pts] : series) {
    const char* col = colors[idx % 5];
    std::string path;
    for (auto [x, y] : pts) {
      path += (path.empty() ? "M" : " L") + fmt(px(x)) + " " + fmt(py(y));
      s += "<circle cx=\"" + fmt(px(x)) + "\" cy=\"" + fmt(py(y)) + "\" r=\"3.5\" fill=\"" + col + "\"/>\n";
      s += svg_text(px(x), T + ph + 14, std::to_string(static_cast<long>(x)));
    }
    s += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + col + "\"/>\n";
    s += svg_text(L + pw + 12, T + 16 + 16 * double(idx), name, "start");
    s += "<rect x=\"" + fmt(L + pw + 2) + "\" y=\"" + fmt(T + 7 + 16 * double(idx)) + "\" width=\"8\" height=\"8\" fill=\"" +
         col + "\"/>\n";
    ++idx;
  }
  s += "</svg>\n";
  return s;
}

struct ReportOpts {
  bool plot = false;
  std::string density;
  std::vector<std::string> pareto;
  std::string metric = "fvu";
};

void cmd_report(Run& run, const ReportOpts& o) {
  if (!o.plot) usage("report needs --plot");
  if (o.density.empty() && o.pareto.empty()) usage("--plot needs --density or --pareto");
  const fs::path dir = run.out_dir();
  std::vector<std::string> outputs;
  if (!o.density.empty()) {
    write_text(dir / "density.svg", density_svg(read_json(o.density)));
    outputs.push_back("density.svg");
  }
  if (!o.pareto.empty()) {
    std::vector<json> reps;
    for (const auto& p : o.pareto) reps.push_back(read_json(p));
    write_text(dir / "pareto.svg", pareto_svg(reps, o.metric));
    outputs.push_back("pareto.svg");
  }
  run.manifest(dir, outputs);
  std::cout << json{{"outputs", outputs}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate TopK sparse coders (SAEs, transcoders, skip transcoders)."};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; keys mirror the flags, one section per subcommand");
  app.allow_config_extras(false);
  app.set_version_flag("--version", sc::kVersion);
  app.option_defaults()->always_capture_default();

  Run run;
  run.app = &app;
  run.argv.assign(argv, argv + argc);

  auto common = [&](CLI::App* s) {
    s->add_option("--out", run.out, "Output directory (default: $SPARSECODER_OUT or .)");
    s->add_option("--seed", run.seed, "Random seed");
  };

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  common(synth);
  synth->add_option("--kind", so.kind, "planted, affine or toy")->required()->check(CLI::IsMember({"planted", "affine", "toy"}));
  synth->add_option("--rows", so.rows, "Rows to generate (planted/affine)");
  synth->add_option("--d-in", so.d_in);
  synth->add_option("--d-out", so.d_out);
  synth->add_option("--n-features", so.n_features);
  synth->add_option("--feature-prob", so.feature_prob);
  synth->add_option("--linear-scale", so.linear_scale, "Scale of the linear component; 0 disables it");
  synth->add_option("--offset-scale", so.offset_scale);
  synth->add_option("--input-dist", so.input_dist, "gaussian or sparse");
  synth->add_option("--label-feature", so.label_feature, "Also write labels.shard for this feature");
  synth->add_option("--dict-seed", so.dict_seed, "Seed for the dictionary or toy model (default: --seed)")
      ->each([&](const std::string&) { so.dict_seed_set = true; });
  synth->add_option("--tokens", so.tokens, "Corpus length (toy)");
  synth->add_option("--vocab", so.vocab);
  synth->add_option("--d-model", so.d_model);
  synth->add_option("--d-mlp", so.d_mlp);
  synth->add_option("--context-mix", so.context_mix);
  synth->add_option("--model", so.model, "Reuse an existing toy model")->check(CLI::ExistingFile);

  TrainOpts to;
  auto* train = app.add_subcommand("train", "Train coders over a grid of arch, k and n-latents");
  common(train);
  train->add_option("--data", to.data, "Shard file or directory")->required()->check(CLI::ExistingPath);
  train->add_option("--arch", to.arch, "sae, transcoder or skip; comma list sweeps")->delimiter(',');
  train->add_option("--k", to.k, "Active latents; comma list sweeps")->delimiter(',');
  train->add_option("--n-latents", to.n_latents, "Dictionary size; comma list sweeps")->delimiter(',');
  train->add_option("--lr", to.cfg.learning_rate);
  train->add_option("--beta1", to.cfg.beta1);
  train->add_option("--beta2", to.cfg.beta2);
  train->add_option("--eps", to.cfg.epsilon);
  train->add_option("--batch-size", to.cfg.batch_size);
  train->add_option("--steps", to.cfg.n_steps);
  train->add_option("--dead-window", to.cfg.dead_token_window, "Tokens without firing before a latent is dead");
  train->add_option("--log-every", to.cfg.log_every);
  train->add_option("--mean-rows", to.mean_rows, "Rows used to estimate the target mean");

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", eo.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eo.data, "Shard file or directory")->check(CLI::ExistingPath);
  eval->add_option("--model", eo.model, "Toy model for --patch")->check(CLI::ExistingFile);
  eval->add_option("--tokens", eo.tokens, "Token file for --patch")->check(CLI::ExistingFile);
  eval->add_option("--labels", eo.labels, "Labeled shard for --probe")->check(CLI::ExistingFile);
  eval->add_option("--dictionary", eo.dictionary, "Planted dictionary for --recovery")->check(CLI::ExistingFile);
  eval->add_flag("--fvu", eo.fvu);
  eval->add_flag("--density", eo.density);
  eval->add_flag("--patch", eo.patch);
  eval->add_flag("--probe", eo.probe);
  eval->add_flag("--recovery", eo.recovery);
  eval->add_flag("--all", eo.all, "Every evaluation the given inputs allow");
  eval->add_option("--probe-m", eo.probe_m);
  eval->add_option("--probe-iterations", eo.probe_iterations);
  eval->add_option("--probe-lr", eo.probe_lr);

  SampleCliOpts sa;
  auto* sample = app.add_subcommand("sample", "Quantile-binned activating examples for latents");
  common(sample);
  sample->add_option("--checkpoint", sa.checkpoint)->required()->check(CLI::ExistingFile);
  sample->add_option("--data", sa.data)->required()->check(CLI::ExistingPath);
  sample->add_option("--tokens", sa.tokens)->required()->check(CLI::ExistingFile);
  sample->add_option("--latents", sa.latents)->required()->delimiter(',');
  sample->add_option("--n-quantiles", sa.opt.n_quantiles);
  sample->add_option("--per-quantile", sa.opt.n_per_quantile);
  sample->add_option("--non-activating", sa.opt.n_non_activating);
  sample->add_option("--window", sa.opt.window);
  sample->add_option("--record-offset", sa.opt.record_offset);

  std::string judged;
  auto* score = app.add_subcommand("score", "Detection and fuzzing scores from judged examples");
  common(score);
  score->add_option("--judged", judged, "Line-delimited JSON of judged examples")->required()->check(CLI::ExistingFile);

  std::string conv_in, conv_out;
  auto* convert = app.add_subcommand("convert", "Fold the identity into a skip transcoder's skip matrix");
  common(convert);
  convert->add_option("--checkpoint", conv_in)->required()->check(CLI::ExistingFile);
  convert->add_option("--output", conv_out, "Output checkpoint (default: <out>/residual.ckpt)");

  ReportOpts ro;
  auto* report = app.add_subcommand("report", "Render reports");
  common(report);
  report->add_flag("--plot", ro.plot, "Emit SVG plots");
  report->add_option("--density", ro.density, "density.json to plot")->check(CLI::ExistingFile);
  report->add_option("--pareto", ro.pareto, "Reports to plot against k")->delimiter(',')->check(CLI::ExistingFile);
  report->add_option("--metric", ro.metric, "Metric for --pareto (fvu, delta_ce, ...)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return kExitUsage;
  }

  try {
    run.sub = app.get_subcommands().front();
    if (run.sub == synth) cmd_synth(run, so);
    else if (run.sub == train) cmd_train(run, to);
    else if (run.sub == eval) cmd_eval(run, eo);
    else if (run.sub == sample) cmd_sample(run, sa);
    else if (run.sub == score) cmd_score(run, judged);
    else if (run.sub == convert) cmd_convert(run, conv_in, conv_out);
    else if (run.sub == report) cmd_report(run, ro);
  } catch (const UsageError& e) {
    emit_error("usage", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    emit_error("domain", e.what());
    return kExitDomain;
  }
  return 0;
}
