#pragma once

// Checkpoint files: a JSON meta document followed by named tensors.
//
//   offset  size      field
//   0       4         magic "SCKP"
//   4       2         version (1)
//   6       2         reserved, zero
//   8       8         meta_len
//   16      meta_len  meta, UTF-8 JSON
//   ...     4         n_tensors
//   then per tensor, in name order:
//           2         name_len, then name bytes
//           1         dtype (0 = float32, 1 = int64)
//           1         ndim, then ndim x u64 dims
//           ...       row-major payload
//
// All integers are little-endian. The format only promises a bit-exact round
// trip; readers reject anything they did not write.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "sparsecoder/coder.hpp"
#include "sparsecoder/error.hpp"
#include "sparsecoder/shardio.hpp"
#include "sparsecoder/train.hpp"

namespace sparsecoder {

using json = nlohmann::json;

struct Tensor {
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<std::int64_t>> data;

  std::uint64_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct TensorArchive {
  json meta = json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("missing tensor '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'C', 'K', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void write_archive(const TensorArchive& ar, const fs::path& path) {
  std::vector<char> buf;
  buf.insert(buf.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  le::put(buf, kCheckpointVersion);
  le::put(buf, std::uint16_t{0});
  const std::string meta = ar.meta.dump(2);
  le::put(buf, std::uint64_t(meta.size()));
  buf.insert(buf.end(), meta.begin(), meta.end());
  le::put(buf, std::uint32_t(ar.tensors.size()));
  for (const auto& [name, t] : ar.tensors) {
    require(name.size() < 65536, "tensor name too long");
    le::put(buf, std::uint16_t(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    le::put(buf, std::uint8_t(t.data.index()));
    le::put(buf, std::uint8_t(t.shape.size()));
    for (auto d : t.shape) le::put(buf, d);
    std::visit(
        [&](const auto& v) {
          require(v.size() == t.numel(), "tensor '" + name + "' payload does not match shape");
          for (auto x : v) le::put(buf, x);
        },
        t.data);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path.string() + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail("write failed on '" + path.string() + "'");
}

namespace detail {

class ByteCursor {
 public:
  ByteCursor(const std::vector<char>& buf, const fs::path& path) : buf_(buf), path_(path) {}

  void need(std::uint64_t n) const {
    if (buf_.size() - pos_ < n) fail("truncated checkpoint '" + path_.string() + "'");
  }

  template <typename T>
  T take() {
    need(sizeof(T));
    T v = le::get<T>(buf_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  template <typename T>
  std::vector<T> take_array(std::uint64_t count) {
    need(count * sizeof(T));
    std::vector<T> v(count);
    std::memcpy(v.data(), buf_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return v;
  }

  std::string take_string(std::uint64_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::vector<char>& buf_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline TensorArchive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteCursor cur(buf, path);
  if (cur.take_string(4) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    fail("bad magic");
  }
  if (cur.take<std::uint16_t>() != kCheckpointVersion) fail("unsupported checkpoint version");
  cur.take<std::uint16_t>();
  TensorArchive ar;
  ar.meta = json::parse(cur.take_string(cur.take<std::uint64_t>()));
  const auto n = cur.take<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = cur.take_string(cur.take<std::uint16_t>());
    const auto dtype = cur.take<std::uint8_t>();
    const auto ndim = cur.take<std::uint8_t>();
    Tensor t;
    for (int d = 0; d < ndim; ++d) t.shape.push_back(cur.take<std::uint64_t>());
    if (dtype == 0) {
      t.data = cur.take_array<float>(t.numel());
    } else if (dtype == 1) {
      t.data = cur.take_array<std::int64_t>(t.numel());
    } else {
      fail("unsupported tensor dtype " + std::to_string(dtype));
    }
    ar.tensors.emplace(std::move(name), std::move(t));
  }
  if (!cur.at_end()) fail("trailing bytes in checkpoint '" + path.string() + "'");
  return ar;
}

// Helpers for float tensors.

inline Tensor make_tensor(const Matrix<float>& m) {
  return {{m.rows(), m.cols()}, std::vector<float>(m.flat().begin(), m.flat().end())};
}
inline Tensor make_tensor(std::span<const float> v) {
  return {{v.size()}, std::vector<float>(v.begin(), v.end())};
}

inline const std::vector<float>& float_data(const TensorArchive& ar, const std::string& name,
                                            std::vector<std::uint64_t> shape) {
  const Tensor& t = ar.at(name);
  if (t.shape != shape) fail("shape mismatch for tensor '" + name + "'");
  const auto* v = std::get_if<std::vector<float>>(&t.data);
  if (!v) fail("tensor '" + name + "' has wrong dtype");
  return *v;
}

inline Matrix<float> get_matrix(const TensorArchive& ar, const std::string& name, std::size_t rows,
                                std::size_t cols) {
  const auto& v = float_data(ar, name, {rows, cols});
  Matrix<float> m(rows, cols);
  std::copy(v.begin(), v.end(), m.flat().begin());
  return m;
}

inline std::vector<float> get_vector(const TensorArchive& ar, const std::string& name, std::size_t n) {
  return float_data(ar, name, {n});
}

inline json coder_config_to_json(const CoderConfig& c) {
  return {{"d_in", c.d_in},           {"d_out", c.d_out}, {"n_latents", c.n_latents},
          {"k", c.k},                 {"arch", std::string(to_string(c.arch))},
          {"seed", c.seed}};
}

inline CoderConfig coder_config_from_json(const json& j) {
  CoderConfig c;
  c.d_in = j.at("d_in").get<std::size_t>();
  c.d_out = j.at("d_out").get<std::size_t>();
  c.n_latents = j.at("n_latents").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},       {"n_steps", c.n_steps},
          {"dead_token_window", c.dead_token_window},
          {"seed", c.seed},                   {"log_every", c.log_every}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.dead_token_window = j.value("dead_token_window", c.dead_token_window);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

namespace detail {

inline void put_params(TensorArchive& ar, const std::string& prefix, const ParamTensors<float>& p) {
  ar.tensors[prefix + "encoder"] = make_tensor(p.encoder);
  ar.tensors[prefix + "encoder_bias"] = make_tensor(p.encoder_bias);
  ar.tensors[prefix + "decoder"] = make_tensor(p.decoder);
  ar.tensors[prefix + "decoder_bias"] = make_tensor(p.decoder_bias);
  if (p.skip) ar.tensors[prefix + "skip"] = make_tensor(*p.skip);
}

inline ParamTensors<float> get_params(const TensorArchive& ar, const std::string& prefix,
                                      const CoderConfig& c) {
  ParamTensors<float> p;
  p.encoder = get_matrix(ar, prefix + "encoder", c.n_latents, c.d_in);
  p.encoder_bias = get_vector(ar, prefix + "encoder_bias", c.n_latents);
  p.decoder = get_matrix(ar, prefix + "decoder", c.d_out, c.n_latents);
  p.decoder_bias = get_vector(ar, prefix + "decoder_bias", c.d_out);
  if (c.arch == Arch::SkipTranscoder) {
    p.skip = get_matrix(ar, prefix + "skip", c.d_out, c.d_in);
  } else if (ar.contains(prefix + "skip")) {
    fail("unexpected skip tensor for arch " + std::string(to_string(c.arch)));
  }
  return p;
}

}  // namespace detail

// Coder only (no optimizer state), as used for inference and conversion.
inline TensorArchive coder_archive(const SparseCoder& coder) {
  coder.validate();
  TensorArchive ar;
  ar.meta["kind"] = "sparse_coder";
  ar.meta["coder"] = coder_config_to_json(coder.config);
  detail::put_params(ar, "", {coder.encoder, coder.encoder_bias, coder.decoder, coder.decoder_bias,
                              coder.skip});
  return ar;
}

inline SparseCoder coder_from_archive(const TensorArchive& ar) {
  if (ar.meta.value("kind", "") != "sparse_coder") fail("checkpoint is not a sparse coder");
  const CoderConfig cfg = coder_config_from_json(ar.meta.at("coder"));
  auto p = detail::get_params(ar, "", cfg);
  SparseCoder c{cfg, std::move(p.encoder), std::move(p.encoder_bias), std::move(p.decoder),
                std::move(p.decoder_bias), std::move(p.skip)};
  c.validate();
  return c;
}

inline void save_checkpoint(const SparseCoder& coder, const TrainState& state, const fs::path& path,
                            const TrainConfig& train_cfg = {}) {
  TensorArchive ar = coder_archive(coder);
  ar.meta["train"] = train_config_to_json(train_cfg);
  ar.meta["state"] = {{"step", state.step}, {"tokens_seen", state.tokens_seen}, {"seed", state.seed}};
  require(state.m.matches(coder) && state.v.matches(coder), "train state does not match coder");
  require(state.last_fired.size() == coder.n_latents(), "train state does not match coder");
  detail::put_params(ar, "adam_m.", state.m);
  detail::put_params(ar, "adam_v.", state.v);
  ar.tensors["last_fired"] = {{state.last_fired.size()},
                              std::vector<std::int64_t>(state.last_fired.begin(), state.last_fired.end())};
  write_archive(ar, path);
}

struct LoadedCheckpoint {
  SparseCoder coder;
  TrainState state;
  TrainConfig train_config;
};

// Loads a coder checkpoint. Files written without optimizer state (e.g. by
// convert) come back with a fresh state.
inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  const TensorArchive ar = read_archive(path);
  LoadedCheckpoint out{coder_from_archive(ar), {}, {}};
  if (ar.meta.contains("train")) out.train_config = train_config_from_json(ar.meta["train"]);
  if (!ar.meta.contains("state")) {
    out.state = TrainState::fresh(out.coder);
    return out;
  }
  const auto& cfg = out.coder.config;
  const auto& st = ar.meta["state"];
  out.state.step = st.at("step").get<std::uint64_t>();
  out.state.tokens_seen = st.at("tokens_seen").get<std::uint64_t>();
  out.state.seed = st.at("seed").get<std::uint64_t>();
  out.state.m = detail::get_params(ar, "adam_m.", cfg);
  out.state.v = detail::get_params(ar, "adam_v.", cfg);
  const Tensor& lf = ar.at("last_fired");
  const auto* v = std::get_if<std::vector<std::int64_t>>(&lf.data);
  if (!v || lf.shape != std::vector<std::uint64_t>{cfg.n_latents}) {
    fail("shape mismatch for tensor 'last_fired'");
  }
  out.state.last_fired.assign(v->begin(), v->end());
  return out;
}

inline void save_coder(const SparseCoder& coder, const fs::path& path) {
  write_archive(coder_archive(coder), path);
}

}  // namespace sparsecoder
