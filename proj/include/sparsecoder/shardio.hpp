#pragma once

// Paired activation shards.
//
// Layout (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "ACTS"
//   4       2     version (1)
//   6       4     d_in
//   10      4     d_out
//   14      8     n_rows
//   22      1     dtype_code (0 = float32)
//   23      1     reserved, zero
//   24      ...   n_rows x (d_in input floats, then d_out target floats)

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparsecoder/error.hpp"

namespace sparsecoder {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "shard and checkpoint I/O assumes a little-endian host");

namespace le {

template <typename T>
void put(std::vector<char>& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.insert(buf.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace le

inline constexpr std::array<char, 4> kShardMagic{'A', 'C', 'T', 'S'};
inline constexpr std::uint16_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderSize = 24;

struct ShardHeader {
  std::array<char, 4> magic = kShardMagic;
  std::uint16_t version = kShardVersion;
  std::uint32_t d_in = 0;
  std::uint32_t d_out = 0;
  std::uint64_t n_rows = 0;
  std::uint8_t dtype_code = 0;

  std::size_t dtype_width() const { return 4; }
  std::uint64_t row_bytes() const { return std::uint64_t(d_in + d_out) * dtype_width(); }
  std::uint64_t file_bytes() const { return kShardHeaderSize + n_rows * row_bytes(); }

  std::array<char, kShardHeaderSize> encode() const {
    std::vector<char> buf;
    buf.insert(buf.end(), magic.begin(), magic.end());
    le::put(buf, version);
    le::put(buf, d_in);
    le::put(buf, d_out);
    le::put(buf, n_rows);
    le::put(buf, dtype_code);
    le::put(buf, std::uint8_t{0});
    std::array<char, kShardHeaderSize> out{};
    std::copy(buf.begin(), buf.end(), out.begin());
    return out;
  }

  static ShardHeader decode(std::span<const char, kShardHeaderSize> b) {
    ShardHeader h;
    std::copy(b.begin(), b.begin() + 4, h.magic.begin());
    if (h.magic != kShardMagic) fail("bad magic");
    h.version = le::get<std::uint16_t>(b.data() + 4);
    h.d_in = le::get<std::uint32_t>(b.data() + 6);
    h.d_out = le::get<std::uint32_t>(b.data() + 10);
    h.n_rows = le::get<std::uint64_t>(b.data() + 14);
    h.dtype_code = le::get<std::uint8_t>(b.data() + 22);
    if (h.version != kShardVersion) fail("unsupported shard version " + std::to_string(h.version));
    if (h.dtype_code != 0) fail("unsupported dtype_code " + std::to_string(h.dtype_code));
    if (h.d_in == 0 || h.d_out == 0) fail("shard dims must be >= 1");
    return h;
  }

  friend bool operator==(const ShardHeader&, const ShardHeader&) = default;
};

struct ShardRow {
  std::vector<float> input;
  std::vector<float> target;

  friend bool operator==(const ShardRow&, const ShardRow&) = default;
};

// Single-owner streaming writer. The header is rewritten with the final row
// count by finish(); a writer destroyed without finish() leaves n_rows = 0.
class ShardWriter {
 public:
  ShardWriter(const fs::path& path, std::uint32_t d_in, std::uint32_t d_out)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail("cannot open '" + path.string() + "' for writing");
    require(d_in >= 1 && d_out >= 1, "shard dims must be >= 1");
    header_.d_in = d_in;
    header_.d_out = d_out;
    const auto h = header_.encode();
    out_.write(h.data(), h.size());
    buf_.reserve(header_.row_bytes());
  }

  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  void write(std::span<const float> input, std::span<const float> target) {
    if (input.size() != header_.d_in || target.size() != header_.d_out) {
      fail("row dimension mismatch: expected (" + std::to_string(header_.d_in) + ", " +
           std::to_string(header_.d_out) + "), got (" + std::to_string(input.size()) + ", " +
           std::to_string(target.size()) + ")");
    }
    buf_.clear();
    for (float v : input) le::put(buf_, v);
    for (float v : target) le::put(buf_, v);
    out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out_) fail("write failed on '" + path_.string() + "'");
    ++header_.n_rows;
  }

  void write(const ShardRow& row) { write(row.input, row.target); }

  ShardHeader finish() {
    if (header_.n_rows == 0) fail("zero rows");
    const auto h = header_.encode();
    out_.seekp(0);
    out_.write(h.data(), h.size());
    out_.close();
    if (!out_) fail("write failed on '" + path_.string() + "'");
    return header_;
  }

  const ShardHeader& header() const noexcept { return header_; }

 private:
  fs::path path_;
  std::ofstream out_;
  ShardHeader header_;
  std::vector<char> buf_;
};

// Writes all rows; dims are taken from the first row.
template <typename Range>
ShardHeader write_shard(const Range& rows, const fs::path& path) {
  auto it = std::begin(rows);
  if (it == std::end(rows)) fail("zero rows");
  ShardWriter w(path, static_cast<std::uint32_t>(it->input.size()),
                static_cast<std::uint32_t>(it->target.size()));
  for (; it != std::end(rows); ++it) w.write(*it);
  return w.finish();
}

// Streaming cursor over one shard file. Memory use is one row buffer.
class ShardReader {
 public:
  explicit ShardReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail("cannot open '" + path.string() + "'");
    std::array<char, kShardHeaderSize> h{};
    in_.read(h.data(), h.size());
    if (in_.gcount() < 4) fail("bad magic");
    if (!std::equal(kShardMagic.begin(), kShardMagic.end(), h.begin())) fail("bad magic");
    if (in_.gcount() != static_cast<std::streamsize>(h.size())) fail("truncated header");
    header_ = ShardHeader::decode(h);
    const auto size = fs::file_size(path);
    if (size < header_.file_bytes()) fail("truncated: '" + path.string() + "'");
    if (size > header_.file_bytes()) fail("trailing bytes after last row in '" + path.string() + "'");
    buf_.resize(header_.row_bytes());
  }

  const ShardHeader& header() const noexcept { return header_; }
  std::uint64_t position() const noexcept { return pos_; }

  bool next(ShardRow& row) {
    if (pos_ >= header_.n_rows) return false;
    in_.read(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (in_.gcount() != static_cast<std::streamsize>(buf_.size())) {
      fail("truncated: '" + path_.string() + "'");
    }
    row.input.resize(header_.d_in);
    row.target.resize(header_.d_out);
    std::memcpy(row.input.data(), buf_.data(), header_.d_in * 4);
    std::memcpy(row.target.data(), buf_.data() + header_.d_in * 4, header_.d_out * 4);
    ++pos_;
    return true;
  }

  void rewind() {
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(kShardHeaderSize));
    pos_ = 0;
  }

 private:
  fs::path path_;
  std::ifstream in_;
  ShardHeader header_;
  std::vector<char> buf_;
  std::uint64_t pos_ = 0;
};

inline std::vector<ShardRow> read_all_rows(const fs::path& path) {
  ShardReader r(path);
  std::vector<ShardRow> rows;
  rows.reserve(r.header().n_rows);
  ShardRow row;
  while (r.next(row)) rows.push_back(row);
  return rows;
}

// A list of shard files with identical dims, read in lexicographic path order.
class ShardDataset {
 public:
  // `path` may be a shard file or a directory of `*.shard` files.
  static ShardDataset open(const fs::path& path) {
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
      for (const auto& e : fs::directory_iterator(path)) {
        if (e.is_regular_file() && e.path().extension() == ".shard") files.push_back(e.path());
      }
      if (files.empty()) fail("no .shard files in '" + path.string() + "'");
    } else {
      files.push_back(path);
    }
    return ShardDataset(std::move(files));
  }

  explicit ShardDataset(std::vector<fs::path> files) : files_(std::move(files)) {
    require(!files_.empty(), "dataset has no files");
    std::sort(files_.begin(), files_.end());
    for (const auto& f : files_) {
      ShardReader r(f);
      if (files_.front() == f) {
        d_in_ = r.header().d_in;
        d_out_ = r.header().d_out;
      } else if (r.header().d_in != d_in_ || r.header().d_out != d_out_) {
        fail("shard dims differ across files: '" + f.string() + "'");
      }
      n_rows_ += r.header().n_rows;
    }
  }

  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }
  std::uint64_t n_rows() const noexcept { return n_rows_; }
  const std::vector<fs::path>& files() const noexcept { return files_; }

  // Independent cursor; one per thread.
  class Cursor {
   public:
    explicit Cursor(const ShardDataset& ds) : ds_(&ds) { open(0); }

    bool next(ShardRow& row) {
      while (reader_) {
        if (reader_->next(row)) return true;
        if (file_ + 1 >= ds_->files_.size()) {
          reader_.reset();
          return false;
        }
        open(file_ + 1);
      }
      return false;
    }

    void rewind() { open(0); }

   private:
    void open(std::size_t i) {
      file_ = i;
      reader_.emplace(ds_->files_[i]);
    }
    const ShardDataset* ds_;
    std::size_t file_ = 0;
    std::optional<ShardReader> reader_;
  };

  Cursor cursor() const { return Cursor(*this); }

 private:
  std::vector<fs::path> files_;
  std::size_t d_in_ = 0;
  std::size_t d_out_ = 0;
  std::uint64_t n_rows_ = 0;
};

// In-memory row source with the same next/rewind interface as a cursor.
class RowSpanSource {
 public:
  explicit RowSpanSource(std::span<const ShardRow> rows) : rows_(rows) {}
  bool next(ShardRow& row) {
    if (pos_ >= rows_.size()) return false;
    row = rows_[pos_++];
    return true;
  }
  void rewind() { pos_ = 0; }

 private:
  std::span<const ShardRow> rows_;
  std::size_t pos_ = 0;
};

}  // namespace sparsecoder
