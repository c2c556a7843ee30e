#include "qkt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <utility>

namespace qkt {

namespace {

constexpr std::uint8_t kMagic[4] = {'Q', 'K', 'T', 'M'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8, "f64");
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw CheckpointError("truncated checkpoint: need " + std::to_string(n) +
                            " bytes for " + what + " at offset " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const ModelParams& model) {
  model.validate();
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * model.layers.size() + 8 * model.parameter_count());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(model.layers.size()));
  put_u32(out, static_cast<std::uint32_t>(model.split_index));
  for (const auto& l : model.layers) {
    put_u32(out, static_cast<std::uint32_t>(l.out_dim()));
    put_u32(out, static_cast<std::uint32_t>(l.in_dim()));
  }
  for (const auto& l : model.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) put_f64(out, l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) put_f64(out, l.bias(r));
  }
  return out;
}

ModelParams load_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw CheckpointError("bad magic: not a QKTM checkpoint");
  Reader in(bytes.subspan(4));
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  const std::uint32_t split = in.u32();
  if (count == 0) throw CheckpointError("checkpoint declares zero layers");
  if (static_cast<std::size_t>(count) * 8 > in.remaining())
    throw CheckpointError("truncated checkpoint: layer table");

  ModelParams model;
  model.split_index = split;
  model.layers.resize(count);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> dims(count);
  for (auto& [out_dim, in_dim] : dims) {
    out_dim = in.u32();
    in_dim = in.u32();
  }
  // Doubles still expected; bounded by the stream before anything is allocated.
  const std::size_t budget = in.remaining() / 8 + 1;
  std::size_t payload = 0;
  for (const auto& [out_dim, in_dim] : dims) {
    const std::size_t values = static_cast<std::size_t>(out_dim) * in_dim + out_dim;
    if (values > budget || payload / 8 + values > budget)
      throw CheckpointError("truncated checkpoint: declared payload exceeds stream");
    payload += values * 8;
  }
  for (std::size_t i = 0; i < count; ++i) {
    model.layers[i].weights.resize(dims[i].first, dims[i].second);
    model.layers[i].bias.resize(dims[i].first);
  }
  if (payload != in.remaining())
    throw CheckpointError(payload > in.remaining()
                              ? "truncated checkpoint: payload short by " +
                                    std::to_string(payload - in.remaining()) + " bytes"
                              : "trailing bytes after checkpoint payload");
  for (auto& l : model.layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = in.f64();
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = in.f64();
  }
  try {
    model.validate();
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("inconsistent checkpoint shapes: ") + e.what());
  }
  return model;
}

void write_checkpoint_file(const std::filesystem::path& path, const ModelParams& model) {
  const auto bytes = save_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

ModelParams read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string checkpoint_digest(const ModelParams& model) { return fnv1a_hex(save_checkpoint(model)); }

}  // namespace qkt
