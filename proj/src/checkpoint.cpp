#include "regdiff/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace regdiff {

namespace {

constexpr unsigned char kMagic[4] = {'R', 'G', 'D', 'F'};

void put_u8(std::vector<unsigned char>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t crc_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

struct Truncated {};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}
  std::size_t pos() const { return pos_; }
  const unsigned char* take(std::size_t n) {
    if (n > b_.size() - pos_) throw Truncated{};
    const unsigned char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u(int bytes) {
    const unsigned char* p = take(static_cast<std::size_t>(bytes));
    std::uint32_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

// Parses the tensor section that follows magic and version. Throws Truncated
// when it runs off the end of `body`.
ParameterSet parse_tensors(Reader& r) {
  ParameterSet ps;
  const std::uint32_t count = r.u(4);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = r.u(2);
    const unsigned char* name = r.take(name_len);
    const std::uint32_t rank = r.u(1);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u(4);
      if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) throw Truncated{};
      n *= d;
    }
    if (n > std::numeric_limits<std::size_t>::max() / 4) throw Truncated{};
    const unsigned char* raw = r.take(4 * n);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int j = 0; j < 4; ++j) bits |= static_cast<std::uint32_t>(raw[4 * i + j]) << (8 * j);
      values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    std::string key(reinterpret_cast<const char*>(name), name_len);
    if (ps.contains(key)) throw CheckpointError(CheckpointError::Kind::kFormat, "duplicate tensor '" + key + "'");
    ps.add(key, Tensor(std::move(shape), std::move(values)));
  }
  return ps;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const ParameterSet& params) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& t = params.value(i);
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("tensor name too long");
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw std::invalid_argument("tensor rank too large");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("tensor dim too large");
      put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_u32(out, crc_of(out));
  return out;
}

ParameterSet decode_checkpoint(std::span<const unsigned char> bytes) {
  using K = CheckpointError::Kind;
  const std::size_t magic_len = std::min<std::size_t>(bytes.size(), 4);
  if (std::memcmp(bytes.data(), kMagic, magic_len) != 0)
    throw CheckpointError(K::kFormat, "not a checkpoint (bad magic)");
  if (bytes.size() < 8) throw CheckpointError(K::kTruncated, "checkpoint truncated in header");
  Reader header(bytes.subspan(4, 4));
  const std::uint32_t version = header.u(4);
  if (version != kCheckpointVersion)
    throw CheckpointError(K::kVersion, "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                           std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 16) throw CheckpointError(K::kTruncated, "checkpoint truncated in header");

  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const bool crc_ok = tail.u(4) == crc_of(body);
  Reader r(body.subspan(8));
  try {
    ParameterSet ps = parse_tensors(r);
    if (!crc_ok) throw CheckpointError(K::kCrc, "checkpoint CRC mismatch (corrupt data)");
    if (r.pos() + 8 != body.size()) throw CheckpointError(K::kFormat, "trailing bytes after last tensor");
    return ps;
  } catch (const Truncated&) {
    if (crc_ok) throw CheckpointError(K::kFormat, "tensor table inconsistent with file length");
    throw CheckpointError(K::kTruncated, "checkpoint truncated");
  }
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "write failed: " + path.string());
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::kIo, "cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

ParameterSet round_to_f32(const ParameterSet& params) {
  ParameterSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params.value(i);
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    out.add(params.name(i), std::move(t));
  }
  return out;
}

namespace {

Tensor ints(std::initializer_list<int> xs) {
  std::vector<double> v(xs.begin(), xs.end());
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

std::vector<int> read_ints(const ParameterSet& ps, const std::string& key, std::size_t n) {
  if (!ps.contains(key)) throw CheckpointError(CheckpointError::Kind::kFormat, "missing '" + key + "'");
  const Tensor& t = ps.get(key);
  if (t.shape() != Shape{n}) throw CheckpointError(CheckpointError::Kind::kFormat, "malformed '" + key + "'");
  std::vector<int> out;
  for (double v : t.data()) out.push_back(static_cast<int>(v));
  return out;
}

ParameterSet with_meta(const std::string& key, Tensor meta, const ParameterSet& params) {
  ParameterSet out;
  out.add(key, std::move(meta));
  for (std::size_t i = 0; i < params.size(); ++i) out.add(params.name(i), params.value(i));
  return out;
}

ParameterSet without_meta(const ParameterSet& ps) {
  ParameterSet out;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps.name(i).rfind("meta.", 0) != 0) out.add(ps.name(i), ps.value(i));
  return out;
}

template <typename Model>
void check_shapes(const Model& reference, const ParameterSet& loaded) {
  const ParameterSet& want = reference.params();
  if (want.size() != loaded.size())
    throw CheckpointError(CheckpointError::Kind::kFormat, "parameter count does not match the stored config");
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want.name(i) != loaded.name(i) || want.value(i).shape() != loaded.value(i).shape())
      throw CheckpointError(CheckpointError::Kind::kFormat, "parameter '" + loaded.name(i) + "' does not match config");
}

}  // namespace

void save_vae(const VaeModel& model, const std::filesystem::path& path) {
  const VaeConfig& c = model.config();
  save_checkpoint(with_meta("meta.vae", ints({c.vocab, c.seq_len, c.latent_dim, c.model_dim, c.heads, c.layers,
                                              c.ffn_dim, c.cls_hidden, c.refine_steps}),
                            model.params()),
                  path);
}

VaeModel load_vae(const std::filesystem::path& path) {
  const ParameterSet ps = load_checkpoint(path);
  const auto m = read_ints(ps, "meta.vae", 9);
  const VaeConfig c{m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]};
  ParameterSet params = without_meta(ps);
  check_shapes(VaeModel::init(c, 0), params);
  return VaeModel(c, std::move(params), true);
}

void save_denoiser(const DenoiserModel& model, const std::filesystem::path& path) {
  const DenoiserConfig& c = model.config();
  save_checkpoint(with_meta("meta.denoiser", ints({c.latent_dim, c.seq_len, c.hidden, c.heads, c.layers, c.ffn_dim,
                                                   c.num_labels, c.steps}),
                            model.params()),
                  path);
}

DenoiserModel load_denoiser(const std::filesystem::path& path) {
  const ParameterSet ps = load_checkpoint(path);
  const auto m = read_ints(ps, "meta.denoiser", 8);
  const DenoiserConfig c{m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7]};
  ParameterSet params = without_meta(ps);
  check_shapes(DenoiserModel::init(c, 0), params);
  return DenoiserModel(c, std::move(params));
}

}  // namespace regdiff
