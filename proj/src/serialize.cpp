#include "glsm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace glsm {

namespace binio {

namespace {
template <typename U>
void put_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated input");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}
}  // namespace

void put_u8(std::ostream& os, std::uint8_t v) { put_le(os, v); }
void put_u16(std::ostream& os, std::uint16_t v) { put_le(os, v); }
void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
void put_bytes(std::ostream& os, const std::string& bytes) {
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint8_t get_u8(std::istream& is) { return get_le<std::uint8_t>(is); }
std::uint16_t get_u16(std::istream& is) { return get_le<std::uint16_t>(is); }
std::uint32_t get_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("truncated input");
  return s;
}

}  // namespace binio

namespace {
constexpr char kTensorMagic[4] = {'G', 'L', 'S', 'M'};
constexpr char kCheckpointMagic[4] = {'G', 'L', 'C', 'K'};
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  os.write(kTensorMagic, 4);
  binio::put_u16(os, kTensorFormatVersion);
  binio::put_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) binio::put_u32(os, static_cast<std::uint32_t>(e));
  binio::put_u8(os, static_cast<std::uint8_t>(dtype));
  for (double v : t.values()) {
    if (dtype == DType::F32)
      binio::put_f32(os, static_cast<float>(v));
    else
      binio::put_f64(os, v);
  }
}

Tensor read_tensor(std::istream& is) {
  const std::string magic = binio::get_bytes(is, 4);
  if (std::memcmp(magic.data(), kTensorMagic, 4) != 0)
    throw FormatError("version mismatch: bad tensor magic bytes");
  const auto version = binio::get_u16(is);
  if (version != kTensorFormatVersion)
    throw FormatError("version mismatch: tensor format " + std::to_string(version));
  const auto rank = binio::get_u8(is);
  if (rank == 0) throw FormatError("tensor rank 0 is not allowed");
  Shape shape(rank);
  for (auto& e : shape) e = binio::get_u32(is);
  const auto tag = binio::get_u8(is);
  if (tag > 1) throw FormatError("unknown dtype tag " + std::to_string(tag));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values)
    v = tag == 0 ? static_cast<double>(binio::get_f32(is)) : binio::get_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream blobs;
  nlohmann::json index = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    const auto offset = static_cast<std::uint64_t>(blobs.tellp());
    write_tensor(blobs, t);
    index[name] = {{"offset", offset},
                   {"size", static_cast<std::uint64_t>(blobs.tellp()) - offset}};
  }
  nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                             {"config", ckpt.config},
                             {"tensors", index}};
  const std::string text = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, 4);
  binio::put_u16(os, kCheckpointFormatVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(text.size()));
  binio::put_bytes(os, text);
  binio::put_bytes(os, blobs.str());
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint not found: " + path.string());
  const std::string magic = binio::get_bytes(is, 4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("version mismatch: bad checkpoint magic bytes");
  const auto version = binio::get_u16(is);
  if (version != kCheckpointFormatVersion)
    throw FormatError("version mismatch: checkpoint format " + std::to_string(version));
  const auto len = binio::get_u32(is);
  const auto manifest = nlohmann::json::parse(binio::get_bytes(is, len));
  const auto base = is.tellg();
  Checkpoint ckpt;
  ckpt.config = manifest.at("config");
  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    is.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    ckpt.tensors.emplace(name, read_tensor(is));
  }
  return ckpt;
}

}  // namespace glsm
