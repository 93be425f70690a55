#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "glsm/tensor.hpp"

namespace glsm {

// Truncated input, bad magic bytes, or an unsupported format version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint16_t kTensorFormatVersion = 1;
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

namespace binio {

void put_u8(std::ostream& os, std::uint8_t v);
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_f32(std::ostream& os, float v);
void put_f64(std::ostream& os, double v);
void put_bytes(std::ostream& os, const std::string& bytes);

std::uint8_t get_u8(std::istream& is);
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
float get_f32(std::istream& is);
double get_f64(std::istream& is);
std::string get_bytes(std::istream& is, std::size_t n);

}  // namespace binio

/// Shared tensor container: "GLSM", u16 version, u8 rank, u32 extents,
/// u8 dtype tag, little-endian payload.
void write_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::F64);
Tensor read_tensor(std::istream& is);

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

// "GLCK", u16 version, u32 manifest length, JSON manifest, tensor blobs.
// The manifest maps each tensor name to its byte offset within the blob area.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace glsm
