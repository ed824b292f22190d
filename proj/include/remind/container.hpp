#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "remind/geometry.hpp"

namespace remind {

inline constexpr char kContainerMagic[4] = {'R', 'M', 'D', 'S'};
inline constexpr std::uint32_t kContainerVersion = 1;

// RMDS file: magic, u32 version, u64 header bytes, JSON header, u64 float
// count, little-endian f32 payload. The header carries payload_floats and
// payload_crc32 (zlib crc32 over the payload bytes).
struct Container {
  nlohmann::json header;
  std::vector<float> payload;
};

std::uint32_t payload_crc32(const std::vector<float>& payload);

// Fills payload_floats and payload_crc32 before writing.
void write_container(const std::filesystem::path& path, Container c);
// Verifies magic, version, declared sizes and checksum.
Container read_container(const std::filesystem::path& path);

// Little-endian byte helpers shared by the binary formats.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);
std::uint32_t get_u32(const std::string& in, std::size_t& pos);
std::uint64_t get_u64(const std::string& in, std::size_t& pos);
double get_f64(const std::string& in, std::size_t& pos);

nlohmann::json pose_to_json(const CameraPose& p);
CameraPose pose_from_json(const nlohmann::json& j);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace remind
