#include "remind/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace remind {

namespace {

std::runtime_error corrupt(const std::filesystem::path& path, const std::string& what) {
  return std::runtime_error(path.string() + ": " + what);
}

}  // namespace

void put_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::string& out, std::uint64_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_f64(std::string& out, double v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

namespace {
template <typename T>
T get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("truncated input");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}
}  // namespace

std::uint32_t get_u32(const std::string& in, std::size_t& pos) { return get_raw<std::uint32_t>(in, pos); }
std::uint64_t get_u64(const std::string& in, std::size_t& pos) { return get_raw<std::uint64_t>(in, pos); }
double get_f64(const std::string& in, std::size_t& pos) { return get_raw<double>(in, pos); }

nlohmann::json pose_to_json(const CameraPose& p) {
  std::vector<double> r(9);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r[static_cast<std::size_t>(3 * a + b)] = p.rotation(a, b);
  return {{"R", r},
          {"t", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"fx", p.fx},
          {"fy", p.fy},
          {"w", p.image_width}};
}

CameraPose pose_from_json(const nlohmann::json& j) {
  CameraPose p;
  const auto r = j.at("R").get<std::vector<double>>();
  if (r.size() != 9) throw std::runtime_error("pose record: R needs 9 entries");
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) p.rotation(a, b) = r[static_cast<std::size_t>(3 * a + b)];
  const auto t = j.at("t").get<std::vector<double>>();
  if (t.size() != 3) throw std::runtime_error("pose record: t needs 3 entries");
  p.translation = {t[0], t[1], t[2]};
  p.fx = j.at("fx").get<double>();
  p.fy = j.at("fy").get<double>();
  p.image_width = j.at("w").get<double>();
  return p;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::uint32_t payload_crc32(const std::vector<float>& payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* bytes = reinterpret_cast<const Bytef*>(payload.data());
  std::size_t left = payload.size() * sizeof(float);
  while (left > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, bytes, chunk);
    bytes += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_container(const std::filesystem::path& path, Container c) {
  c.header["payload_floats"] = c.payload.size();
  c.header["payload_crc32"] = payload_crc32(c.payload);
  const std::string header = c.header.dump();
  std::string out(kContainerMagic, 4);
  put_u32(out, kContainerVersion);
  put_u64(out, header.size());
  out += header;
  put_u64(out, c.payload.size());
  out.append(reinterpret_cast<const char*>(c.payload.data()), c.payload.size() * sizeof(float));
  write_file(path, out);
}

Container read_container(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  if (in.size() < 4 || std::memcmp(in.data(), kContainerMagic, 4) != 0)
    throw corrupt(path, "not an RMDS container");
  std::size_t pos = 4;
  try {
    const std::uint32_t version = get_u32(in, pos);
    if (version != kContainerVersion)
      throw corrupt(path, "unsupported container version " + std::to_string(version));
    const std::uint64_t hlen = get_u64(in, pos);
    if (pos + hlen > in.size()) throw corrupt(path, "truncated header");
    Container c;
    c.header = nlohmann::json::parse(in.substr(pos, hlen));
    pos += hlen;
    const std::uint64_t count = get_u64(in, pos);
    if (count != c.header.at("payload_floats").get<std::uint64_t>())
      throw corrupt(path, "payload size disagrees with header");
    if (in.size() - pos != count * sizeof(float)) throw corrupt(path, "payload length mismatch");
    c.payload.resize(count);
    std::memcpy(c.payload.data(), in.data() + pos, count * sizeof(float));
    if (payload_crc32(c.payload) != c.header.at("payload_crc32").get<std::uint32_t>())
      throw corrupt(path, "payload checksum mismatch");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(path, std::string("bad header: ") + e.what());
  } catch (const std::runtime_error& e) {
    if (std::string(e.what()) == "truncated input") throw corrupt(path, "truncated file");
    throw;
  }
}

}  // namespace remind
