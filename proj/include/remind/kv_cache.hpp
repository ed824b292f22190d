#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "remind/geometry.hpp"
#include "remind/tensor.hpp"

namespace remind {

enum class Reliability { clean, degraded, noise };
std::string to_string(Reliability r);
Reliability parse_reliability(const std::string& name);

// Keys are stored after projection and before rotation; values are raw.
// Row layout per layer is frame-major: frames x tokens_per_frame rows.
struct CacheEntry {
  std::int64_t chunk_id = 0;
  std::vector<Tensor> keys;    // per layer [rows x inner]
  std::vector<Tensor> values;  // per layer [rows x inner]
  std::vector<std::int64_t> frame_positions;
  std::vector<CameraPose> poses;
  Reliability reliability = Reliability::clean;
  bool protected_anchor = false;
  std::size_t tokens_per_frame = 1;

  // Throws on positions not strictly increasing or row counts that do not
  // match positions x tokens_per_frame.
  void validate() const;
};

struct History {
  std::vector<Tensor> keys;  // per layer, concatenated in position order
  std::vector<Tensor> values;
  std::vector<std::int64_t> positions;
  std::vector<CameraPose> poses;
  std::vector<std::int64_t> chunk_ids;  // one per frame
  std::size_t tokens_per_frame = 1;

  std::size_t frames() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

enum class DropMode { noise, remove };
DropMode parse_drop_mode(const std::string& name);
std::string to_string(DropMode m);

class KvCache {
 public:
  explicit KvCache(std::size_t layers = 1) : layers_(layers) {}

  std::size_t layers() const { return layers_; }
  const std::vector<CacheEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::int64_t next_write_chunk() const { return next_write_chunk_; }
  // First frame position the next target chunk will use.
  std::int64_t next_frame_position() const { return next_frame_position_; }

  // Inserts in position order. Throws on a position collision or a layer
  // count mismatch.
  void write_chunk(CacheEntry entry);

  // Entries with chunk_id < up_to_chunk, in position order.
  History read_history(std::int64_t up_to_chunk) const;
  History read_all() const;

  // Writes reference chunks at positions 0..#ref*m-1 and moves the write
  // cursor to G*m. Throws when the target would overlap the references or the
  // cache already holds target chunks.
  void prepend_reference(std::vector<CacheEntry> refs, std::int64_t gap_chunks,
                         std::size_t frames_per_chunk);

  // Removes the listed chunks, or replaces their keys and values with unit
  // Gaussian noise. Throws if no protected anchor would survive.
  void drop_nodes(const std::set<std::int64_t>& chunk_ids, DropMode mode, std::mt19937_64& rng);

  void save(const std::filesystem::path& path) const;
  static KvCache load(const std::filesystem::path& path);

 private:
  std::size_t layers_;
  std::vector<CacheEntry> entries_;
  std::int64_t next_write_chunk_ = 0;
  std::int64_t next_frame_position_ = 0;
};

}  // namespace remind
