#include "remind/kv_cache.hpp"

#include <algorithm>
#include <stdexcept>

#include "remind/container.hpp"

namespace remind {

std::string to_string(Reliability r) {
  switch (r) {
    case Reliability::clean: return "clean";
    case Reliability::degraded: return "degraded";
    case Reliability::noise: return "noise";
  }
  return "unknown";
}

Reliability parse_reliability(const std::string& name) {
  if (name == "clean") return Reliability::clean;
  if (name == "degraded") return Reliability::degraded;
  if (name == "noise") return Reliability::noise;
  throw std::invalid_argument("unknown reliability '" + name + "'");
}

DropMode parse_drop_mode(const std::string& name) {
  if (name == "noise") return DropMode::noise;
  if (name == "remove") return DropMode::remove;
  throw std::invalid_argument("unknown drop mode '" + name + "'");
}

std::string to_string(DropMode m) { return m == DropMode::noise ? "noise" : "remove"; }

void CacheEntry::validate() const {
  if (frame_positions.empty()) throw std::invalid_argument("cache entry: no frames");
  for (std::size_t i = 1; i < frame_positions.size(); ++i)
    if (frame_positions[i] <= frame_positions[i - 1])
      throw std::invalid_argument("cache entry: frame positions not strictly increasing");
  if (frame_positions.front() < 0) throw std::invalid_argument("cache entry: negative position");
  if (poses.size() != frame_positions.size())
    throw std::invalid_argument("cache entry: pose count differs from position count");
  if (keys.size() != values.size()) throw std::invalid_argument("cache entry: layer count differs");
  const std::size_t rows = frame_positions.size() * tokens_per_frame;
  for (std::size_t l = 0; l < keys.size(); ++l) {
    if (keys[l].rows() != rows || values[l].rows() != rows)
      throw std::invalid_argument("cache entry: key/value rows do not match frames x tokens");
    if (keys[l].cols() != values[l].cols())
      throw std::invalid_argument("cache entry: key/value widths differ");
  }
}

void KvCache::write_chunk(CacheEntry entry) {
  entry.validate();
  if (entry.keys.size() != layers_)
    throw std::invalid_argument("write_chunk: entry has " + std::to_string(entry.keys.size()) +
                                " layers, cache has " + std::to_string(layers_));
  if (!entries_.empty() && entries_.front().tokens_per_frame != entry.tokens_per_frame)
    throw std::invalid_argument("write_chunk: tokens per frame differ from cached entries");
  for (const CacheEntry& e : entries_)
    for (std::int64_t p : entry.frame_positions)
      if (std::binary_search(e.frame_positions.begin(), e.frame_positions.end(), p))
        throw std::invalid_argument("write_chunk: frame position " + std::to_string(p) +
                                    " already held by chunk " + std::to_string(e.chunk_id));
  const std::int64_t first = entry.frame_positions.front();
  const std::int64_t last = entry.frame_positions.back();
  auto at = std::upper_bound(entries_.begin(), entries_.end(), first,
                             [](std::int64_t p, const CacheEntry& e) {
                               return p < e.frame_positions.front();
                             });
  // an entry interleaving with a neighbour would break position ordering
  if (at != entries_.end() && at->frame_positions.front() < last)
    throw std::invalid_argument("write_chunk: entry interleaves with cached positions");
  if (at != entries_.begin() && std::prev(at)->frame_positions.back() > first)
    throw std::invalid_argument("write_chunk: entry interleaves with cached positions");
  next_write_chunk_ = std::max(next_write_chunk_, entry.chunk_id + 1);
  next_frame_position_ = std::max(next_frame_position_, last + 1);
  entries_.insert(at, std::move(entry));
}

namespace {

History gather(const std::vector<const CacheEntry*>& picked, std::size_t layers) {
  History h;
  h.keys.resize(layers);
  h.values.resize(layers);
  if (picked.empty()) return h;
  h.tokens_per_frame = picked.front()->tokens_per_frame;
  const std::size_t width = picked.front()->keys.empty() ? 0 : picked.front()->keys[0].cols();
  std::size_t rows = 0;
  for (const CacheEntry* e : picked) rows += e->keys.empty() ? 0 : e->keys[0].rows();
  for (std::size_t l = 0; l < layers; ++l) {
    h.keys[l] = Tensor({rows, width});
    h.values[l] = Tensor({rows, width});
    std::size_t at = 0;
    for (const CacheEntry* e : picked) {
      std::copy(e->keys[l].storage().begin(), e->keys[l].storage().end(),
                h.keys[l].storage().begin() + static_cast<std::ptrdiff_t>(at));
      std::copy(e->values[l].storage().begin(), e->values[l].storage().end(),
                h.values[l].storage().begin() + static_cast<std::ptrdiff_t>(at));
      at += e->keys[l].size();
    }
  }
  for (const CacheEntry* e : picked) {
    h.positions.insert(h.positions.end(), e->frame_positions.begin(), e->frame_positions.end());
    h.poses.insert(h.poses.end(), e->poses.begin(), e->poses.end());
    h.chunk_ids.insert(h.chunk_ids.end(), e->frame_positions.size(), e->chunk_id);
  }
  return h;
}

}  // namespace

History KvCache::read_history(std::int64_t up_to_chunk) const {
  std::vector<const CacheEntry*> picked;
  for (const CacheEntry& e : entries_)
    if (e.chunk_id < up_to_chunk) picked.push_back(&e);
  return gather(picked, layers_);
}

History KvCache::read_all() const {
  std::vector<const CacheEntry*> picked;
  for (const CacheEntry& e : entries_) picked.push_back(&e);
  return gather(picked, layers_);
}

void KvCache::prepend_reference(std::vector<CacheEntry> refs, std::int64_t gap_chunks,
                                std::size_t frames_per_chunk) {
  if (frames_per_chunk == 0) throw std::invalid_argument("prepend_reference: zero chunk size");
  if (!entries_.empty()) throw std::invalid_argument("prepend_reference: cache already holds chunks");
  const auto m = static_cast<std::int64_t>(frames_per_chunk);
  const auto nref = static_cast<std::int64_t>(refs.size());
  if (gap_chunks * m <= nref * m - 1)
    throw std::invalid_argument("prepend_reference: target start " + std::to_string(gap_chunks * m) +
                                " overlaps reference positions 0.." +
                                std::to_string(nref * m - 1));
  for (std::int64_t i = 0; i < nref; ++i) {
    CacheEntry& r = refs[static_cast<std::size_t>(i)];
    if (r.poses.size() != frames_per_chunk)
      throw std::invalid_argument("prepend_reference: reference chunk frame count differs from m");
    r.frame_positions.resize(frames_per_chunk);
    for (std::int64_t f = 0; f < m; ++f) r.frame_positions[static_cast<std::size_t>(f)] = i * m + f;
    write_chunk(std::move(r));
  }
  next_frame_position_ = gap_chunks * m;
}

void KvCache::drop_nodes(const std::set<std::int64_t>& chunk_ids, DropMode mode,
                         std::mt19937_64& rng) {
  if (chunk_ids.empty()) return;
  bool had_anchor = false, anchor_survives = false;
  for (const CacheEntry& e : entries_) {
    if (!e.protected_anchor) continue;
    had_anchor = true;
    if (!chunk_ids.count(e.chunk_id)) anchor_survives = true;
  }
  if (had_anchor && !anchor_survives)
    throw std::invalid_argument("drop_nodes: drop set would remove every protected anchor");
  if (mode == DropMode::remove) {
    std::erase_if(entries_, [&](const CacheEntry& e) { return chunk_ids.count(e.chunk_id) > 0; });
    return;
  }
  for (CacheEntry& e : entries_) {
    if (!chunk_ids.count(e.chunk_id)) continue;
    for (std::size_t l = 0; l < e.keys.size(); ++l) {
      for (double& v : e.keys[l].storage()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
      for (double& v : e.values[l].storage()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    e.reliability = Reliability::noise;
  }
}

void KvCache::save(const std::filesystem::path& path) const {
  Container c;
  c.header["kind"] = "kv_cache";
  c.header["layers"] = layers_;
  c.header["next_write_chunk"] = next_write_chunk_;
  c.header["next_frame_position"] = next_frame_position_;
  nlohmann::json list = nlohmann::json::array();
  for (const CacheEntry& e : entries_) {
    nlohmann::json j;
    j["chunk_id"] = e.chunk_id;
    j["frame_positions"] = e.frame_positions;
    j["reliability"] = to_string(e.reliability);
    j["protected_anchor"] = e.protected_anchor;
    j["tokens_per_frame"] = e.tokens_per_frame;
    j["width"] = e.keys.empty() ? 0 : e.keys[0].cols();
    nlohmann::json poses = nlohmann::json::array();
    for (const CameraPose& p : e.poses) poses.push_back(pose_to_json(p));
    j["poses"] = poses;
    list.push_back(j);
    for (std::size_t l = 0; l < layers_; ++l) {
      for (double v : e.keys[l].storage()) c.payload.push_back(static_cast<float>(v));
      for (double v : e.values[l].storage()) c.payload.push_back(static_cast<float>(v));
    }
  }
  c.header["entries"] = list;
  write_container(path, std::move(c));
}

KvCache KvCache::load(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "kv_cache")
    throw std::runtime_error(path.string() + ": not a cache snapshot");
  KvCache cache(c.header.at("layers").get<std::size_t>());
  std::size_t at = 0;
  for (const auto& j : c.header.at("entries")) {
    CacheEntry e;
    e.chunk_id = j.at("chunk_id").get<std::int64_t>();
    e.frame_positions = j.at("frame_positions").get<std::vector<std::int64_t>>();
    e.reliability = parse_reliability(j.at("reliability").get<std::string>());
    e.protected_anchor = j.at("protected_anchor").get<bool>();
    e.tokens_per_frame = j.at("tokens_per_frame").get<std::size_t>();
    for (const auto& pj : j.at("poses")) e.poses.push_back(pose_from_json(pj));
    const std::size_t rows = e.frame_positions.size() * e.tokens_per_frame;
    const std::size_t width = j.at("width").get<std::size_t>();
    for (std::size_t l = 0; l < cache.layers_; ++l) {
      Tensor k({rows, width}), v({rows, width});
      if (at + 2 * rows * width > c.payload.size())
        throw std::runtime_error(path.string() + ": payload shorter than declared entries");
      for (double& x : k.storage()) x = c.payload[at++];
      for (double& x : v.storage()) x = c.payload[at++];
      e.keys.push_back(std::move(k));
      e.values.push_back(std::move(v));
    }
    cache.write_chunk(std::move(e));
  }
  if (at != c.payload.size()) throw std::runtime_error(path.string() + ": trailing payload");
  cache.next_write_chunk_ = c.header.at("next_write_chunk").get<std::int64_t>();
  cache.next_frame_position_ = c.header.at("next_frame_position").get<std::int64_t>();
  return cache;
}

}  // namespace remind
