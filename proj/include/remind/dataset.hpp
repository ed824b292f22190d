#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "remind/frame_graph.hpp"
#include "remind/run_config.hpp"

namespace remind {

struct Dataset {
  nlohmann::json provenance;
  WorldConfig world;
  std::size_t chunks = 0;
  std::vector<SyntheticClip> clips;
};

// count clips drawn under `seed`; clip i depends only on (seed, i).
std::vector<SyntheticClip> generate_clips(const DataConfig& data, std::uint64_t seed, std::size_t count);

nlohmann::json graph_to_json(const FrameGraph& g);
FrameGraph graph_from_json(const nlohmann::json& j);

// RMDS container of kind "dataset": latents then clean latents per clip, f32.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

// Chunk c of a clip as [frames_per_chunk*tokens x dim].
Tensor clip_chunk(const SyntheticClip& clip, std::size_t c, bool clean = false);

}  // namespace remind
