#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "remind/curriculum.hpp"
#include "remind/diagnostics.hpp"
#include "remind/frame_graph.hpp"
#include "remind/trainer.hpp"

namespace remind {

struct DataConfig {
  std::size_t clips = 64;
  std::size_t chunks = 7;
  WorldConfig world = [] {
    WorldConfig w;
    w.grid = 4;
    return w;
  }();
  std::map<Scenario, double> scenario_mix{{Scenario::filling_bar, 1.0},
                                          {Scenario::moving_dot, 1.0},
                                          {Scenario::pan_loop_scene, 1.0}};
  double occlusion_prob = 0.5;
  InterruptionKind interruption = InterruptionKind::occluder;
  std::size_t window_start = 2;   // chunk
  std::size_t window_chunks = 3;
  double magnitude = 1.0;

  std::size_t frames() const { return chunks * world.frames_per_chunk; }
};

struct TrainConfig {
  std::size_t iterations = 1500;
  std::size_t batch = 4;
  std::size_t checkpoint_every = 0;  // 0: final only
};

struct DiagConfig {
  LayerRange layers;
  std::size_t trials = 100;
  double beta = 1.0;
  double kappa = 1.0;
};

struct EvalConfig {
  std::size_t clips = 16;
  std::uint64_t seed_offset = 1000;
  std::size_t prefix_chunks = 5;  // observed chunks before generation in v2v
  std::int64_t gap_chunks = 4;    // refcache G
  std::size_t reference_chunks = 1;
};

// Flat "section.key = value" configuration; every key has a default.
struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  DataConfig data;
  CurriculumConfig curriculum;
  OptimConfig optim;
  TrainConfig train;
  DiagConfig diag;
  EvalConfig eval;
  std::vector<AttentionMode> ablate_modes{AttentionMode::full, AttentionMode::qk_only,
                                          AttentionMode::vo_only, AttentionMode::dual};
  bool ablate_parallel = false;

  // Throws std::invalid_argument naming the key on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply_override(const std::string& assignment);
  void validate() const;

  // Canonical text: every key in a fixed order.
  std::string to_text() const;
  std::map<std::string, std::string> entries() const;
  std::uint32_t hash() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::vector<std::string> config_keys();

inline constexpr char kVersion[] = "v0.1.0";

// {config_hash, seed, version}
nlohmann::json provenance(const RunConfig& cfg);

}  // namespace remind
