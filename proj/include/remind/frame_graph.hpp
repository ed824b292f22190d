#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "remind/geometry.hpp"
#include "remind/tensor.hpp"

namespace remind {

enum class NodeRole { plain, anchor, interruption, recovery };
std::string to_string(NodeRole r);
NodeRole parse_node_role(const std::string& name);

struct GraphNode {
  std::size_t chunk_id = 0;
  NodeRole role = NodeRole::plain;
  bool protected_anchor = false;
};

enum class EdgeKind { chain, memory };

struct GraphEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  EdgeKind kind = EdgeKind::chain;
};

struct FrameGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  // Inclusive chunk range of the degraded observations.
  std::optional<std::pair<std::size_t, std::size_t>> degradation;
  // First degraded frame; the anchor selector's tau_deg.
  std::optional<std::size_t> degradation_start_frame;

  std::vector<std::size_t> with_role(NodeRole role) const;
  std::vector<std::size_t> anchors() const { return with_role(NodeRole::anchor); }
  std::vector<std::size_t> interruptions() const { return with_role(NodeRole::interruption); }
  std::vector<std::size_t> recoveries() const { return with_role(NodeRole::recovery); }
  bool has_interruption() const { return degradation.has_value(); }
};

// Throws std::logic_error naming the first violated invariant.
void validate_graph(const FrameGraph& g);

enum class Scenario { filling_bar, moving_dot, pan_loop_scene };
std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& name);
inline constexpr std::size_t kScenarioCount = 3;

enum class InterruptionKind { camera_loop, light_toggle, occluder, zoom };
std::string to_string(InterruptionKind k);
InterruptionKind parse_interruption_kind(const std::string& name);

struct InterruptionSpec {
  InterruptionKind kind = InterruptionKind::occluder;
  std::size_t onset = 0;     // first affected frame
  std::size_t duration = 0;  // frames
  double magnitude = 1.0;    // in [0, 1]
};

struct WorldConfig {
  std::size_t grid = 8;
  std::size_t latent_dim = 16;
  std::size_t frames_per_chunk = 3;
  double rate_min = 0.015;  // fill per frame
  double rate_max = 0.045;
  double speed_min = 0.02;  // dot travel per frame, fraction of the width
  double speed_max = 0.06;

  std::size_t tokens_per_frame() const { return grid * grid; }
  // Throws when latent_dim is not a positive multiple of 8 or grid is zero.
  void validate() const;
};

struct SyntheticClip {
  Scenario scenario = Scenario::filling_bar;
  Tensor latents;        // [chunks x frames_per_chunk x tokens x dim]
  Tensor clean_latents;  // same layout, before any interruption
  std::vector<CameraPose> poses;  // per frame, normalized
  std::vector<double> state;      // per frame, in [0, 1]
  std::size_t frames = 0;         // unpadded frame count
  double rate = 0.0;              // fill per frame, or dot speed
  std::optional<InterruptionSpec> interruption;
  FrameGraph graph;

  std::size_t chunks() const { return latents.shape()[0]; }
  std::size_t frames_per_chunk() const { return latents.shape()[1]; }
  std::size_t tokens() const { return latents.shape()[2]; }
  std::size_t dim() const { return latents.shape()[3]; }
  // [tokens x dim] view copy of one frame (padded index space).
  Tensor frame(std::size_t k, bool clean = false) const;
};

// Latent patterns of the analytic token encoder.
Tensor fill_direction(std::size_t dim);
Tensor background_pattern(std::size_t dim);
Tensor occluder_pattern(std::size_t dim);

// Renders one frame [grid*grid x dim] of a scenario at a hidden state.
Tensor render_frame(Scenario scenario, double state, const CameraPose& pose,
                    const WorldConfig& cfg);

// Inverse of the encoder. Fill level is the mean token occupancy; the dot
// position comes from the column occupancy profile.
double decode_fill(const Tensor& frame, std::size_t dim);
double decode_dot(const Tensor& frame, std::size_t grid, std::size_t dim);
double decode_state(Scenario scenario, const Tensor& frame, const WorldConfig& cfg);

// Builds an uninterrupted clip of `length` frames. pan_loop_scene carries its
// own camera loop over the middle half of the clip.
SyntheticClip synth_world(std::uint64_t seed, Scenario scenario, std::size_t length,
                          const WorldConfig& cfg);

// Degrades the observation window; state never changes. Rebuilds the graph.
SyntheticClip apply_interruption(const SyntheticClip& clip, const InterruptionSpec& spec,
                                 const WorldConfig& cfg);

FrameGraph build_graph(const SyntheticClip& clip);

// Groups frames [frames x tokens x dim] into chunks, repeating the last frame
// to fill the final chunk.
Tensor chunk_clip(const Tensor& frames, std::size_t frames_per_chunk);

}  // namespace remind
