#include "remind/frame_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace remind {

std::string to_string(NodeRole r) {
  switch (r) {
    case NodeRole::plain: return "plain";
    case NodeRole::anchor: return "anchor";
    case NodeRole::interruption: return "interruption";
    case NodeRole::recovery: return "recovery";
  }
  return "unknown";
}

NodeRole parse_node_role(const std::string& name) {
  if (name == "plain") return NodeRole::plain;
  if (name == "anchor") return NodeRole::anchor;
  if (name == "interruption") return NodeRole::interruption;
  if (name == "recovery") return NodeRole::recovery;
  throw std::invalid_argument("unknown node role '" + name + "'");
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::filling_bar: return "filling_bar";
    case Scenario::moving_dot: return "moving_dot";
    case Scenario::pan_loop_scene: return "pan_loop_scene";
  }
  return "unknown";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "filling_bar") return Scenario::filling_bar;
  if (name == "moving_dot") return Scenario::moving_dot;
  if (name == "pan_loop_scene") return Scenario::pan_loop_scene;
  throw std::invalid_argument("unknown scenario '" + name + "'");
}

std::string to_string(InterruptionKind k) {
  switch (k) {
    case InterruptionKind::camera_loop: return "camera_loop";
    case InterruptionKind::light_toggle: return "light_toggle";
    case InterruptionKind::occluder: return "occluder";
    case InterruptionKind::zoom: return "zoom";
  }
  return "unknown";
}

InterruptionKind parse_interruption_kind(const std::string& name) {
  if (name == "camera_loop") return InterruptionKind::camera_loop;
  if (name == "light_toggle") return InterruptionKind::light_toggle;
  if (name == "occluder") return InterruptionKind::occluder;
  if (name == "zoom") return InterruptionKind::zoom;
  throw std::invalid_argument("unknown interruption kind '" + name + "'");
}

std::vector<std::size_t> FrameGraph::with_role(NodeRole role) const {
  std::vector<std::size_t> out;
  for (const GraphNode& n : nodes)
    if (n.role == role) out.push_back(n.chunk_id);
  return out;
}

void validate_graph(const FrameGraph& g) {
  auto fail = [](const std::string& what) { throw std::logic_error("frame graph: " + what); };
  const std::size_t n = g.nodes.size();
  if (n == 0) fail("no nodes");
  for (std::size_t i = 0; i < n; ++i)
    if (g.nodes[i].chunk_id != i) fail("node ids are not 0..n-1 in order");
  std::size_t chain = 0;
  for (const GraphEdge& e : g.edges) {
    if (e.from >= n || e.to >= n) fail("edge endpoint out of range");
    if (e.kind == EdgeKind::chain) {
      if (e.to != e.from + 1) fail("chain edge does not join consecutive chunks");
      ++chain;
    }
  }
  if (chain != n - 1) fail("chain edges missing");
  for (const GraphNode& node : g.nodes)
    if (node.protected_anchor && node.role != NodeRole::anchor) fail("protected non-anchor node");

  if (!g.degradation) {
    for (const GraphNode& node : g.nodes)
      if (node.role != NodeRole::plain) fail("roles assigned without a degradation interval");
    for (const GraphEdge& e : g.edges)
      if (e.kind == EdgeKind::memory) fail("memory edge without a degradation interval");
    return;
  }
  const auto [lo, hi] = *g.degradation;
  if (lo > hi || hi >= n) fail("degradation interval out of range");
  for (std::size_t i = 0; i < n; ++i) {
    const bool inside = i >= lo && i <= hi;
    if (inside != (g.nodes[i].role == NodeRole::interruption))
      fail("interruption nodes differ from the degradation interval");
  }
  const auto anchors = g.anchors();
  const auto recoveries = g.recoveries();
  if (anchors.empty()) fail("interruption without an anchor");
  if (recoveries.empty()) fail("interruption without a recovery node");
  bool any_protected = false;
  for (std::size_t a : anchors) {
    any_protected = any_protected || g.nodes[a].protected_anchor;
    if (a >= lo) fail("anchor does not precede the degradation interval");
  }
  if (!any_protected) fail("no protected anchor");
  for (std::size_t r : recoveries) {
    if (r <= hi) fail("recovery node does not follow the degradation interval");
    bool linked = false;
    for (const GraphEdge& e : g.edges)
      if (e.kind == EdgeKind::memory && e.from == r && e.to < r &&
          g.nodes[e.to].role == NodeRole::anchor)
        linked = true;
    if (!linked) fail("recovery node lacks a memory edge to an earlier anchor");
  }
}

void WorldConfig::validate() const {
  if (grid == 0) throw std::invalid_argument("world: zero grid");
  if (latent_dim == 0 || latent_dim % 8 != 0)
    throw std::invalid_argument("world: latent_dim must be a positive multiple of 8");
  if (frames_per_chunk == 0) throw std::invalid_argument("world: zero frames per chunk");
  if (!(rate_min >= 0.0 && rate_min <= rate_max)) throw std::invalid_argument("world: bad rate range");
  if (!(speed_min >= 0.0 && speed_min <= speed_max)) throw std::invalid_argument("world: bad speed range");
}

Tensor SyntheticClip::frame(std::size_t k, bool clean) const {
  const Tensor& src = clean ? clean_latents : latents;
  const std::size_t m = frames_per_chunk(), t = tokens(), d = dim();
  if (k >= chunks() * m) throw std::out_of_range("clip frame index out of range");
  Tensor out({t, d});
  std::copy_n(src.storage().begin() + static_cast<std::ptrdiff_t>(k * t * d), t * d,
              out.storage().begin());
  return out;
}

Tensor fill_direction(std::size_t dim) {
  Tensor s({dim});
  for (std::size_t d = 0; d < dim; ++d) s[d] = d % 2 == 0 ? 2.0 : -2.0;
  return s;
}

Tensor background_pattern(std::size_t dim) {
  Tensor w({dim});
  for (std::size_t d = 0; d < dim; ++d) w[d] = 0.6 * (d % 8 < 4 ? 1.0 : -1.0);
  return w;
}

Tensor occluder_pattern(std::size_t dim) {
  Tensor t({dim});
  for (std::size_t d = 0; d < dim; ++d) t[d] = 0.8 * (d % 4 < 2 ? 1.0 : -1.0);
  return t;
}

namespace {

constexpr double kQuarterTurn = std::numbers::pi / 2.0;

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

double yaw_of(const Eigen::Matrix3d& r) { return std::atan2(r(0, 2), r(0, 0)); }

void put_token(Tensor& frame, std::size_t token, const Tensor& pattern, double scale) {
  for (std::size_t d = 0; d < pattern.size(); ++d) frame(token, d) = scale * pattern[d];
}

}  // namespace

Tensor render_frame(Scenario scenario, double state, const CameraPose& pose,
                    const WorldConfig& cfg) {
  const std::size_t g = cfg.grid, dim = cfg.latent_dim;
  const Tensor s = fill_direction(dim), w = background_pattern(dim);
  const double gd = static_cast<double>(g);
  const double shift = yaw_of(pose.rotation) / kQuarterTurn;
  const double hu = 1.0 / (gd * pose.fx), hv = 1.0 / (gd * pose.fy);
  Tensor frame({g * g, dim});
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c) {
      const std::size_t tok = r * g + c;
      const double u = shift + 0.5 + ((c + 0.5) / gd - 0.5) / pose.fx;
      const double v = 0.5 + ((r + 0.5) / gd - 0.5) / pose.fy;
      if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) {
        put_token(frame, tok, w, 1.0);
        continue;
      }
      double occ = 0.0;
      if (scenario == Scenario::moving_dot) {
        double du = std::fmod(u - state, 1.0);
        if (du < -0.5) du += 1.0;
        if (du >= 0.5) du -= 1.0;
        const double across = std::max(0.0, 1.0 - std::abs(du) / hu);
        const double down = overlap(v - hv / 2, v + hv / 2, 0.5 - 1.0 / gd, 0.5 + 1.0 / gd) / hv;
        occ = across * down;
      } else {
        occ = std::clamp((v + hv / 2 - (1.0 - state)) / hv, 0.0, 1.0);
      }
      put_token(frame, tok, s, occ - 0.5);
    }
  return frame;
}

namespace {

std::vector<double> occupancy(const Tensor& frame, std::size_t dim) {
  const Tensor s = fill_direction(dim);
  double ss = 0.0;
  for (double x : s.storage()) ss += x * x;
  const std::size_t n = frame.size() / dim;
  std::vector<double> occ(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t d = 0; d < dim; ++d) dot += frame[i * dim + d] * s[d];
    occ[i] = std::clamp(dot / ss + 0.5, 0.0, 1.0);
  }
  return occ;
}

}  // namespace

double decode_fill(const Tensor& frame, std::size_t dim) {
  const auto occ = occupancy(frame, dim);
  double sum = 0.0;
  for (double o : occ) sum += o;
  return sum / static_cast<double>(occ.size());
}

double decode_dot(const Tensor& frame, std::size_t grid, std::size_t dim) {
  const auto occ = occupancy(frame, dim);
  std::vector<double> col(grid, 0.0);
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) col[c] += occ[r * grid + c];
  const std::size_t c = static_cast<std::size_t>(std::max_element(col.begin(), col.end()) - col.begin());
  const double lo = col[(c + grid - 1) % grid], hi = col[(c + 1) % grid];
  const double total = lo + col[c] + hi;
  const double offset = total > 0.0 ? (hi - lo) / total : 0.0;
  double x = (static_cast<double>(c) + 0.5 + offset) / static_cast<double>(grid);
  x -= std::floor(x);
  return x;
}

double decode_state(Scenario scenario, const Tensor& frame, const WorldConfig& cfg) {
  if (scenario == Scenario::moving_dot) return decode_dot(frame, cfg.grid, cfg.latent_dim);
  return decode_fill(frame, cfg.latent_dim);
}

Tensor chunk_clip(const Tensor& frames, std::size_t frames_per_chunk) {
  if (frames_per_chunk == 0) throw std::invalid_argument("chunk_clip: zero chunk size");
  if (frames.rank() != 3) throw std::invalid_argument("chunk_clip: expected [frames x tokens x dim]");
  const std::size_t f = frames.shape()[0], t = frames.shape()[1], d = frames.shape()[2];
  if (f == 0) throw std::invalid_argument("chunk_clip: no frames");
  const std::size_t chunks = (f + frames_per_chunk - 1) / frames_per_chunk;
  Tensor out({chunks, frames_per_chunk, t, d});
  const std::size_t stride = t * d;
  for (std::size_t k = 0; k < chunks * frames_per_chunk; ++k) {
    const std::size_t src = std::min(k, f - 1);
    std::copy_n(frames.storage().begin() + static_cast<std::ptrdiff_t>(src * stride), stride,
                out.storage().begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return out;
}

namespace {

double loop_yaw(std::size_t k, const InterruptionSpec& spec) {
  const double phase = std::numbers::pi * static_cast<double>(k - spec.onset + 1) /
                       static_cast<double>(spec.duration + 1);
  return spec.magnitude * kQuarterTurn * std::sin(phase);
}

// Renders every frame of the clip from its state and poses, padding the last
// chunk by repetition.
Tensor render_clip(const SyntheticClip& clip, const WorldConfig& cfg) {
  const std::size_t t = cfg.tokens_per_frame(), d = cfg.latent_dim;
  Tensor frames({clip.frames, t, d});
  for (std::size_t k = 0; k < clip.frames; ++k) {
    Tensor f = render_frame(clip.scenario, clip.state[k], clip.poses[k], cfg);
    std::copy(f.storage().begin(), f.storage().end(),
              frames.storage().begin() + static_cast<std::ptrdiff_t>(k * t * d));
  }
  return chunk_clip(frames, cfg.frames_per_chunk);
}

void pad_per_frame(SyntheticClip& clip, std::size_t padded) {
  clip.state.resize(padded, clip.state.back());
  clip.poses.resize(padded, clip.poses.back());
}

void repad_latents(SyntheticClip& clip) {
  const std::size_t stride = clip.tokens() * clip.dim();
  const std::size_t padded = clip.chunks() * clip.frames_per_chunk();
  auto& data = clip.latents.storage();
  for (std::size_t k = clip.frames; k < padded; ++k)
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>((clip.frames - 1) * stride), stride,
                data.begin() + static_cast<std::ptrdiff_t>(k * stride));
}

}  // namespace

SyntheticClip synth_world(std::uint64_t seed, Scenario scenario, std::size_t length,
                          const WorldConfig& cfg) {
  cfg.validate();
  if (length == 0) throw std::invalid_argument("synth_world: zero length");
  std::mt19937_64 rng(seed);
  SyntheticClip clip;
  clip.scenario = scenario;
  clip.frames = length;
  clip.poses.assign(length, CameraPose::identity());
  clip.state.resize(length);
  if (scenario == Scenario::moving_dot) {
    const double start = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    clip.rate = std::uniform_real_distribution<double>(cfg.speed_min, cfg.speed_max)(rng);
    for (std::size_t k = 0; k < length; ++k) {
      double x = start + static_cast<double>(k) * clip.rate;
      clip.state[k] = x - std::floor(x);
    }
  } else {
    clip.rate = std::uniform_real_distribution<double>(cfg.rate_min, cfg.rate_max)(rng);
    for (std::size_t k = 0; k < length; ++k)
      clip.state[k] = std::min(1.0, static_cast<double>(k) * clip.rate);
  }
  const std::size_t padded =
      (length + cfg.frames_per_chunk - 1) / cfg.frames_per_chunk * cfg.frames_per_chunk;
  pad_per_frame(clip, padded);
  clip.latents = render_clip(clip, cfg);
  clip.clean_latents = clip.latents;
  clip.graph = build_graph(clip);
  if (scenario == Scenario::pan_loop_scene) {
    // keep one clean chunk on either side of the loop
    const std::size_t m = cfg.frames_per_chunk;
    const std::size_t onset = std::max(length / 4, m);
    const std::size_t room = length > onset + m ? length - onset - m : 0;
    const std::size_t duration = std::min(length / 2, room);
    if (duration > 0)
      return apply_interruption(clip, {InterruptionKind::camera_loop, onset, duration, 1.0}, cfg);
  }
  return clip;
}

SyntheticClip apply_interruption(const SyntheticClip& clip, const InterruptionSpec& spec,
                                 const WorldConfig& cfg) {
  if (spec.onset + spec.duration > clip.frames)
    throw std::invalid_argument("apply_interruption: window [" + std::to_string(spec.onset) + ", " +
                                std::to_string(spec.onset + spec.duration) +
                                ") exceeds clip of " + std::to_string(clip.frames) + " frames");
  if (!(spec.magnitude >= 0.0 && spec.magnitude <= 1.0))
    throw std::invalid_argument("apply_interruption: magnitude outside [0, 1]");
  if (clip.interruption) throw std::invalid_argument("apply_interruption: clip already interrupted");
  if (spec.duration == 0) return clip;

  SyntheticClip out = clip;
  out.interruption = spec;
  const std::size_t g = cfg.grid, dim = cfg.latent_dim, t = g * g;
  auto frame_at = [&](std::size_t k, std::size_t tok, std::size_t d) -> double& {
    return out.latents[(k * t + tok) * dim + d];
  };
  switch (spec.kind) {
    case InterruptionKind::light_toggle:
      for (std::size_t k = spec.onset; k < spec.onset + spec.duration; ++k)
        for (std::size_t i = 0; i < t * dim; ++i) out.latents[k * t * dim + i] *= 1.0 - spec.magnitude;
      break;
    case InterruptionKind::occluder: {
      const Tensor pat = occluder_pattern(dim);
      const auto cols = static_cast<std::size_t>(std::ceil(spec.magnitude * static_cast<double>(g) - 1e-12));
      for (std::size_t k = spec.onset; k < spec.onset + spec.duration; ++k)
        for (std::size_t r = 0; r < g; ++r)
          for (std::size_t c = 0; c < std::min(cols, g); ++c) {
            const double sign = (r + c) % 2 == 0 ? 1.0 : -1.0;
            for (std::size_t d = 0; d < dim; ++d) frame_at(k, r * g + c, d) = sign * pat[d];
          }
      break;
    }
    case InterruptionKind::camera_loop:
    case InterruptionKind::zoom:
      for (std::size_t k = spec.onset; k < spec.onset + spec.duration; ++k) {
        CameraPose& p = out.poses[k];
        if (spec.kind == InterruptionKind::camera_loop) {
          p.rotation = p.rotation * yaw_rotation(loop_yaw(k, spec));
        } else {
          p.fx *= 1.0 + spec.magnitude;
          p.fy *= 1.0 + spec.magnitude;
        }
        Tensor f = render_frame(out.scenario, out.state[k], p, cfg);
        std::copy(f.storage().begin(), f.storage().end(),
                  out.latents.storage().begin() + static_cast<std::ptrdiff_t>(k * t * dim));
      }
      break;
  }
  for (std::size_t k = out.frames; k < out.poses.size(); ++k) out.poses[k] = out.poses[out.frames - 1];
  repad_latents(out);
  out.graph = build_graph(out);
  return out;
}

FrameGraph build_graph(const SyntheticClip& clip) {
  FrameGraph g;
  const std::size_t n = clip.chunks(), m = clip.frames_per_chunk();
  for (std::size_t i = 0; i < n; ++i) g.nodes.push_back({i, NodeRole::plain, false});
  for (std::size_t i = 0; i + 1 < n; ++i) g.edges.push_back({i, i + 1, EdgeKind::chain});
  if (!clip.interruption || clip.interruption->duration == 0) return g;
  const InterruptionSpec& spec = *clip.interruption;
  const std::size_t first = spec.onset / m;
  const std::size_t last = (spec.onset + spec.duration - 1) / m;
  if (first == 0) throw std::invalid_argument("build_graph: window leaves no clean chunk before it");
  const std::size_t anchor = first - 1;
  std::size_t recovery = last + 1;
  if (spec.kind == InterruptionKind::camera_loop) {
    const std::size_t ref_frame = anchor * m + m - 1;
    const std::size_t from = spec.onset + spec.duration / 2;
    if (from < clip.frames) {
      std::span<const CameraPose> traj(clip.poses.data(), clip.frames);
      const std::size_t hit = nearest_pose_index(traj, clip.poses[ref_frame], from);
      recovery = std::max(recovery, hit / m);
    }
  }
  if (recovery >= n) throw std::invalid_argument("build_graph: window leaves no clean chunk after it");
  for (std::size_t i = first; i <= last; ++i) g.nodes[i].role = NodeRole::interruption;
  g.nodes[anchor].role = NodeRole::anchor;
  g.nodes[anchor].protected_anchor = true;
  g.nodes[recovery].role = NodeRole::recovery;
  g.edges.push_back({recovery, anchor, EdgeKind::memory});
  g.degradation = std::make_pair(first, last);
  g.degradation_start_frame = spec.onset;
  return g;
}

}  // namespace remind
