#include "remind/dataset.hpp"

#include <random>
#include <stdexcept>

#include "remind/container.hpp"

namespace remind {

std::vector<SyntheticClip> generate_clips(const DataConfig& data, std::uint64_t seed, std::size_t count) {
  data.world.validate();
  std::vector<Scenario> names;
  std::vector<double> weights;
  for (const auto& [s, w] : data.scenario_mix) {
    names.push_back(s);
    weights.push_back(w);
  }
  std::vector<SyntheticClip> out;
  out.reserve(count);
  const std::size_t m = data.world.frames_per_chunk;
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
    std::mt19937_64 rng(seq);
    const Scenario sc = names[std::discrete_distribution<std::size_t>(weights.begin(), weights.end())(rng)];
    const std::uint64_t clip_seed = rng();
    const bool occlude = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < data.occlusion_prob;
    SyntheticClip clip = synth_world(clip_seed, sc, data.frames(), data.world);
    if (occlude && !clip.interruption) {
      InterruptionSpec spec{data.interruption, data.window_start * m, data.window_chunks * m, data.magnitude};
      clip = apply_interruption(clip, spec, data.world);
    }
    out.push_back(std::move(clip));
  }
  return out;
}

nlohmann::json graph_to_json(const FrameGraph& g) {
  nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array();
  for (const GraphNode& n : g.nodes)
    nodes.push_back({{"chunk", n.chunk_id}, {"role", to_string(n.role)}, {"protected", n.protected_anchor}});
  for (const GraphEdge& e : g.edges)
    edges.push_back({{"from", e.from}, {"to", e.to}, {"kind", e.kind == EdgeKind::chain ? "chain" : "memory"}});
  nlohmann::json j{{"nodes", nodes}, {"edges", edges}, {"degradation", nullptr}, {"degradation_start_frame", nullptr}};
  if (g.degradation) j["degradation"] = {g.degradation->first, g.degradation->second};
  if (g.degradation_start_frame) j["degradation_start_frame"] = *g.degradation_start_frame;
  return j;
}

FrameGraph graph_from_json(const nlohmann::json& j) {
  FrameGraph g;
  for (const auto& n : j.at("nodes"))
    g.nodes.push_back({n.at("chunk").get<std::size_t>(), parse_node_role(n.at("role").get<std::string>()),
                       n.at("protected").get<bool>()});
  for (const auto& e : j.at("edges")) {
    const std::string kind = e.at("kind").get<std::string>();
    if (kind != "chain" && kind != "memory") throw std::runtime_error("dataset: unknown edge kind '" + kind + "'");
    g.edges.push_back({e.at("from").get<std::size_t>(), e.at("to").get<std::size_t>(),
                       kind == "chain" ? EdgeKind::chain : EdgeKind::memory});
  }
  if (!j.at("degradation").is_null())
    g.degradation = std::make_pair(j["degradation"][0].get<std::size_t>(), j["degradation"][1].get<std::size_t>());
  if (!j.at("degradation_start_frame").is_null())
    g.degradation_start_frame = j["degradation_start_frame"].get<std::size_t>();
  validate_graph(g);
  return g;
}

namespace {

nlohmann::json world_to_json(const WorldConfig& w) {
  return {{"grid", w.grid}, {"latent_dim", w.latent_dim}, {"frames_per_chunk", w.frames_per_chunk},
          {"rate_min", w.rate_min}, {"rate_max", w.rate_max}, {"speed_min", w.speed_min}, {"speed_max", w.speed_max}};
}

WorldConfig world_from_json(const nlohmann::json& j) {
  WorldConfig w;
  w.grid = j.at("grid");
  w.latent_dim = j.at("latent_dim");
  w.frames_per_chunk = j.at("frames_per_chunk");
  w.rate_min = j.at("rate_min");
  w.rate_max = j.at("rate_max");
  w.speed_min = j.at("speed_min");
  w.speed_max = j.at("speed_max");
  w.validate();
  return w;
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  Container c;
  const std::size_t m = ds.world.frames_per_chunk, T = ds.world.tokens_per_frame(), d = ds.world.latent_dim;
  const std::size_t per = ds.chunks * m * T * d;
  nlohmann::json clips = nlohmann::json::array();
  c.payload.reserve(2 * per * ds.clips.size());
  for (const SyntheticClip& clip : ds.clips) {
    if (clip.latents.size() != per || clip.clean_latents.size() != per)
      throw std::invalid_argument("write_dataset: clip shape " + shape_string(clip.latents.shape()) +
                                  " does not match the dataset layout");
    nlohmann::json poses = nlohmann::json::array();
    for (const CameraPose& p : clip.poses) poses.push_back(pose_to_json(p));
    nlohmann::json rec{{"scenario", to_string(clip.scenario)}, {"frames", clip.frames}, {"rate", clip.rate},
                       {"state", clip.state}, {"poses", poses}, {"graph", graph_to_json(clip.graph)},
                       {"interruption", nullptr}};
    if (clip.interruption)
      rec["interruption"] = {{"kind", to_string(clip.interruption->kind)}, {"onset", clip.interruption->onset},
                             {"duration", clip.interruption->duration}, {"magnitude", clip.interruption->magnitude}};
    clips.push_back(rec);
    for (double x : clip.latents.storage()) c.payload.push_back(static_cast<float>(x));
    for (double x : clip.clean_latents.storage()) c.payload.push_back(static_cast<float>(x));
  }
  c.header = {{"kind", "dataset"}, {"provenance", ds.provenance}, {"clip_count", ds.clips.size()},
              {"chunks", ds.chunks}, {"world", world_to_json(ds.world)}, {"clips", clips}};
  write_container(path, std::move(c));
}

Dataset read_dataset(const std::filesystem::path& path) {
  Container c = read_container(path);
  const auto& h = c.header;
  if (h.value("kind", "") != "dataset") throw std::runtime_error(path.string() + ": not a dataset container");
  Dataset ds;
  ds.provenance = h.at("provenance");
  ds.world = world_from_json(h.at("world"));
  ds.chunks = h.at("chunks");
  const std::size_t n = h.at("clip_count");
  const std::size_t m = ds.world.frames_per_chunk, T = ds.world.tokens_per_frame(), d = ds.world.latent_dim;
  const std::size_t per = ds.chunks * m * T * d;
  if (h.at("clips").size() != n || c.payload.size() != 2 * per * n)
    throw std::runtime_error(path.string() + ": header sizes do not match the payload");
  std::size_t pos = 0;
  for (const auto& rec : h.at("clips")) {
    SyntheticClip clip;
    clip.scenario = parse_scenario(rec.at("scenario"));
    clip.frames = rec.at("frames");
    clip.rate = rec.at("rate");
    clip.state = rec.at("state").get<std::vector<double>>();
    for (const auto& p : rec.at("poses")) clip.poses.push_back(pose_from_json(p));
    clip.graph = graph_from_json(rec.at("graph"));
    if (!rec.at("interruption").is_null()) {
      const auto& s = rec["interruption"];
      clip.interruption = InterruptionSpec{parse_interruption_kind(s.at("kind")), s.at("onset"), s.at("duration"),
                                           s.at("magnitude")};
    }
    const std::vector<std::size_t> shape{ds.chunks, m, T, d};
    clip.latents = Tensor(shape, std::vector<double>(c.payload.begin() + pos, c.payload.begin() + pos + per));
    pos += per;
    clip.clean_latents = Tensor(shape, std::vector<double>(c.payload.begin() + pos, c.payload.begin() + pos + per));
    pos += per;
    if (clip.state.size() != ds.chunks * m || clip.poses.size() != ds.chunks * m)
      throw std::runtime_error(path.string() + ": per-frame records do not match the clip length");
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

Tensor clip_chunk(const SyntheticClip& clip, std::size_t c, bool clean) {
  if (c >= clip.chunks()) throw std::out_of_range("clip chunk " + std::to_string(c) + " out of range");
  const Tensor& src = clean ? clip.clean_latents : clip.latents;
  const std::size_t rows = clip.frames_per_chunk() * clip.tokens();
  Tensor out({rows, clip.dim()});
  std::copy_n(src.data() + c * rows * clip.dim(), rows * clip.dim(), out.data());
  return out;
}

}  // namespace remind
