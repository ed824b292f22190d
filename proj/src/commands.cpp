#include "remind/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

#include "remind/container.hpp"
#include "remind/diagnostics.hpp"

namespace remind {

nlohmann::json cmd_gen_data(const RunConfig& cfg, const fs::path& out_path) {
  cfg.validate();
  Dataset ds;
  ds.provenance = provenance(cfg);
  ds.world = cfg.data.world;
  ds.chunks = cfg.data.chunks;
  ds.clips = generate_clips(cfg.data, cfg.seed, cfg.data.clips);
  write_dataset(out_path, ds);
  std::map<std::string, std::size_t> tags;
  std::size_t interrupted = 0;
  for (const SyntheticClip& c : ds.clips) {
    ++tags[to_string(c.scenario)];
    interrupted += c.graph.has_interruption();
  }
  return {{"path", out_path.string()}, {"clips", ds.clips.size()}, {"scenarios", tags},
          {"interrupted", interrupted}, {"provenance", ds.provenance}};
}

std::vector<SyntheticClip> eval_clips(const RunConfig& cfg) {
  return generate_clips(cfg.data, cfg.seed + cfg.eval.seed_offset, cfg.eval.clips);
}

void check_dataset(const Dataset& ds, const RunConfig& cfg) {
  auto mismatch = [](const std::string& what, std::size_t a, std::size_t b) {
    throw std::invalid_argument("dataset/config mismatch: " + what + " is " + std::to_string(a) +
                                " in the dataset but " + std::to_string(b) + " in the config");
  };
  if (ds.world.grid != cfg.data.world.grid) mismatch("grid", ds.world.grid, cfg.data.world.grid);
  if (ds.world.latent_dim != cfg.model.latent_dim) mismatch("latent_dim", ds.world.latent_dim, cfg.model.latent_dim);
  if (ds.world.frames_per_chunk != cfg.data.world.frames_per_chunk)
    mismatch("frames_per_chunk", ds.world.frames_per_chunk, cfg.data.world.frames_per_chunk);
  if (ds.chunks != cfg.data.chunks) mismatch("chunks", ds.chunks, cfg.data.chunks);
  if (ds.clips.empty()) throw std::invalid_argument("dataset has no clips");
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

std::vector<CameraPose> pose_range(const SyntheticClip& clip, std::size_t first_chunk, std::size_t chunks) {
  const std::size_t m = clip.frames_per_chunk();
  return {clip.poses.begin() + static_cast<std::ptrdiff_t>(first_chunk * m),
          clip.poses.begin() + static_cast<std::ptrdiff_t>((first_chunk + chunks) * m)};
}

double mean_abs(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

std::vector<double> chunk_truth(const SyntheticClip& clip, std::size_t c) {
  const std::size_t m = clip.frames_per_chunk();
  return {clip.state.begin() + static_cast<std::ptrdiff_t>(c * m),
          clip.state.begin() + static_cast<std::ptrdiff_t>((c + 1) * m)};
}

// State of the last anchor frame, repeated over a chunk.
std::vector<double> anchor_guess(const SyntheticClip& clip) {
  const std::size_t m = clip.frames_per_chunk();
  const std::size_t a = clip.graph.anchors().front();
  return std::vector<double>(m, clip.state[(a + 1) * m - 1]);
}

// Graph restricted to the first n chunks.
FrameGraph graph_prefix(const FrameGraph& g, std::size_t n) {
  FrameGraph out;
  for (const GraphNode& node : g.nodes)
    if (node.chunk_id < n) out.nodes.push_back(node);
  return out;
}

}  // namespace

TrainState train_on(const RunConfig& cfg, const std::vector<SyntheticClip>& clips, const fs::path& out_dir) {
  cfg.validate();
  if (clips.empty()) throw std::invalid_argument("train: no clips");
  fs::create_directories(out_dir);
  TrainState st(Model(cfg.model, cfg.seed), cfg.seed ^ 0x5eedULL);
  std::ofstream log(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out_dir / "metrics.jsonl").string());
  log << nlohmann::json{{"provenance", provenance(cfg)}}.dump() << '\n';

  const std::size_t m = cfg.data.world.frames_per_chunk;
  std::vector<std::size_t> regime_counts(kRegimeCount, 0);
  LossBundle last;
  double first_flow = 0.0;
  for (std::size_t it = 0; it < cfg.train.iterations; ++it) {
    std::vector<PreparedSample> batch;
    std::string regimes;
    for (std::size_t b = 0; b < cfg.train.batch; ++b) {
      const auto& clip = clips[std::uniform_int_distribution<std::size_t>(0, clips.size() - 1)(st.rng)];
      const Regime r = sample_regime(clip.graph, cfg.curriculum, st.rng);
      TrainingPlan plan = make_plan(clip.graph, m, r, cfg.curriculum, st.rng);
      batch.push_back(prepare_sample(clip, plan, st.rng));
      ++regime_counts[static_cast<std::size_t>(r)];
      regimes += (b ? "," : "") + to_string(r);
    }
    last = train_step(st, batch, cfg.optim, cfg.curriculum);
    if (it == 0) first_flow = last.flow;
    log << nlohmann::json{{"iter", st.iteration}, {"flow", last.flow}, {"delta", last.delta},
                          {"lambda", last.lambda}, {"total", last.total}, {"regime", regimes}}
               .dump()
        << '\n';
    if (cfg.train.checkpoint_every && st.iteration % cfg.train.checkpoint_every == 0)
      save_checkpoint(st, out_dir / ("checkpoint_" + std::to_string(st.iteration) + ".rmck"));
  }
  save_checkpoint(st, out_dir / "checkpoint.rmck");

  nlohmann::json counts;
  for (std::size_t i = 0; i < kRegimeCount; ++i) counts[to_string(static_cast<Regime>(i))] = regime_counts[i];
  write_json(out_dir / "summary.json",
             {{"provenance", provenance(cfg)}, {"iterations", st.iteration}, {"mode", to_string(cfg.model.mode)},
              {"parameters", st.model.parameter_count()}, {"first_flow", first_flow},
              {"final", {{"flow", last.flow}, {"delta", last.delta}, {"lambda", last.lambda}, {"total", last.total}}},
              {"regime_counts", counts}});
  return st;
}

nlohmann::json cmd_train(const RunConfig& cfg, const fs::path& data_path, const fs::path& out_dir) {
  Dataset ds = read_dataset(data_path);
  check_dataset(ds, cfg);
  train_on(cfg, ds.clips, out_dir);
  return nlohmann::json::parse(read_file(out_dir / "summary.json"));
}

std::string to_string(RolloutMode m) {
  switch (m) {
    case RolloutMode::i2v: return "i2v";
    case RolloutMode::v2v: return "v2v";
    case RolloutMode::refcache: return "refcache";
  }
  return "unknown";
}

RolloutMode parse_rollout_mode(const std::string& name) {
  for (auto m : {RolloutMode::i2v, RolloutMode::v2v, RolloutMode::refcache})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown rollout mode '" + name + "'");
}

std::vector<double> decode_chunk(const Tensor& chunk, Scenario scenario, const WorldConfig& world) {
  const std::size_t T = world.tokens_per_frame(), d = world.latent_dim;
  const std::size_t frames = chunk.size() / (T * d);
  std::vector<double> out;
  for (std::size_t f = 0; f < frames; ++f) {
    Tensor frame({T, d});
    std::copy_n(chunk.data() + f * T * d, T * d, frame.data());
    out.push_back(decode_state(scenario, frame, world));
  }
  return out;
}

ClipRollout rollout_clip(const Model& model, const RunConfig& cfg, const SyntheticClip& clip, RolloutMode mode,
                         std::uint64_t noise_seed) {
  const std::size_t C = clip.chunks();
  const std::size_t m = clip.frames_per_chunk();
  RolloutRequest req;
  req.frames_per_chunk = m;
  req.grid = cfg.data.world.grid;
  req.scenario = static_cast<std::size_t>(clip.scenario);
  req.noise_seed = noise_seed;
  std::size_t first_source = 0;
  std::size_t seeds = 1;
  if (mode == RolloutMode::v2v) {
    seeds = cfg.eval.prefix_chunks;
    if (seeds > C)
      throw std::invalid_argument("v2v needs a prefix of " + std::to_string(seeds) + " chunks but the clip has " +
                                  std::to_string(C));
  } else if (mode == RolloutMode::refcache) {
    const std::int64_t G = cfg.eval.gap_chunks;
    const std::size_t nref = cfg.eval.reference_chunks;
    if (G < 0 || static_cast<std::size_t>(G) >= C)
      throw std::invalid_argument("refcache gap of " + std::to_string(G) + " chunks leaves no target in a clip of " +
                                  std::to_string(C));
    if (nref > static_cast<std::size_t>(G))
      throw std::invalid_argument("refcache gap of " + std::to_string(G) + " chunks overlaps " +
                                  std::to_string(nref) + " reference chunks");
    ReferenceSpec ref;
    for (std::size_t c = 0; c < nref; ++c) ref.chunks.push_back(clip_chunk(clip, c, true));
    ref.poses = pose_range(clip, 0, nref);
    ref.gap_chunks = G;
    req.reference = ref;
    first_source = static_cast<std::size_t>(G);
  }
  for (std::size_t c = 0; c < seeds; ++c) req.seed_chunks.push_back(clip_chunk(clip, first_source + c));
  req.num_chunks = C - first_source - seeds;
  req.poses = pose_range(clip, first_source, C - first_source);

  ClipRollout out;
  out.result = rollout(model, req);
  const RolloutResult& res = out.result;
  nlohmann::json chunks = nlohmann::json::array();
  for (std::size_t j = 0; j < res.chunks.size(); ++j) {
    const std::size_t src = first_source + j;
    const auto decoded = decode_chunk(res.chunks[j], clip.scenario, cfg.data.world);
    const auto truth = chunk_truth(clip, src);
    chunks.push_back({{"chunk", src}, {"position", res.chunk_positions[j]}, {"generated", j >= res.seed_count},
                      {"decoded", decoded}, {"truth", truth}, {"abs_error", mean_abs(decoded, truth)}});
  }
  nlohmann::json report{{"mode", to_string(mode)}, {"scenario", to_string(clip.scenario)},
                        {"first_target_position", res.first_target_position}, {"seed_count", res.seed_count},
                        {"chunks", chunks}, {"recovery", nullptr}};
  const auto rec = clip.graph.recoveries();
  if (!rec.empty() && !clip.graph.anchors().empty() && rec.front() >= first_source + res.seed_count &&
      rec.front() < first_source + res.chunks.size()) {
    const std::size_t r = rec.front();
    const auto decoded = decode_chunk(res.chunks[r - first_source], clip.scenario, cfg.data.world);
    const auto truth = chunk_truth(clip, r);
    report["recovery"] = {{"chunk", r}, {"error", mean_abs(decoded, truth)},
                          {"baseline_error", mean_abs(anchor_guess(clip), truth)}};
  }
  out.report = report;
  return out;
}

nlohmann::json cmd_rollout(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_path,
                           RolloutMode mode, std::size_t clip_id, const fs::path& out_dir) {
  TrainState st = load_checkpoint(checkpoint, cfg.model);
  Dataset ds = read_dataset(data_path);
  check_dataset(ds, cfg);
  if (clip_id >= ds.clips.size())
    throw std::invalid_argument("clip " + std::to_string(clip_id) + " not in a dataset of " +
                                std::to_string(ds.clips.size()));
  ClipRollout r = rollout_clip(st.model, cfg, ds.clips[clip_id], mode, cfg.seed + clip_id);
  r.report["provenance"] = provenance(cfg);
  r.report["clip_id"] = clip_id;

  Container c;
  c.header = {{"kind", "rollout"}, {"provenance", provenance(cfg)}, {"mode", to_string(mode)},
              {"clip_id", clip_id}, {"chunk_positions", r.result.chunk_positions},
              {"first_target_position", r.result.first_target_position},
              {"chunk_shape", {cfg.data.world.frames_per_chunk * cfg.data.world.tokens_per_frame(),
                               cfg.model.latent_dim}}};
  for (const Tensor& t : r.result.chunks)
    for (double x : t.storage()) c.payload.push_back(static_cast<float>(x));
  write_container(out_dir / "generated.rmds", std::move(c));
  write_json(out_dir / "report.json", r.report);
  return r.report;
}

nlohmann::json RecoveryScore::to_json() const {
  return {{"clips", clips}, {"error", error}, {"baseline_error", baseline}, {"improvement", improvement()},
          {"anchor_score", anchor_score}};
}

RecoveryScore evaluate_recovery(const Model& model, const RunConfig& cfg, const std::vector<SyntheticClip>& clips) {
  const std::size_t grid = cfg.data.world.grid;
  std::vector<double> err(clips.size(), 0.0), base(clips.size(), 0.0), score(clips.size(), 0.0);
  std::vector<std::uint8_t> used(clips.size(), 0);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const SyntheticClip& clip = clips[i];
    const auto rec = clip.graph.recoveries();
    if (rec.empty() || clip.graph.anchors().empty()) continue;
    const std::size_t r = rec.front();
    const std::size_t m = clip.frames_per_chunk();
    RolloutRequest req;
    req.frames_per_chunk = m;
    req.grid = grid;
    req.scenario = static_cast<std::size_t>(clip.scenario);
    req.noise_seed = cfg.seed * 7919 + i;
    for (std::size_t c = 0; c < r; ++c) req.seed_chunks.push_back(clip_chunk(clip, c));
    req.num_chunks = 1;
    req.poses = pose_range(clip, 0, r + 1);
    RolloutResult res = rollout(model, req);

    const auto truth = chunk_truth(clip, r);
    err[i] = mean_abs(decode_chunk(res.chunks[r], clip.scenario, cfg.data.world), truth);
    base[i] = mean_abs(anchor_guess(clip), truth);
    SequenceInput in = sequence_from_chunks(res.chunks, res.chunk_positions, req.poses, m, grid, req.scenario);
    score[i] = anchor_retrieval_score(kv_importance(model, in, cfg.diag.layers), graph_prefix(clip.graph, r + 1));
    used[i] = 1;
  }
  RecoveryScore s;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (!used[i]) continue;
    ++s.clips;
    s.error += err[i];
    s.baseline += base[i];
    s.anchor_score += score[i];
  }
  if (s.clips) {
    const double n = static_cast<double>(s.clips);
    s.error /= n;
    s.baseline /= n;
    s.anchor_score /= n;
  }
  return s;
}

SelectionReport identifiability_report(const RunConfig& cfg) {
  ScoringScenario s;
  s.beta = cfg.diag.beta;
  s.kappa = cfg.diag.kappa;
  s.seed = cfg.seed;
  return identifiability_sim(s, cfg.diag.trials);
}

nlohmann::json cmd_diagnose(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_path,
                            std::size_t clip_id, const fs::path& out_dir, bool identifiability) {
  TrainState st = load_checkpoint(checkpoint, cfg.model);
  Dataset ds = read_dataset(data_path);
  check_dataset(ds, cfg);
  if (clip_id >= ds.clips.size())
    throw std::invalid_argument("missing clip " + std::to_string(clip_id) + " (dataset has " +
                                std::to_string(ds.clips.size()) + ")");
  const SyntheticClip& clip = ds.clips[clip_id];
  ImportanceMatrix mat = kv_importance(st.model, sequence_from_clip(clip), cfg.diag.layers);
  char note[64];
  std::snprintf(note, sizeof note, "config=%s seed=%llu", provenance(cfg)["config_hash"].get<std::string>().c_str(),
                static_cast<unsigned long long>(cfg.seed));
  export_heatmap(mat, out_dir / "importance", note);

  // deviation of each row from the uniform split over visible chunks
  double spread = 0.0;
  for (std::size_t i = 0; i < mat.n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      for (const auto& layer : mat.per_layer)
        spread = std::max(spread, std::abs(layer[i * mat.n + j] - 1.0 / static_cast<double>(i + 1)));
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < mat.n; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < mat.n; ++j) row.push_back(mat.ok(i, j) ? nlohmann::json(mat.at(i, j)) : nlohmann::json());
    rows.push_back(row);
  }
  nlohmann::json out{{"provenance", provenance(cfg)}, {"clip_id", clip_id}, {"scenario", to_string(clip.scenario)},
                     {"importance", rows}, {"max_uniform_deviation", spread}, {"anchor_retrieval_score", nullptr}};
  if (!clip.graph.recoveries().empty()) {
    out["anchor_retrieval_score"] = anchor_retrieval_score(mat, clip.graph);
    out["anchors"] = clip.graph.anchors();
    out["recoveries"] = clip.graph.recoveries();
  }
  write_json(out_dir / "scores.json", out);
  if (identifiability) {
    nlohmann::json rep = identifiability_report(cfg).to_json();
    rep["provenance"] = provenance(cfg);
    write_json(out_dir / "identifiability.json", rep);
    out["identifiability"] = rep;
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "mode,recovery_error,baseline_error,improvement,anchor_score,final_flow\n" << std::fixed
      << std::setprecision(6);
  for (const AblationRow& r : rows)
    out << to_string(r.mode) << ',' << r.score.error << ',' << r.score.baseline << ',' << r.score.improvement()
        << ',' << r.score.anchor_score << ',' << r.final_flow << '\n';
  return out.str();
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::vector<SyntheticClip>& clips,
                                      const fs::path& out_dir) {
  const std::vector<SyntheticClip> held_out = eval_clips(cfg);
  std::vector<AblationRow> rows(cfg.ablate_modes.size());
  std::vector<std::string> errors(rows.size());
  const int n = static_cast<int>(rows.size());
#pragma omp parallel for schedule(dynamic) if (cfg.ablate_parallel)
  for (int k = 0; k < n; ++k) {
    try {
      RunConfig c = cfg;
      c.model.mode = cfg.ablate_modes[static_cast<std::size_t>(k)];
      TrainState st = train_on(c, clips, out_dir / to_string(c.model.mode));
      rows[k].mode = c.model.mode;
      rows[k].score = evaluate_recovery(st.model, c, held_out);
      const auto summary = nlohmann::json::parse(read_file(out_dir / to_string(c.model.mode) / "summary.json"));
      rows[k].final_flow = summary["final"]["flow"].get<double>();
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(k)] = e.what();
    }
  }
  for (std::size_t k = 0; k < errors.size(); ++k)
    if (!errors[k].empty()) throw std::runtime_error("ablate " + to_string(cfg.ablate_modes[k]) + ": " + errors[k]);
  write_file(out_dir / "ablation.csv", ablation_csv(rows));
  return rows;
}

nlohmann::json cmd_ablate(const RunConfig& cfg, const fs::path& data_path, const fs::path& out_dir) {
  Dataset ds = read_dataset(data_path);
  check_dataset(ds, cfg);
  const auto rows = run_ablation(cfg, ds.clips, out_dir);
  nlohmann::json out = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    nlohmann::json j = r.score.to_json();
    j["mode"] = to_string(r.mode);
    j["final_flow"] = r.final_flow;
    out.push_back(j);
  }
  return {{"provenance", provenance(cfg)}, {"rows", out}};
}

}  // namespace remind
