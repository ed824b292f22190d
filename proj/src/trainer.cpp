#include "remind/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "remind/container.hpp"

namespace remind {

AttentionConfig ModelConfig::attention() const {
  AttentionConfig a;
  a.heads = heads;
  a.head_dim = head_dim;
  a.mode = mode;
  a.delta_all_bands = delta_all_bands;
  a.phase_hidden = phase_hidden;
  a.rope_base = rope_base;
  return a;
}

void ModelConfig::validate() const {
  if (heads == 0 || head_dim == 0 || token_dim == 0 || mlp_ratio == 0 || latent_dim == 0 ||
      scenarios == 0 || phase_hidden == 0 || sampler_steps == 0)
    throw std::invalid_argument("model: counts must be >= 1");
  attention().validate();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"layers", layers},         {"heads", heads},
          {"head_dim", head_dim},     {"token_dim", token_dim},
          {"mlp_ratio", mlp_ratio},   {"latent_dim", latent_dim},
          {"scenarios", scenarios},   {"mode", to_string(mode)},
          {"delta_all_bands", delta_all_bands}, {"phase_hidden", phase_hidden},
          {"rope_base", rope_base},   {"sampler_steps", sampler_steps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.token_dim = j.at("token_dim").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.scenarios = j.at("scenarios").get<std::size_t>();
  c.mode = parse_attention_mode(j.at("mode").get<std::string>());
  c.delta_all_bands = j.at("delta_all_bands").get<bool>();
  c.phase_hidden = j.at("phase_hidden").get<std::size_t>();
  c.rope_base = j.at("rope_base").get<double>();
  c.sampler_steps = j.at("sampler_steps").get<std::size_t>();
  return c;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_json() == b.to_json(); }

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t d = cfg.token_dim, inner = cfg.heads * cfg.head_dim;
  const std::size_t hidden = d * cfg.mlp_ratio;
  const AttentionConfig a = cfg.attention();
  auto add = [&](const std::string& name, std::vector<std::size_t> shape, double stddev,
                 double fill = 0.0) {
    Tensor t(std::move(shape), fill);
    if (stddev > 0.0)
      for (double& x : t.storage()) x = std::normal_distribution<double>(0.0, stddev)(rng);
    names_.push_back(name);
    params_.push_back(std::move(t));
  };
  auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  add("in_proj", {cfg.latent_dim, d}, fan(cfg.latent_dim));
  add("in_bias", {d}, 0.0);
  add("time_w", {7, d}, fan(7));
  add("time_b", {d}, 0.0);
  add("scenario", {cfg.scenarios, d}, 0.1);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "norm1", {d}, 0.0, 1.0);
    add(p + "wq", {d, inner}, fan(d));
    add(p + "wk", {d, inner}, fan(d));
    add(p + "wv", {d, inner}, fan(d));
    add(p + "wo", {inner, d}, fan(inner));
    add(p + "phase.w1", {kPoseDescriptorSize, cfg.phase_hidden}, fan(kPoseDescriptorSize));
    add(p + "phase.b1", {cfg.phase_hidden}, 0.0);
    add(p + "phase.w2", {cfg.phase_hidden, a.delta_bands()}, 0.0);
    add(p + "phase.b2", {a.delta_bands()}, 0.0);
    add(p + "w_dv", {inner + kSixDofSize, inner}, 0.0);
    add(p + "w_do", {inner + kSixDofSize, d}, 0.0);
    add(p + "norm2", {d}, 0.0, 1.0);
    add(p + "mlp.w1", {d, hidden}, fan(d));
    add(p + "mlp.b1", {hidden}, 0.0);
    add(p + "mlp.w2", {hidden, d}, fan(hidden));
    add(p + "mlp.b2", {d}, 0.0);
  }
  add("final_norm", {d}, 0.0, 1.0);
  add("out_proj", {d, cfg.latent_dim}, fan(d));
  add("out_bias", {cfg.latent_dim}, 0.0);
}

std::size_t Model::index_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params_) n += t.size();
  return n;
}

void SequenceInput::validate(std::size_t latent_dim) const {
  const std::size_t f = frames.size();
  if (f == 0) throw std::invalid_argument("sequence: no frames");
  if (frames.poses.size() != f || frame_sigma.size() != f || frame_chunk.size() != f)
    throw std::invalid_argument("sequence: per-frame tables differ in length");
  if (x.rank() != 2 || x.rows() != f * tokens_per_frame() || x.cols() != latent_dim)
    throw std::invalid_argument("sequence: latents are " + shape_string(x.shape()) +
                                ", expected [" + std::to_string(f * tokens_per_frame()) + ", " +
                                std::to_string(latent_dim) + "]");
  for (std::size_t i = 1; i < f; ++i) {
    if (frame_chunk[i] < frame_chunk[i - 1]) throw std::invalid_argument("sequence: chunk ids decrease");
    if (frames.positions[i] <= frames.positions[i - 1])
      throw std::invalid_argument("sequence: frame positions not increasing");
  }
  for (double s : frame_sigma)
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("sequence: sigma outside [0, 1]");
}

std::vector<Var> bind_parameters(Tape& tape, const Model& model) {
  std::vector<Var> out;
  out.reserve(model.params().size());
  for (const Tensor& t : model.params()) out.push_back(tape.parameter(t));
  return out;
}

namespace {

Tensor time_features(const SequenceInput& in) {
  const std::size_t t = in.tokens_per_frame();
  Tensor out({in.frames.size() * t, 7});
  for (std::size_t f = 0; f < in.frames.size(); ++f) {
    const double s = in.frame_sigma[f];
    for (std::size_t k = 0; k < t; ++k) {
      const std::size_t r = f * t + k;
      out(r, 0) = s;
      for (std::size_t j = 1; j <= 3; ++j) {
        out(r, 2 * j - 1) = std::sin(std::numbers::pi * s * static_cast<double>(j));
        out(r, 2 * j) = std::cos(std::numbers::pi * s * static_cast<double>(j));
      }
    }
  }
  return out;
}

std::shared_ptr<const std::vector<std::uint8_t>> block_mask(const SequenceInput& in,
                                                            std::size_t history_rows) {
  const std::size_t t = in.tokens_per_frame();
  const std::size_t n = in.frames.size() * t, m = history_rows + n;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(n * m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ci = in.frame_chunk[i / t];
    std::uint8_t* row = mask->data() + i * m;
    std::fill(row, row + history_rows, 1);
    for (std::size_t j = 0; j < n; ++j)
      if (in.frame_chunk[j / t] <= ci) row[history_rows + j] = 1;
  }
  return mask;
}

}  // namespace

ForwardOutput forward(Tape& tape, const std::vector<Var>& params, const ModelConfig& cfg,
                      const SequenceInput& in, const History* history, bool capture) {
  in.validate(cfg.latent_dim);
  if (in.scenario >= cfg.scenarios) throw std::invalid_argument("forward: scenario id out of range");
  const std::size_t per_layer = 16, globals_front = 5;
  if (params.size() != globals_front + per_layer * cfg.layers + 3)
    throw std::invalid_argument("forward: parameter list does not match the model config");
  const std::size_t t = in.tokens_per_frame();
  const std::size_t rows = in.frames.size() * t;
  const AttentionConfig acfg = cfg.attention();

  const bool has_history = history && !history->empty();
  if (has_history) {
    if (history->tokens_per_frame != t)
      throw std::invalid_argument("forward: history tokens per frame differ from the block");
    if (history->keys.size() != cfg.layers)
      throw std::invalid_argument("forward: history layer count differs from the model");
    if (history->positions.back() >= in.frames.positions.front())
      throw std::invalid_argument("forward: history positions must precede the block");
  }
  const std::size_t hist_frames = has_history ? history->frames() : 0;
  const std::size_t hist_rows = hist_frames * t;

  FrameTable all_frames;
  if (has_history) {
    all_frames.positions = history->positions;
    all_frames.poses = history->poses;
  }
  all_frames.positions.insert(all_frames.positions.end(), in.frames.positions.begin(),
                              in.frames.positions.end());
  all_frames.poses.insert(all_frames.poses.end(), in.frames.poses.begin(), in.frames.poses.end());
  const TokenGrid key_tokens = frame_major_grid(0, hist_frames + in.frames.size(), in.grid);
  const TokenGrid query_tokens = frame_major_grid(hist_frames, in.frames.size(), in.grid);
  auto mask = block_mask(in, hist_rows);

  Var h = ops::add_row(ops::matmul(tape.constant(in.x), params[0]), params[1]);
  h = ops::add(h, ops::add_row(ops::matmul(tape.constant(time_features(in)), params[2]), params[3]));
  h = ops::add(h, ops::gather_rows(params[4], std::vector<std::size_t>(rows, in.scenario)));

  ForwardOutput out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const Var* p = params.data() + globals_front + per_layer * l;
    Var a = ops::mul_row(ops::rms_norm(h), p[0]);
    Var q = ops::matmul(a, p[1]);
    Var k = ops::matmul(a, p[2]);
    Var v = ops::matmul(a, p[3]);
    out.keys.push_back(k);
    out.values.push_back(v);
    Var k_all = k, v_all = v;
    if (has_history) {
      k_all = ops::concat_rows({tape.constant(history->keys[l]), k});
      v_all = ops::concat_rows({tape.constant(history->values[l]), v});
    }
    AttentionInputs ain{q, k_all, v_all, &query_tokens, &key_tokens, &all_frames, mask};
    AttentionWeights w{p[4], {p[5], p[6], p[7], p[8]}, p[9], p[10]};
    AttentionCapture cap;
    h = ops::add(h, pm_attention(ain, w, acfg, capture ? &cap : nullptr));
    if (capture) out.attention.push_back(std::move(cap.probabilities));
    Var b = ops::mul_row(ops::rms_norm(h), p[11]);
    Var mlp = ops::add_row(ops::matmul(ops::gelu(ops::add_row(ops::matmul(b, p[12]), p[13])), p[14]), p[15]);
    h = ops::add(h, mlp);
  }
  const Var* g = params.data() + globals_front + per_layer * cfg.layers;
  Var f = ops::mul_row(ops::rms_norm(h), g[0]);
  out.prediction = ops::add_row(ops::matmul(f, g[1]), g[2]);
  return out;
}

PreparedSample prepare_sample(const SyntheticClip& clip, const TrainingPlan& plan,
                              std::mt19937_64& rng) {
  validate_plan(plan, clip.graph);
  const std::size_t m = clip.frames_per_chunk(), t = clip.tokens(), d = clip.dim();
  const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(t))));
  if (grid * grid != t) throw std::invalid_argument("prepare_sample: tokens do not form a square grid");
  const std::size_t chunk_rows = m * t;
  const std::size_t n = plan.sequence.size();

  PreparedSample s;
  s.frames_per_chunk = m;
  s.regime = plan.regime;
  s.loss_mask = plan.loss_mask();
  s.x0 = Tensor({n * chunk_rows, d});
  s.target = Tensor({n * chunk_rows, d});
  s.input.x = Tensor({n * chunk_rows, d});
  s.input.grid = grid;
  s.input.scenario = static_cast<std::size_t>(clip.scenario);
  for (std::size_t i = 0; i < n; ++i) {
    const PlanChunk& c = plan.sequence[i];
    const Tensor& src = c.reference ? clip.clean_latents : clip.latents;
    const std::size_t off = c.source_chunk * chunk_rows * d;
    for (std::size_t f = 0; f < m; ++f) {
      s.input.frames.positions.push_back(c.first_position + static_cast<std::int64_t>(f));
      s.input.frames.poses.push_back(clip.poses[c.source_chunk * m + f]);
      s.input.frame_sigma.push_back(c.sigma);
      s.input.frame_chunk.push_back(i);
    }
    for (std::size_t e = 0; e < chunk_rows * d; ++e) {
      const double x0 = src[off + e];
      const double eps = std::normal_distribution<double>(0.0, 1.0)(rng);
      const std::size_t at = i * chunk_rows * d + e;
      s.x0[at] = x0;
      s.target[at] = eps - x0;
      s.input.x[at] = c.noise_replaced ? eps : (1.0 - c.sigma) * x0 + c.sigma * eps;
    }
  }
  return s;
}

SampleLoss sample_loss(Tape& tape, const std::vector<Var>& params, const ModelConfig& cfg,
                       const PreparedSample& s, double lambda) {
  ForwardOutput fo = forward(tape, params, cfg, s.input);
  SampleLoss out;
  out.flow = flow_loss(fo.prediction, s.target, s.loss_mask, s.rows_per_chunk());
  const auto pairs = within_chunk_pairs(s.loss_mask, s.frames_per_chunk);
  if (pairs.empty()) {
    out.delta = tape.constant(Tensor::scalar(0.0));
    out.total = out.flow;
    return out;
  }
  // x0_hat = x_t - sigma * u_hat, one sigma per frame
  const std::size_t t = s.input.tokens_per_frame();
  Tensor sig(s.input.x.shape());
  for (std::size_t r = 0; r < sig.rows(); ++r)
    for (std::size_t c = 0; c < sig.cols(); ++c) sig(r, c) = s.input.frame_sigma[r / t];
  Var x0_hat = ops::sub(tape.constant(s.input.x), ops::mul_const(fo.prediction, sig));
  const std::size_t frames = s.input.frames.size(), width = t * s.x0.cols();
  Var hat_frames = ops::reshape(x0_hat, {frames, width});
  Tensor x0_frames({frames, width}, std::vector<double>(s.x0.storage().begin(), s.x0.storage().end()));
  out.delta = delta_loss(hat_frames, x0_frames, pairs);
  out.total = lambda > 0.0 ? ops::add(out.flow, ops::scale(out.delta, lambda)) : out.flow;
  return out;
}

void OptimConfig::validate() const {
  if (!(lr >= 0.0)) throw std::invalid_argument("optim: negative learning rate");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("optim: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("optim: eps must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optim: negative weight decay");
}

TrainState::TrainState(Model m_, std::uint64_t rng_seed) : model(std::move(m_)), rng(rng_seed) {
  for (const Tensor& p : model.params()) {
    m.emplace_back(p.shape());
    v.emplace_back(p.shape());
  }
}

namespace {

struct BatchResult {
  LossBundle bundle;
  std::vector<Tensor> grads;
  std::vector<double> totals;
};

BatchResult run_batch(const Model& model, const std::vector<PreparedSample>& batch, double lambda,
                      bool want_grads) {
  const std::size_t b = batch.size();
  std::vector<std::vector<Tensor>> per(b);
  std::vector<double> flow(b), delta(b), total(b);
  std::vector<std::string> errors(b);
#pragma omp parallel for schedule(static) if (b > 1)
  for (std::size_t i = 0; i < b; ++i) {
    try {
      Tape tape;
      std::vector<Var> params = bind_parameters(tape, model);
      SampleLoss l = sample_loss(tape, params, model.config(), batch[i], lambda);
      flow[i] = l.flow.value().item();
      delta[i] = l.delta.value().item();
      total[i] = l.total.value().item();
      if (want_grads && std::isfinite(total[i])) per[i] = grad(l.total, params);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < b; ++i)
    if (!errors[i].empty()) throw std::runtime_error("batch element " + std::to_string(i) + ": " + errors[i]);
  BatchResult r;
  r.totals = total;
  const double inv = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    r.bundle.flow += flow[i] * inv;
    r.bundle.delta += delta[i] * inv;
    r.bundle.total += total[i] * inv;
  }
  r.bundle.lambda = lambda;
  if (want_grads) {
    for (const Tensor& p : model.params()) r.grads.emplace_back(p.shape());
    for (std::size_t i = 0; i < b; ++i) {
      if (per[i].empty()) continue;
      for (std::size_t k = 0; k < r.grads.size(); ++k)
        for (std::size_t e = 0; e < r.grads[k].size(); ++e) r.grads[k][e] += per[i][k][e] * inv;
    }
  }
  return r;
}

double batch_sigma(const std::vector<PreparedSample>& batch) {
  std::vector<Tensor> clips;
  for (const PreparedSample& s : batch) {
    const std::size_t frames = s.input.frames.size();
    if (frames < 2) continue;
    const std::size_t width = s.x0.size() / frames;
    clips.emplace_back(std::vector<std::size_t>{frames, width},
                       std::vector<double>(s.x0.storage().begin(), s.x0.storage().end()));
  }
  return clips.empty() ? 0.0 : sigma_batch(clips);
}

}  // namespace

LossBundle evaluate_loss(const Model& model, const std::vector<PreparedSample>& batch, double lambda) {
  if (batch.empty()) throw std::invalid_argument("evaluate_loss: empty batch");
  return run_batch(model, batch, lambda, false).bundle;
}

LossBundle train_step(TrainState& state, const std::vector<PreparedSample>& batch,
                      const OptimConfig& opt, const CurriculumConfig& cur) {
  opt.validate();
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const double sb = batch_sigma(batch);
  const double lambda = adaptive_weight(sb, state.iteration, cur.alpha, cur.gamma, cur.warmup);
  BatchResult r = run_batch(state.model, batch, lambda, true);
  r.bundle.sigma_batch = sb;
  if (!std::isfinite(r.bundle.total)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss at iteration " << state.iteration << " (flow "
        << r.bundle.flow << ", delta " << r.bundle.delta << ", lambda " << lambda
        << "); per-sample totals:";
    for (std::size_t i = 0; i < r.totals.size(); ++i)
      msg << " [" << i << " " << to_string(batch[i].regime) << "] " << r.totals[i];
    throw std::runtime_error(msg.str());
  }
  const double t = static_cast<double>(state.iteration + 1);
  const double c1 = 1.0 - std::pow(opt.beta1, t), c2 = 1.0 - std::pow(opt.beta2, t);
  auto& params = state.model.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].storage();
    auto& m = state.m[k].storage();
    auto& v = state.v[k].storage();
    const auto& g = r.grads[k].storage();
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = opt.beta1 * m[e] + (1.0 - opt.beta1) * g[e];
      v[e] = opt.beta2 * v[e] + (1.0 - opt.beta2) * g[e] * g[e];
      const double mhat = m[e] / c1, vhat = v[e] / c2;
      p[e] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * p[e]);
    }
  }
  ++state.iteration;
  return r.bundle;
}

namespace {

struct Block {
  std::vector<Tensor> chunks;
  std::vector<std::int64_t> first_positions;
  std::vector<CameraPose> poses;
  std::vector<double> sigma;  // per chunk
};

SequenceInput block_input(const Block& b, std::size_t m, std::size_t grid, std::size_t scenario,
                          std::size_t latent_dim) {
  SequenceInput in;
  in.grid = grid;
  in.scenario = scenario;
  const std::size_t rows = m * grid * grid;
  in.x = Tensor({b.chunks.size() * rows, latent_dim});
  for (std::size_t i = 0; i < b.chunks.size(); ++i) {
    if (b.chunks[i].size() != rows * latent_dim)
      throw std::invalid_argument("rollout: chunk " + std::to_string(i) + " has shape " +
                                  shape_string(b.chunks[i].shape()));
    std::copy(b.chunks[i].storage().begin(), b.chunks[i].storage().end(),
              in.x.storage().begin() + static_cast<std::ptrdiff_t>(i * rows * latent_dim));
    for (std::size_t f = 0; f < m; ++f) {
      in.frames.positions.push_back(b.first_positions[i] + static_cast<std::int64_t>(f));
      in.frames.poses.push_back(b.poses[i * m + f]);
      in.frame_sigma.push_back(b.sigma[i]);
      in.frame_chunk.push_back(i);
    }
  }
  return in;
}

Tensor last_rows(const Tensor& x, std::size_t rows) {
  Tensor out({rows, x.cols()});
  std::copy(x.storage().end() - static_cast<std::ptrdiff_t>(rows * x.cols()), x.storage().end(),
            out.storage().begin());
  return out;
}

// Runs the block at sigma 0 against the cache and writes every chunk.
void write_block(const Model& model, KvCache& cache, const Block& b, const std::vector<std::int64_t>& ids,
                 std::size_t m, std::size_t grid, std::size_t scenario, bool anchors) {
  Block clean = b;
  clean.sigma.assign(b.chunks.size(), 0.0);
  for (std::size_t i = 0; i < b.chunks.size(); ++i) {
    Block one;
    one.chunks = {clean.chunks[i]};
    one.first_positions = {clean.first_positions[i]};
    one.poses.assign(clean.poses.begin() + static_cast<std::ptrdiff_t>(i * m),
                     clean.poses.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    one.sigma = {0.0};
    SequenceInput in = block_input(one, m, grid, scenario, model.config().latent_dim);
    History hist = cache.read_all();
    Tape tape;
    ForwardOutput fo = forward(tape, bind_parameters(tape, model), model.config(), in, &hist);
    CacheEntry e;
    e.chunk_id = ids[i];
    e.tokens_per_frame = grid * grid;
    e.frame_positions = in.frames.positions;
    e.poses = in.frames.poses;
    e.protected_anchor = anchors;
    for (std::size_t l = 0; l < fo.keys.size(); ++l) {
      e.keys.push_back(fo.keys[l].value());
      e.values.push_back(fo.values[l].value());
    }
    cache.write_chunk(std::move(e));
  }
}

}  // namespace

RolloutResult rollout(const Model& model, const RolloutRequest& req) {
  const ModelConfig& cfg = model.config();
  const std::size_t m = req.frames_per_chunk, grid = req.grid;
  if (m == 0 || grid == 0) throw std::invalid_argument("rollout: zero chunk size or grid");
  const std::size_t rows = m * grid * grid;
  const std::size_t total = req.seed_chunks.size() + req.num_chunks;
  if (req.poses.size() != total * m)
    throw std::invalid_argument("rollout: need " + std::to_string(total * m) + " target poses, got " +
                                std::to_string(req.poses.size()));

  RolloutResult res;
  res.cache = KvCache(cfg.layers);
  res.seed_count = req.seed_chunks.size();
  const auto mi = static_cast<std::int64_t>(m);
  std::int64_t target_chunk0 = 0;

  Block context;  // everything already generated or given, for the no-cache path
  std::vector<std::int64_t> context_ids;
  if (req.reference) {
    const ReferenceSpec& ref = *req.reference;
    if (ref.poses.size() != ref.chunks.size() * m)
      throw std::invalid_argument("rollout: reference poses do not match reference chunks");
    const auto nref = static_cast<std::int64_t>(ref.chunks.size());
    if (ref.gap_chunks < nref)
      throw std::invalid_argument("rollout: gap of " + std::to_string(ref.gap_chunks) +
                                  " chunks overlaps " + std::to_string(nref) + " reference chunks");
    Block rb;
    rb.chunks = ref.chunks;
    rb.poses = ref.poses;
    for (std::int64_t i = 0; i < nref; ++i) {
      rb.first_positions.push_back(i * mi);
      context_ids.push_back(i);
    }
    rb.sigma.assign(ref.chunks.size(), 0.0);
    if (req.use_cache) {
      KvCache staging(cfg.layers);
      write_block(model, staging, rb, context_ids, m, grid, req.scenario, true);
      res.cache.prepend_reference(staging.entries(), ref.gap_chunks, m);
    }
    context = rb;
    target_chunk0 = ref.gap_chunks;
  }
  res.first_target_position = target_chunk0 * mi;

  auto target_position = [&](std::size_t j) { return (target_chunk0 + static_cast<std::int64_t>(j)) * mi; };
  auto target_poses = [&](std::size_t j) {
    return std::vector<CameraPose>(req.poses.begin() + static_cast<std::ptrdiff_t>(j * m),
                                   req.poses.begin() + static_cast<std::ptrdiff_t>((j + 1) * m));
  };
  auto append_context = [&](const Tensor& chunk, std::size_t j) {
    context.chunks.push_back(chunk);
    context.first_positions.push_back(target_position(j));
    const auto p = target_poses(j);
    context.poses.insert(context.poses.end(), p.begin(), p.end());
    context.sigma.push_back(0.0);
    context_ids.push_back(target_chunk0 + static_cast<std::int64_t>(j));
  };

  for (std::size_t j = 0; j < req.seed_chunks.size(); ++j) {
    if (req.seed_chunks[j].size() != rows * cfg.latent_dim)
      throw std::invalid_argument("rollout: seed chunk has shape " + shape_string(req.seed_chunks[j].shape()));
    res.chunks.push_back(req.seed_chunks[j]);
    res.chunk_positions.push_back(target_position(j));
    if (req.use_cache) {
      Block one{{req.seed_chunks[j]}, {target_position(j)}, target_poses(j), {0.0}};
      write_block(model, res.cache, one, {target_chunk0 + static_cast<std::int64_t>(j)}, m, grid,
                  req.scenario, false);
    }
    append_context(req.seed_chunks[j], j);
  }
  if (!req.drop_chunks.empty()) {
    if (!req.use_cache) throw std::invalid_argument("rollout: dropping chunks needs the cache");
    std::mt19937_64 drop_rng(req.noise_seed ^ 0x9e3779b97f4a7c15ULL);
    res.cache.drop_nodes(req.drop_chunks, req.drop_mode, drop_rng);
  }

  std::mt19937_64 rng(req.noise_seed);
  const std::size_t steps = cfg.sampler_steps;
  for (std::size_t g = 0; g < req.num_chunks; ++g) {
    const std::size_t j = req.seed_chunks.size() + g;
    Tensor x({rows, cfg.latent_dim});
    for (double& e : x.storage()) e = std::normal_distribution<double>(0.0, 1.0)(rng);
    for (std::size_t s = 0; s < steps; ++s) {
      const double sigma = 1.0 - static_cast<double>(s) / static_cast<double>(steps);
      Tensor u;
      if (req.use_cache) {
        Block one{{x}, {target_position(j)}, target_poses(j), {sigma}};
        SequenceInput in = block_input(one, m, grid, req.scenario, cfg.latent_dim);
        History hist = res.cache.read_all();
        Tape tape;
        u = forward(tape, bind_parameters(tape, model), cfg, in, &hist).prediction.value();
      } else {
        Block full = context;
        full.chunks.push_back(x);
        full.first_positions.push_back(target_position(j));
        const auto p = target_poses(j);
        full.poses.insert(full.poses.end(), p.begin(), p.end());
        full.sigma.push_back(sigma);
        SequenceInput in = block_input(full, m, grid, req.scenario, cfg.latent_dim);
        Tape tape;
        u = last_rows(forward(tape, bind_parameters(tape, model), cfg, in).prediction.value(), rows);
      }
      const double dt = 1.0 / static_cast<double>(steps);
      for (std::size_t e = 0; e < x.size(); ++e) x[e] -= dt * u[e];
    }
    res.chunks.push_back(x);
    res.chunk_positions.push_back(target_position(j));
    if (req.use_cache) {
      Block one{{x}, {target_position(j)}, target_poses(j), {0.0}};
      write_block(model, res.cache, one, {target_chunk0 + static_cast<std::int64_t>(j)}, m, grid,
                  req.scenario, false);
    }
    append_context(x, j);
  }
  return res;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = state.model.config().to_json().dump();
  put_u64(out, cfg.size());
  out += cfg;
  const auto& params = state.model.params();
  put_u64(out, params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    put_u64(out, params[k].rank());
    for (std::size_t e : params[k].shape()) put_u64(out, e);
    for (double x : params[k].storage()) put_f64(out, x);
    for (double x : state.m[k].storage()) put_f64(out, x);
    for (double x : state.v[k].storage()) put_f64(out, x);
  }
  put_u64(out, state.iteration);
  std::ostringstream rng;
  rng << state.rng;
  put_u64(out, rng.str().size());
  out += rng.str();
  write_file(path, out);
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  const std::string in = read_file(path);
  auto fail = [&](const std::string& what) { return std::runtime_error(path.string() + ": " + what); };
  if (in.size() < 4 || in.compare(0, 4, kCheckpointMagic, 4) != 0) throw fail("not an RMCK checkpoint");
  std::size_t pos = 4;
  try {
    const std::uint32_t version = get_u32(in, pos);
    if (version != kCheckpointVersion)
      throw fail("checkpoint version " + std::to_string(version) + ", expected " +
                 std::to_string(kCheckpointVersion));
    const std::uint64_t clen = get_u64(in, pos);
    if (pos + clen > in.size()) throw fail("truncated config block");
    const ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(in.substr(pos, clen)));
    pos += clen;
    if (expected && !(*expected == cfg))
      throw fail("checkpoint config " + cfg.to_json().dump() + " differs from expected " +
                 expected->to_json().dump());
    TrainState st(Model(cfg, 0), 0);
    auto& params = st.model.params();
    if (get_u64(in, pos) != params.size()) throw fail("parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
      const std::uint64_t rank = get_u64(in, pos);
      std::vector<std::size_t> shape(rank);
      for (auto& e : shape) e = get_u64(in, pos);
      if (shape != params[k].shape())
        throw fail("parameter " + st.model.names()[k] + " has shape " + shape_string(shape));
      for (double& x : params[k].storage()) x = get_f64(in, pos);
      for (double& x : st.m[k].storage()) x = get_f64(in, pos);
      for (double& x : st.v[k].storage()) x = get_f64(in, pos);
    }
    st.iteration = get_u64(in, pos);
    const std::uint64_t rlen = get_u64(in, pos);
    if (pos + rlen != in.size()) throw fail("trailing or missing bytes after rng state");
    std::istringstream rs(in.substr(pos, rlen));
    rs >> st.rng;
    if (rs.fail()) throw fail("bad rng state");
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad config block: ") + e.what());
  } catch (const std::runtime_error& e) {
    if (std::string(e.what()) == "truncated input") throw fail("truncated checkpoint");
    throw;
  }
}

}  // namespace remind
