#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "remind/curriculum.hpp"
#include "remind/frame_graph.hpp"
#include "remind/kv_cache.hpp"
#include "remind/pmrope.hpp"

namespace remind {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  std::size_t token_dim = 16;
  std::size_t mlp_ratio = 4;
  std::size_t latent_dim = 16;
  std::size_t scenarios = kScenarioCount;
  AttentionMode mode = AttentionMode::full;
  bool delta_all_bands = false;
  std::size_t phase_hidden = 64;
  double rope_base = 10000.0;
  std::size_t sampler_steps = 10;

  AttentionConfig attention() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// Named parameter tensors in a fixed order.
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t index_of(const std::string& name) const;
  Tensor& param(const std::string& name) { return params_[index_of(name)]; }
  std::size_t parameter_count() const;

 private:
  ModelConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

// Tokens of consecutive frames, frame-major; every frame has the same number
// of tokens on a grid x grid layout.
struct SequenceInput {
  Tensor x;                          // [frames*tokens x latent_dim]
  std::vector<double> frame_sigma;   // per frame
  std::vector<std::size_t> frame_chunk;  // chunk index per frame, nondecreasing
  FrameTable frames;
  std::size_t grid = 1;
  std::size_t scenario = 0;

  std::size_t tokens_per_frame() const { return grid * grid; }
  void validate(std::size_t latent_dim) const;
};

struct ForwardOutput {
  Var prediction;           // [rows x latent_dim]
  std::vector<Var> keys;    // per layer, pre-rotation, this block only
  std::vector<Var> values;  // per layer, raw
  std::vector<std::vector<Tensor>> attention;  // [layer][head] when captured
};

std::vector<Var> bind_parameters(Tape& tape, const Model& model);

// Chunk-causal forward. History keys/values come first and are visible to
// every query.
ForwardOutput forward(Tape& tape, const std::vector<Var>& params, const ModelConfig& cfg,
                      const SequenceInput& in, const History* history = nullptr,
                      bool capture = false);

// Noised sequence and targets for one (clip, plan) pair.
struct PreparedSample {
  SequenceInput input;
  Tensor x0;      // clean latents of the sequence
  Tensor target;  // velocity eps - x0
  std::vector<std::uint8_t> loss_mask;  // per sequence chunk
  std::size_t frames_per_chunk = 1;
  Regime regime = Regime::all_history;

  std::size_t rows_per_chunk() const { return frames_per_chunk * input.tokens_per_frame(); }
};

PreparedSample prepare_sample(const SyntheticClip& clip, const TrainingPlan& plan,
                              std::mt19937_64& rng);

struct LossBundle {
  double flow = 0.0;
  double delta = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double sigma_batch = 0.0;
};

// Per-sample loss graph: flow + lambda * delta.
struct SampleLoss {
  Var total, flow, delta;
};
SampleLoss sample_loss(Tape& tape, const std::vector<Var>& params, const ModelConfig& cfg,
                       const PreparedSample& s, double lambda);

struct OptimConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

struct TrainState {
  Model model;
  std::vector<Tensor> m, v;
  std::uint64_t iteration = 0;
  std::mt19937_64 rng;

  TrainState() = default;
  TrainState(Model model, std::uint64_t rng_seed);
};

// One AdamW step on the batch mean loss. Batch elements may run in parallel;
// gradients are reduced in batch order. Throws on a non-finite loss.
LossBundle train_step(TrainState& state, const std::vector<PreparedSample>& batch,
                      const OptimConfig& opt, const CurriculumConfig& cur);

// Evaluates the batch loss without updating anything.
LossBundle evaluate_loss(const Model& model, const std::vector<PreparedSample>& batch,
                         double lambda);

struct ReferenceSpec {
  std::vector<Tensor> chunks;       // clean reference chunks
  std::vector<CameraPose> poses;    // per reference frame
  std::int64_t gap_chunks = 0;
};

struct RolloutRequest {
  std::vector<Tensor> seed_chunks;   // each [frames_per_chunk*tokens x latent_dim]
  std::size_t num_chunks = 0;        // chunks to generate
  std::vector<CameraPose> poses;     // per target frame: seeds then generated
  std::size_t frames_per_chunk = 3;
  std::size_t grid = 8;
  std::size_t scenario = 0;
  std::optional<ReferenceSpec> reference;
  bool use_cache = true;
  std::uint64_t noise_seed = 0;
  std::set<std::int64_t> drop_chunks;  // target chunk ids dropped after seeding
  DropMode drop_mode = DropMode::noise;
};

struct RolloutResult {
  std::vector<Tensor> chunks;  // seeds then generated
  std::vector<std::int64_t> chunk_positions;  // first frame position per chunk
  std::int64_t first_target_position = 0;
  std::size_t seed_count = 0;
  KvCache cache;
};

RolloutResult rollout(const Model& model, const RolloutRequest& req);

inline constexpr char kCheckpointMagic[4] = {'R', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
// Throws on a missing or corrupt file, a version mismatch, or a config that
// differs from `expected` when given.
TrainState load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace remind
