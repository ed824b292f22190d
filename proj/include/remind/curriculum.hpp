#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "remind/frame_graph.hpp"
#include "remind/tape.hpp"

namespace remind {

enum class Regime { all_history, noisy_memory, node_drop, v2v_frontier, reference_cache };
inline constexpr std::size_t kRegimeCount = 5;
std::string to_string(Regime r);
Regime parse_regime(const std::string& name);

struct CurriculumConfig {
  double sigma_min = 0.02;
  double sigma_max = 0.98;
  double noisy_min = 0.8;  // history noise range of noisy_memory
  double noisy_max = 1.0;
  std::int64_t gap_min = 2;
  std::int64_t gap_max = 8;
  double alpha = 0.2;
  double gamma = 5.0;
  std::size_t warmup = 200;
  // Sampling weight per regime, indexed by Regime.
  std::vector<double> regime_weights = std::vector<double>(kRegimeCount, 1.0);

  void validate() const;
};

// One chunk of the sequence the model sees.
struct PlanChunk {
  std::size_t source_chunk = 0;   // chunk index in the clip
  std::int64_t first_position = 0;  // rotary position of its first frame
  double sigma = 0.0;
  bool supervised = false;
  bool noise_replaced = false;  // input is pure noise
  bool reference = false;       // prepended clean reference
};

struct CachePrepend {
  std::vector<std::size_t> reference_chunks;
  std::int64_t gap_chunks = 0;
  std::int64_t first_target_position = 0;
};

struct TrainingPlan {
  Regime regime = Regime::all_history;
  std::vector<PlanChunk> sequence;
  std::vector<std::size_t> drop_set;
  std::optional<CachePrepend> cache_prepend;

  std::vector<double> sigma() const;
  std::vector<std::uint8_t> loss_mask() const;
};

bool regime_applicable(const FrameGraph& graph, Regime regime,
                       const CurriculumConfig& cfg = CurriculumConfig{});
// Weighted draw over the applicable regimes with positive weight.
Regime sample_regime(const FrameGraph& graph, const CurriculumConfig& cfg, std::mt19937_64& rng);
TrainingPlan make_plan(const FrameGraph& graph, std::size_t frames_per_chunk, Regime regime,
                       const CurriculumConfig& cfg, std::mt19937_64& rng);
// Throws std::logic_error on an empty loss mask or a dropped protected anchor.
void validate_plan(const TrainingPlan& plan, const FrameGraph& graph);

struct NoisySample {
  Tensor x_t;
  Tensor u;  // velocity target eps - x0
};
NoisySample noise_sample(const Tensor& x0, double sigma, std::mt19937_64& rng);
// Same with the noise given.
NoisySample noise_with(const Tensor& x0, double sigma, const Tensor& eps);

// Masked mean squared error. pred and target are [rows x cols] with
// rows_per_chunk consecutive rows per chunk of loss_mask.
Var flow_loss(Var pred, const Tensor& target, const std::vector<std::uint8_t>& loss_mask,
              std::size_t rows_per_chunk);

// Mean over the given frame pairs (i-1, i) of the per-element mean squared
// difference between predicted and true temporal deltas.
Var delta_loss(Var x0_hat, const Tensor& x0, const std::vector<std::pair<std::size_t, std::size_t>>& pairs);
// Consecutive frame pairs inside the chunks selected by mask.
std::vector<std::pair<std::size_t, std::size_t>> within_chunk_pairs(
    const std::vector<std::uint8_t>& mask, std::size_t frames_per_chunk);

// Population variance of all consecutive-frame differences; each clip is
// [frames x features].
double sigma_batch(const std::vector<Tensor>& clips);

// alpha * exp(-gamma * sigma_batch) once iter >= warmup, else 0.
double adaptive_weight(double sigma_batch, std::size_t iter, double alpha, double gamma,
                       std::size_t warmup);

}  // namespace remind
