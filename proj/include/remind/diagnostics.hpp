#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "remind/frame_graph.hpp"
#include "remind/trainer.hpp"

namespace remind {

// Query chunk x history chunk attention mass.
struct ImportanceMatrix {
  std::size_t n = 0;
  std::vector<double> values;           // n*n, row-major, max over layers
  std::vector<std::uint8_t> available;  // 0 above the diagonal
  std::vector<std::vector<double>> per_layer;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  bool ok(std::size_t i, std::size_t j) const { return available[i * n + j] != 0; }
  double row_sum(std::size_t i) const;
};

// Inclusive layer window; defaults to every layer.
struct LayerRange {
  std::size_t first = 0;
  std::size_t last = std::numeric_limits<std::size_t>::max();
};

// attention[layer][head] is [N x M]. Key rows are grouped by chunk_rows (all
// chunks, oldest first); the N query rows are the trailing chunks of that
// layout. Rows of chunks without queries stay unavailable.
ImportanceMatrix importance_from_attention(const std::vector<std::vector<Tensor>>& attention,
                                           const std::vector<std::size_t>& chunk_rows,
                                           LayerRange layers = {});

// sigma = 0 sequence over the given chunks.
SequenceInput sequence_from_chunks(const std::vector<Tensor>& chunks,
                                   const std::vector<std::int64_t>& chunk_positions,
                                   const std::vector<CameraPose>& poses,
                                   std::size_t frames_per_chunk, std::size_t grid,
                                   std::size_t scenario);
// The observed (possibly degraded) clip at its own frame positions.
SequenceInput sequence_from_clip(const SyntheticClip& clip);

ImportanceMatrix kv_importance(const Model& model, const SequenceInput& in, LayerRange layers = {});

// Mean over recovery rows of anchor mass minus interruption mass.
double anchor_retrieval_score(const ImportanceMatrix& mat, const FrameGraph& graph);

enum class TemporalScore { recency, cache_order };
std::string to_string(TemporalScore t);

// Anchor a and corrupted c at the same address, queried at t_q.
struct ScoringScenario {
  double t_a = 2.0;
  double t_c = 5.0;
  double t_q = 8.0;
  double tau_deg = -1.0;  // < 0: use t_c
  std::vector<double> address_a{0.5, 0.5};
  std::vector<double> address_c{0.5, 0.5};
  std::vector<double> address_q{0.5, 0.5};
  std::vector<double> anchor_content{1.0, 0.0, 0.0, 0.0};
  std::vector<double> corrupted_content{0.0, 1.0, 0.0, 0.0};
  std::vector<double> query_content{0.0, 0.0, 0.0, 0.0};  // what the query sees
  std::vector<double> query_clean{1.0, 0.2, 0.0, 0.0};    // compatibility target of rho
  double spatial_weight = 1.0;
  double beta = 1.0;
  double kappa = 1.0;
  double jitter = 0.1;  // content noise of trials after the first
  std::uint64_t seed = 0;

  double tau() const { return tau_deg < 0.0 ? t_c : tau_deg; }
  // Throws on t_a > t_c, t_c >= t_q, a split address or mismatched sizes.
  void validate() const;
  nlohmann::json to_json() const;
};

struct CandidateScores {
  double anchor = 0.0;
  double corrupted = 0.0;
  bool tie = false;
  std::string choice;  // "anchor" | "corrupted"
};

// phi_sp + phi_tmp + phi_cnt for both candidates.
CandidateScores decoupled_scores(const ScoringScenario& s, TemporalScore temporal);
// 1{same address} 1{t < tau_deg} rho(clean content, query_clean).
CandidateScores joint_scores(const ScoringScenario& s);

struct SelectionReport {
  CandidateScores recency, cache_order, joint;
  std::size_t trials = 0;
  std::size_t recency_corrupted = 0;
  std::size_t cache_order_corrupted = 0;
  std::size_t joint_anchor = 0;
  nlohmann::json scenario_params;

  // Decoupled scorers pick c and the joint selector picks a.
  bool disagreement() const;
  nlohmann::json to_json() const;
};

// Trial 0 scores the scenario as given; later trials add seeded noise to the
// candidate contents. Trials are scored independently and counted in order.
SelectionReport identifiability_sim(const ScoringScenario& s, std::size_t trials);

// Writes <stem>.csv and <stem>.pgm. `note` lands on the CSV comment line.
void export_heatmap(const ImportanceMatrix& mat, const std::filesystem::path& stem,
                    const std::string& note = "");
ImportanceMatrix read_heatmap_csv(const std::filesystem::path& path);

}  // namespace remind
