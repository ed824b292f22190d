#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "remind/dataset.hpp"
#include "remind/run_config.hpp"
#include "remind/trainer.hpp"

namespace remind {

namespace fs = std::filesystem;

// Writes the training dataset; returns its header summary.
nlohmann::json cmd_gen_data(const RunConfig& cfg, const fs::path& out_path);

// Held-out clips: same data config, seed + eval.seed_offset.
std::vector<SyntheticClip> eval_clips(const RunConfig& cfg);

// Throws when the dataset layout differs from cfg.data.
void check_dataset(const Dataset& ds, const RunConfig& cfg);

// Trains on the clips, writing metrics.jsonl, checkpoints and summary.json
// into out_dir.
TrainState train_on(const RunConfig& cfg, const std::vector<SyntheticClip>& clips, const fs::path& out_dir);
nlohmann::json cmd_train(const RunConfig& cfg, const fs::path& data_path, const fs::path& out_dir);

enum class RolloutMode { i2v, v2v, refcache };
std::string to_string(RolloutMode m);
RolloutMode parse_rollout_mode(const std::string& name);

// Per-frame decoded states of a chunk [frames_per_chunk*tokens x dim].
std::vector<double> decode_chunk(const Tensor& chunk, Scenario scenario, const WorldConfig& world);

struct ClipRollout {
  RolloutResult result;
  nlohmann::json report;  // per-chunk decoded states, errors, recovery block
};
ClipRollout rollout_clip(const Model& model, const RunConfig& cfg, const SyntheticClip& clip, RolloutMode mode,
                         std::uint64_t noise_seed);
// Writes generated.rmds and report.json.
nlohmann::json cmd_rollout(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_path,
                           RolloutMode mode, std::size_t clip_id, const fs::path& out_dir);

// Recovery chunk error against the freeze-at-anchor baseline, and the anchor
// retrieval score of the generated continuation. Clips without a recovery
// node are skipped.
struct RecoveryScore {
  std::size_t clips = 0;
  double error = 0.0;
  double baseline = 0.0;
  double anchor_score = 0.0;

  double improvement() const { return baseline > 0.0 ? 1.0 - error / baseline : 0.0; }
  nlohmann::json to_json() const;
};
RecoveryScore evaluate_recovery(const Model& model, const RunConfig& cfg, const std::vector<SyntheticClip>& clips);

nlohmann::json cmd_diagnose(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_path,
                            std::size_t clip_id, const fs::path& out_dir, bool identifiability);
// The identifiability report under cfg.diag.
SelectionReport identifiability_report(const RunConfig& cfg);

struct AblationRow {
  AttentionMode mode = AttentionMode::full;
  RecoveryScore score;
  double final_flow = 0.0;
};
// Trains every mode of cfg.ablate_modes under identical seeds; writes
// ablation.csv. Rows follow the mode list.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::vector<SyntheticClip>& clips,
                                      const fs::path& out_dir);
nlohmann::json cmd_ablate(const RunConfig& cfg, const fs::path& data_path, const fs::path& out_dir);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace remind
