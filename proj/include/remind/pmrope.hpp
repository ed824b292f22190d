#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "remind/geometry.hpp"
#include "remind/tape.hpp"

namespace remind {

enum class AttentionMode { full, qk_only, vo_only, dual, rope };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& name);

inline bool phase_offsets_enabled(AttentionMode m) {
  return m == AttentionMode::full || m == AttentionMode::qk_only || m == AttentionMode::dual;
}
inline bool residuals_enabled(AttentionMode m) {
  return m == AttentionMode::full || m == AttentionMode::vo_only;
}

struct AttentionConfig {
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  AttentionMode mode = AttentionMode::full;
  // Rotary bands per head = head_dim / 2, split temporal | row | column.
  // Zero temporal_bands means the default split: half temporal, the rest
  // shared evenly between rows and columns.
  std::size_t temporal_bands = 0;
  bool delta_all_bands = false;
  std::size_t phase_hidden = 64;
  double rope_base = 10000.0;

  std::size_t bands() const { return head_dim / 2; }
  std::size_t inner_dim() const { return heads * head_dim; }
  std::size_t temporal() const { return temporal_bands ? temporal_bands : bands() / 2; }
  std::size_t row_bands() const { return (bands() - temporal()) / 2; }
  std::size_t col_bands() const { return bands() - temporal() - row_bands(); }
  std::size_t delta_bands() const { return delta_all_bands ? bands() : temporal(); }

  // Throws on an odd head dimension or an invalid band split.
  void validate() const;
};

// Angle table theta[p][b] = position_p * omega_b.
struct RotaryPhase {
  Tensor angles;  // [positions x bands]
};

// omega_b = base^(-b / bands)
std::vector<double> band_frequencies(std::size_t bands, double base);
RotaryPhase rotary_phases(std::span<const std::int64_t> positions, std::size_t bands,
                          double base = 10000.0);

// Per-token placement of a sequence of frames on the rotary grid.
struct TokenGrid {
  std::vector<std::size_t> frame;  // index into FrameTable
  std::vector<std::int32_t> row;
  std::vector<std::int32_t> col;

  std::size_t size() const { return frame.size(); }
};

// Frame-level metadata shared by all tokens of a frame.
struct FrameTable {
  std::vector<std::int64_t> positions;
  std::vector<CameraPose> poses;

  std::size_t size() const { return positions.size(); }
};

// Builds the frame-major grid layout: frames x rows x cols tokens.
TokenGrid frame_major_grid(std::size_t first_frame, std::size_t frames, std::size_t grid);

// Base angles [tokens x bands]: temporal bands use the frame position, row and
// column bands the grid coordinates. `with_temporal` false zeroes the temporal
// columns (the camera branch of the dual baseline).
Tensor token_angles(const TokenGrid& tokens, const FrameTable& frames,
                    const AttentionConfig& cfg, bool with_temporal = true);

// Descriptor matrix [frames x 14] and 6-DoF embedding matrix [frames x 12].
Tensor descriptor_matrix(const FrameTable& frames);
Tensor six_dof_matrix(const FrameTable& frames);

// Two-layer tanh perceptron h: descriptor -> per-band phase offset. The output
// layer starts at zero so h(c) = 0 for every c.
struct PhaseOffsetNet {
  Var w1, b1, w2, b2;
};
// delta [frames x delta_bands]
Var camera_phase_offset(const PhaseOffsetNet& net, Var descriptors);

// Output projection, phase network and the zero-initialized value/output
// residuals. Q/K/V projections live with the caller.
struct AttentionWeights {
  Var w_o;
  PhaseOffsetNet phase;
  Var w_dv;  // [(inner + 12) x inner]
  Var w_do;  // [(inner + 12) x model_dim]
};

// Token-level angle table theta + delta for a token set; delta lands on the
// temporal bands (or all bands) according to cfg.
Var phased_angles(Tape& tape, const TokenGrid& tokens, const FrameTable& frames,
                  const AttentionConfig& cfg, Var delta_frames, bool with_temporal);

// Token in chunk i may attend to every token of chunks <= i.
std::vector<std::uint8_t> chunk_causal_mask(std::size_t num_chunks, std::size_t tokens_per_chunk);

// Everything an attention call needs besides the weights.
struct AttentionInputs {
  Var q;  // [N x inner] pre-rotation queries
  Var k;  // [M x inner] pre-rotation keys (history first, then the block)
  Var v;  // [M x inner] raw values
  const TokenGrid* query_tokens = nullptr;
  const TokenGrid* key_tokens = nullptr;
  const FrameTable* frames = nullptr;  // indexed by both token grids
  std::shared_ptr<const std::vector<std::uint8_t>> mask;  // [N x M], 1 = allowed
};

// Optional capture of attention probabilities, one [N x M] tensor per head.
// In dual mode the two branches are averaged.
struct AttentionCapture {
  std::vector<Tensor> probabilities;
};

// PM-RoPE attention:
//   v~_j = v_j + W_dV [v_j | e_j]
//   y~_i = sum_j softmax_j(q~_i . k~_j / sqrt(d)) v~_j
//   o_i  = W_O y~_i + W_dO [y~_i | e_i]
// with q~, k~ rotated by theta + h(c). Mode switches drop the phase offsets,
// the residuals, or split into the decoupled two-branch baseline.
Var pm_attention(const AttentionInputs& in, const AttentionWeights& w,
                 const AttentionConfig& cfg, AttentionCapture* capture = nullptr);

}  // namespace remind
