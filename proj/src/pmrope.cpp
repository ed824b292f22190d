#include "remind/pmrope.hpp"

#include <cmath>
#include <stdexcept>

namespace remind {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::full: return "full";
    case AttentionMode::qk_only: return "qk_only";
    case AttentionMode::vo_only: return "vo_only";
    case AttentionMode::dual: return "dual";
    case AttentionMode::rope: return "rope";
  }
  return "unknown";
}

AttentionMode parse_attention_mode(const std::string& name) {
  if (name == "full") return AttentionMode::full;
  if (name == "qk_only") return AttentionMode::qk_only;
  if (name == "vo_only") return AttentionMode::vo_only;
  if (name == "dual") return AttentionMode::dual;
  if (name == "rope") return AttentionMode::rope;
  throw std::invalid_argument("unknown attention mode '" + name + "'");
}

void AttentionConfig::validate() const {
  if (heads == 0) throw std::invalid_argument("attention: zero heads");
  if (head_dim == 0 || head_dim % 2 != 0)
    throw std::invalid_argument("attention: head_dim must be even and positive");
  if (temporal() == 0 || temporal() > bands())
    throw std::invalid_argument("attention: temporal band count out of range");
  if (temporal() + row_bands() + col_bands() != bands())
    throw std::invalid_argument("attention: band split does not cover head_dim/2");
  if (phase_hidden == 0) throw std::invalid_argument("attention: zero phase hidden width");
}

std::vector<double> band_frequencies(std::size_t bands, double base) {
  std::vector<double> w(bands);
  for (std::size_t b = 0; b < bands; ++b)
    w[b] = std::pow(base, -static_cast<double>(b) / static_cast<double>(bands));
  return w;
}

RotaryPhase rotary_phases(std::span<const std::int64_t> positions, std::size_t bands,
                          double base) {
  if (bands == 0) throw std::invalid_argument("rotary_phases: zero bands");
  const std::vector<double> w = band_frequencies(bands, base);
  RotaryPhase out{Tensor({positions.size(), bands})};
  for (std::size_t p = 0; p < positions.size(); ++p) {
    if (positions[p] < 0) throw std::invalid_argument("rotary_phases: negative position");
    for (std::size_t b = 0; b < bands; ++b)
      out.angles(p, b) = static_cast<double>(positions[p]) * w[b];
  }
  return out;
}

TokenGrid frame_major_grid(std::size_t first_frame, std::size_t frames, std::size_t grid) {
  TokenGrid g;
  const std::size_t n = frames * grid * grid;
  g.frame.reserve(n);
  g.row.reserve(n);
  g.col.reserve(n);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t c = 0; c < grid; ++c) {
        g.frame.push_back(first_frame + f);
        g.row.push_back(static_cast<std::int32_t>(r));
        g.col.push_back(static_cast<std::int32_t>(c));
      }
  return g;
}

Tensor token_angles(const TokenGrid& tokens, const FrameTable& frames,
                    const AttentionConfig& cfg, bool with_temporal) {
  const std::size_t nt = cfg.temporal(), nr = cfg.row_bands(), nc = cfg.col_bands();
  const std::vector<double> wt = band_frequencies(nt, cfg.rope_base);
  const std::vector<double> wr = band_frequencies(nr, cfg.rope_base);
  const std::vector<double> wc = band_frequencies(nc, cfg.rope_base);
  Tensor out({tokens.size(), cfg.bands()});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t f = tokens.frame[i];
    if (f >= frames.size()) throw std::out_of_range("token_angles: frame index out of range");
    const double t = with_temporal ? static_cast<double>(frames.positions[f]) : 0.0;
    std::size_t b = 0;
    for (std::size_t k = 0; k < nt; ++k) out(i, b++) = t * wt[k];
    for (std::size_t k = 0; k < nr; ++k) out(i, b++) = tokens.row[i] * wr[k];
    for (std::size_t k = 0; k < nc; ++k) out(i, b++) = tokens.col[i] * wc[k];
  }
  return out;
}

Tensor descriptor_matrix(const FrameTable& frames) {
  Tensor out({frames.size(), kPoseDescriptorSize});
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const PoseDescriptor c = pose_descriptor(frames.poses[f]);
    for (std::size_t k = 0; k < kPoseDescriptorSize; ++k) out(f, k) = c[k];
  }
  return out;
}

Tensor six_dof_matrix(const FrameTable& frames) {
  Tensor out({frames.size(), kSixDofSize});
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const SixDofEmbedding e = six_dof_embedding(frames.poses[f]);
    for (std::size_t k = 0; k < kSixDofSize; ++k) out(f, k) = e[k];
  }
  return out;
}

Var camera_phase_offset(const PhaseOffsetNet& net, Var descriptors) {
  Var hidden = ops::tanh(ops::add_row(ops::matmul(descriptors, net.w1), net.b1));
  return ops::add_row(ops::matmul(hidden, net.w2), net.b2);
}

Var phased_angles(Tape& tape, const TokenGrid& tokens, const FrameTable& frames,
                  const AttentionConfig& cfg, Var delta_frames, bool with_temporal) {
  Var base = tape.constant(token_angles(tokens, frames, cfg, with_temporal));
  if (delta_frames.tape == nullptr) return base;
  const std::size_t db = cfg.delta_bands();
  if (delta_frames.cols() != db)
    throw std::invalid_argument("phased_angles: delta width does not match delta bands");
  Var per_token = ops::gather_rows(delta_frames, tokens.frame);
  if (db < cfg.bands())
    per_token = ops::concat_cols(
        {per_token, tape.constant(Tensor({tokens.size(), cfg.bands() - db}))});
  return ops::add(base, per_token);
}

std::vector<std::uint8_t> chunk_causal_mask(std::size_t num_chunks, std::size_t tokens_per_chunk) {
  if (num_chunks == 0 || tokens_per_chunk == 0)
    throw std::invalid_argument("chunk_causal_mask: counts must be positive");
  const std::size_t n = num_chunks * tokens_per_chunk;
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t allowed = (i / tokens_per_chunk + 1) * tokens_per_chunk;
    for (std::size_t j = 0; j < allowed; ++j) mask[i * n + j] = 1;
  }
  return mask;
}

namespace {

Tensor gather_embeddings(const Tensor& per_frame, const TokenGrid& tokens) {
  const std::size_t d = per_frame.cols();
  Tensor out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) out(i, k) = per_frame(tokens.frame[i], k);
  return out;
}

struct Branch {
  Var y;
  std::vector<Tensor> probs;
};

Branch attend(const AttentionInputs& in, Var values, const AttentionConfig& cfg, Var delta,
              bool with_temporal, bool keep_probs) {
  Tape& tape = *in.q.tape;
  Var ang_q = phased_angles(tape, *in.query_tokens, *in.frames, cfg, delta, with_temporal);
  Var ang_k = phased_angles(tape, *in.key_tokens, *in.frames, cfg, delta, with_temporal);
  Var qr = ops::rotary(in.q, ang_q, cfg.heads);
  Var kr = ops::rotary(in.k, ang_k, cfg.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Branch out;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t off = h * cfg.head_dim;
    Var qh = ops::slice_cols(qr, off, cfg.head_dim);
    Var kh = ops::slice_cols(kr, off, cfg.head_dim);
    Var vh = ops::slice_cols(values, off, cfg.head_dim);
    Var logits = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    Var probs = ops::softmax_rows(logits, in.mask);
    if (keep_probs) out.probs.push_back(probs.value());
    heads.push_back(ops::matmul(probs, vh));
  }
  out.y = heads.size() == 1 ? heads.front() : ops::concat_cols(heads);
  return out;
}

}  // namespace

Var pm_attention(const AttentionInputs& in, const AttentionWeights& w,
                 const AttentionConfig& cfg, AttentionCapture* capture) {
  cfg.validate();
  if (!in.query_tokens || !in.key_tokens || !in.frames)
    throw std::invalid_argument("pm_attention: missing token layout");
  const std::size_t n = in.q.rows(), m = in.k.rows();
  if (in.query_tokens->size() != n || in.key_tokens->size() != m || in.v.rows() != m)
    throw std::invalid_argument("pm_attention: token layout does not match q/k/v rows");
  if (in.q.cols() != cfg.inner_dim() || in.k.cols() != cfg.inner_dim() ||
      in.v.cols() != cfg.inner_dim())
    throw std::invalid_argument("pm_attention: feature width does not match heads*head_dim");
  if (in.mask && in.mask->size() != n * m)
    throw std::invalid_argument("pm_attention: mask is " + std::to_string(in.mask->size()) +
                                " entries, expected " + std::to_string(n * m));
  if (in.frames->poses.size() != in.frames->positions.size())
    throw std::invalid_argument("pm_attention: frame positions and poses differ in length");
  Tape& tape = *in.q.tape;

  const bool use_delta = phase_offsets_enabled(cfg.mode);
  const bool use_residual = residuals_enabled(cfg.mode);

  Var delta;
  if (use_delta)
    delta = camera_phase_offset(w.phase, tape.constant(descriptor_matrix(*in.frames)));

  Tensor frame_emb;
  if (use_residual) frame_emb = six_dof_matrix(*in.frames);

  Var values = in.v;
  if (use_residual) {
    Var ek = tape.constant(gather_embeddings(frame_emb, *in.key_tokens));
    values = ops::add(in.v, ops::matmul(ops::concat_cols({in.v, ek}), w.w_dv));
  }

  const bool keep = capture != nullptr;
  Var y;
  if (cfg.mode == AttentionMode::dual) {
    Branch temporal = attend(in, values, cfg, Var{}, true, keep);
    Branch camera = attend(in, values, cfg, delta, false, keep);
    y = ops::scale(ops::add(temporal.y, camera.y), 0.5);
    if (keep) {
      capture->probabilities.clear();
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor p = temporal.probs[h];
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.5 * (p[i] + camera.probs[h][i]);
        capture->probabilities.push_back(std::move(p));
      }
    }
  } else {
    Branch b = attend(in, values, cfg, use_delta ? delta : Var{}, true, keep);
    y = b.y;
    if (keep) capture->probabilities = std::move(b.probs);
  }

  Var o = ops::matmul(y, w.w_o);
  if (use_residual) {
    Var eq = tape.constant(gather_embeddings(frame_emb, *in.query_tokens));
    o = ops::add(o, ops::matmul(ops::concat_cols({y, eq}), w.w_do));
  }
  return o;
}

}  // namespace remind
