#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "remind/pmrope.hpp"
#include "test_util.hpp"

// Shared attention fixtures and the loop oracle for plain rotary attention.
namespace remind::testing {

struct AttnTensors {
  Tensor q, k, v, w_o, w1, b1, w2, b2, w_dv, w_do;
};

// Zero output layers and residuals unless `perturbed`.
inline AttnTensors make_tensors(const AttentionConfig& cfg, std::size_t n, std::size_t m,
                         std::size_t model_dim, std::mt19937_64& rng, bool perturbed) {
  const std::size_t inner = cfg.inner_dim();
  AttnTensors t;
  t.q = random_tensor({n, inner}, rng);
  t.k = random_tensor({m, inner}, rng);
  t.v = random_tensor({m, inner}, rng);
  t.w_o = random_tensor({inner, model_dim}, rng, 0.3);
  t.w1 = random_tensor({kPoseDescriptorSize, cfg.phase_hidden}, rng, 0.3);
  t.b1 = random_tensor({cfg.phase_hidden}, rng, 0.1);
  t.w2 = Tensor({cfg.phase_hidden, cfg.delta_bands()});
  t.b2 = Tensor({cfg.delta_bands()});
  t.w_dv = Tensor({inner + kSixDofSize, inner});
  t.w_do = Tensor({inner + kSixDofSize, model_dim});
  if (perturbed) {
    t.w2 = random_tensor({cfg.phase_hidden, cfg.delta_bands()}, rng, 0.3);
    t.b2 = random_tensor({cfg.delta_bands()}, rng, 0.3);
    t.w_dv = random_tensor({inner + kSixDofSize, inner}, rng, 0.2);
    t.w_do = random_tensor({inner + kSixDofSize, model_dim}, rng, 0.2);
  }
  return t;
}

inline FrameTable random_frames(std::size_t count, std::mt19937_64& rng, std::int64_t first = 0) {
  FrameTable f;
  std::uniform_real_distribution<double> yaw(-1.0, 1.0), tr(-1.0, 1.0), foc(0.5, 1.5);
  std::int64_t pos = first;
  for (std::size_t i = 0; i < count; ++i) {
    f.positions.push_back(pos);
    pos += 1 + static_cast<std::int64_t>(rng() % 3);
    CameraPose p;
    p.rotation = yaw_rotation(yaw(rng));
    p.translation = {tr(rng), tr(rng), tr(rng)};
    p.fx = foc(rng);
    p.fy = foc(rng);
    f.poses.push_back(p);
  }
  return f;
}

struct Layout {
  FrameTable frames;
  TokenGrid tokens;
  std::shared_ptr<const std::vector<std::uint8_t>> mask;
};

// chunks x frames_per_chunk frames of grid x grid tokens, chunk-causal mask.
inline Layout make_layout(std::size_t chunks, std::size_t fpc, std::size_t grid, std::mt19937_64& rng) {
  Layout l;
  l.frames = random_frames(chunks * fpc, rng);
  l.tokens = frame_major_grid(0, chunks * fpc, grid);
  l.mask = std::make_shared<const std::vector<std::uint8_t>>(
      chunk_causal_mask(chunks, fpc * grid * grid));
  return l;
}

inline Var run(Tape& tape, const AttnTensors& t, const Layout& l, const AttentionConfig& cfg,
        AttentionCapture* cap = nullptr) {
  AttentionInputs in{tape.parameter(t.q), tape.parameter(t.k), tape.parameter(t.v),
                     &l.tokens, &l.tokens, &l.frames, l.mask};
  AttentionWeights w{tape.parameter(t.w_o),
                     {tape.parameter(t.w1), tape.parameter(t.b1), tape.parameter(t.w2),
                      tape.parameter(t.b2)},
                     tape.parameter(t.w_dv),
                     tape.parameter(t.w_do)};
  return pm_attention(in, w, cfg, cap);
}

// Independent loop implementation of plain rotary attention with W_O.
inline Tensor plain_rope_oracle(const AttnTensors& t, const Layout& l, const AttentionConfig& cfg) {
  const std::size_t n = t.q.rows(), inner = cfg.inner_dim(), hd = cfg.head_dim;
  const std::size_t nt = cfg.temporal(), nr = cfg.row_bands(), nc = cfg.col_bands();
  auto angle = [&](std::size_t tok, std::size_t b) {
    auto freq = [&](std::size_t k, std::size_t count) {
      return std::pow(cfg.rope_base, -static_cast<double>(k) / static_cast<double>(count));
    };
    if (b < nt) return static_cast<double>(l.frames.positions[l.tokens.frame[tok]]) * freq(b, nt);
    if (b < nt + nr) return l.tokens.row[tok] * freq(b - nt, nr);
    return l.tokens.col[tok] * freq(b - nt - nr, nc);
  };
  auto rotate = [&](const Tensor& x) {
    Tensor y = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t b = 0; b < hd / 2; ++b) {
          const double a = angle(i, b);
          const std::size_t c = h * hd + 2 * b;
          y(i, c) = std::cos(a) * x(i, c) - std::sin(a) * x(i, c + 1);
          y(i, c + 1) = std::sin(a) * x(i, c) + std::cos(a) * x(i, c + 1);
        }
    return y;
  };
  Tensor qr = rotate(t.q), kr = rotate(t.k);
  Tensor y({n, inner});
  for (std::size_t h = 0; h < cfg.heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(n, -1e300);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (!(*l.mask)[i * n + j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qr(i, h * hd + c) * kr(j, h * hd + c);
        logit[j] = s / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, logit[j]);
      }
      double z = 0.0;
      std::vector<double> p(n, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        if ((*l.mask)[i * n + j]) z += (p[j] = std::exp(logit[j] - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < hd; ++c) y(i, h * hd + c) += p[j] / z * t.v(j, h * hd + c);
    }
  Tensor o({n, t.w_o.cols()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < o.cols(); ++c)
      for (std::size_t p = 0; p < inner; ++p) o(i, c) += y(i, p) * t.w_o(p, c);
  return o;
}

inline AttentionConfig small_config(AttentionMode mode) {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.mode = mode;
  cfg.phase_hidden = 6;
  return cfg;
}

}  // namespace remind::testing
