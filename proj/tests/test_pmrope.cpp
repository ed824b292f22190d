#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "attention_fixture.hpp"
#include "remind/pmrope.hpp"

using namespace remind;
using namespace remind::testing;

TEST_CASE("rotary_phases") {
  std::vector<std::int64_t> zero{0};
  auto p0 = rotary_phases(zero, 4);
  for (double a : p0.angles.storage()) CHECK(a == 0.0);

  std::vector<std::int64_t> lin{0, 1, 2, 3};
  auto p1 = rotary_phases(lin, 1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p1.angles(i, 0) == static_cast<double>(i));

  std::vector<std::int64_t> gapped{0, 1, 2, 12, 13};
  auto pg = rotary_phases(gapped, 3, 100.0);
  const auto w = band_frequencies(3, 100.0);
  for (std::size_t i = 0; i < gapped.size(); ++i)
    for (std::size_t b = 0; b < 3; ++b)
      CHECK(pg.angles(i, b) == static_cast<double>(gapped[i]) * w[b]);
  CHECK(pg.angles(3, 0) - pg.angles(2, 0) == doctest::Approx(10.0));

  CHECK_THROWS_AS(rotary_phases(lin, 0), std::invalid_argument);
}

TEST_CASE("camera_phase_offset is zero at initialization") {
  std::mt19937_64 rng(1);
  AttentionConfig cfg = small_config(AttentionMode::full);
  Tape tape;
  AttnTensors t = make_tensors(cfg, 1, 1, 4, rng, false);
  PhaseOffsetNet net{tape.parameter(t.w1), tape.parameter(t.b1), tape.parameter(t.w2),
                     tape.parameter(t.b2)};
  Var c = tape.constant(random_tensor({5, kPoseDescriptorSize}, rng));
  for (double d : camera_phase_offset(net, c).value().storage()) CHECK(d == 0.0);
  Var zero = tape.constant(Tensor({1, kPoseDescriptorSize}));
  for (double d : camera_phase_offset(net, zero).value().storage()) CHECK(d == 0.0);
}

TEST_CASE("camera_phase_offset moves off zero after one gradient step") {
  std::mt19937_64 rng(2);
  AttentionConfig cfg = small_config(AttentionMode::full);
  AttnTensors t = make_tensors(cfg, 1, 1, 4, rng, false);
  Tensor c = random_tensor({3, kPoseDescriptorSize}, rng);
  Tensor target = random_tensor({3, cfg.delta_bands()}, rng);
  auto offsets = [&](Tape& tape, std::vector<Var>& leaves) {
    leaves = {tape.parameter(t.w1), tape.parameter(t.b1), tape.parameter(t.w2),
              tape.parameter(t.b2)};
    return camera_phase_offset({leaves[0], leaves[1], leaves[2], leaves[3]}, tape.constant(c));
  };
  {
    Tape tape;
    std::vector<Var> leaves;
    Var d = offsets(tape, leaves);
    Var loss = ops::sum(ops::mul(ops::sub(d, tape.constant(target)),
                                 ops::sub(d, tape.constant(target))));
    auto g = grad(loss, leaves);
    const double lr = 0.1;
    for (std::size_t i = 0; i < t.w2.size(); ++i) t.w2[i] -= lr * g[2][i];
    for (std::size_t i = 0; i < t.b2.size(); ++i) t.b2[i] -= lr * g[3][i];
  }
  Tape tape;
  std::vector<Var> leaves;
  double norm = 0.0;
  for (double d : offsets(tape, leaves).value().storage()) norm += d * d;
  CHECK(norm > 1e-6);
}

TEST_CASE("apply_rotary") {
  Tape tape;
  Var x = tape.constant(Tensor::matrix(1, 2, {1.0, 0.0}));
  Var y0 = ops::rotary(x, tape.constant(Tensor({1, 1})), 1);
  CHECK(y0.value()[0] == 1.0);
  CHECK(y0.value()[1] == 0.0);
  Var ypi = ops::rotary(x, tape.constant(Tensor::matrix(1, 1, {std::numbers::pi})), 1);
  CHECK(ypi.value()[0] == doctest::Approx(-1.0));
  CHECK(std::abs(ypi.value()[1]) < 1e-15);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor xv = random_tensor({4, 8}, rng);
    Tensor av = random_tensor({4, 2}, rng, 5.0);
    Tensor yv = ops::rotary(tape.constant(xv), tape.constant(av), 2).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double nx = 0, ny = 0;
      for (std::size_t c = 0; c < 8; ++c) {
        nx += xv(r, c) * xv(r, c);
        ny += yv(r, c) * yv(r, c);
      }
      CHECK(std::abs(std::sqrt(nx) - std::sqrt(ny)) < 1e-6);
    }
  }
  CHECK_THROWS_AS(ops::rotary(tape.constant(Tensor({1, 3})), tape.constant(Tensor({1, 1})), 1),
                  std::invalid_argument);
}

TEST_CASE("chunk_causal_mask") {
  for (auto v : chunk_causal_mask(1, 4)) CHECK(v == 1);
  auto two = chunk_causal_mask(2, 1);
  CHECK(two == std::vector<std::uint8_t>{1, 0, 1, 1});

  auto m = chunk_causal_mask(3, 2);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const bool oracle = (j / 2) <= (i / 2);
      CHECK(static_cast<bool>(m[i * 6 + j]) == oracle);
    }
  CHECK_THROWS_AS(chunk_causal_mask(0, 2), std::invalid_argument);
  CHECK_THROWS_AS(chunk_causal_mask(2, 0), std::invalid_argument);
}

TEST_CASE("pm_attention: zero-init equivalence with plain rotary attention") {
  std::mt19937_64 rng(4);
  for (AttentionMode mode : {AttentionMode::full, AttentionMode::qk_only, AttentionMode::vo_only}) {
    AttentionConfig cfg = small_config(mode);
    AttentionConfig plain = small_config(AttentionMode::rope);
    for (int trial = 0; trial < 10; ++trial) {
      Layout l = make_layout(3, 2, 2, rng);
      AttnTensors t = make_tensors(cfg, l.tokens.size(), l.tokens.size(), 5, rng, false);
      Tape tape;
      Tensor out = run(tape, t, l, cfg).value();
      Tensor ref = run(tape, t, l, plain).value();
      CHECK(max_abs_diff(out, ref) == 0.0);
      CHECK(max_abs_diff(out, plain_rope_oracle(t, l, cfg)) < 1e-6);
    }
  }
}

TEST_CASE("pm_attention: single token returns W_O v") {
  std::mt19937_64 rng(5);
  AttentionConfig cfg = small_config(AttentionMode::full);
  Layout l = make_layout(1, 1, 1, rng);
  AttnTensors t = make_tensors(cfg, 1, 1, 3, rng, false);
  Tape tape;
  Tensor out = run(tape, t, l, cfg).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double e = 0.0;
    for (std::size_t p = 0; p < cfg.inner_dim(); ++p) e += t.v(0, p) * t.w_o(p, c);
    CHECK(out(0, c) == doctest::Approx(e).epsilon(1e-12));
  }
}

TEST_CASE("pm_attention: relative-shift invariance of attention probabilities") {
  std::mt19937_64 rng(6);
  for (AttentionMode mode : {AttentionMode::full, AttentionMode::dual}) {
    AttentionConfig cfg = small_config(mode);
    for (int trial = 0; trial < 5; ++trial) {
      Layout l = make_layout(3, 2, 2, rng);
      AttnTensors t = make_tensors(cfg, l.tokens.size(), l.tokens.size(), 4, rng, true);
      Tape tape;
      AttentionCapture a, b;
      Tensor out_a = run(tape, t, l, cfg, &a).value();
      Layout shifted = l;
      for (auto& p : shifted.frames.positions) p += 37;
      Tensor out_b = run(tape, t, shifted, cfg, &b).value();
      for (std::size_t h = 0; h < cfg.heads; ++h)
        CHECK(max_abs_diff(a.probabilities[h], b.probabilities[h]) < 1e-6);
      CHECK(max_abs_diff(out_a, out_b) < 1e-6);
    }
  }
}

TEST_CASE("pm_attention: chunk causality and row normalization") {
  std::mt19937_64 rng(7);
  AttentionConfig cfg = small_config(AttentionMode::full);
  Layout l = make_layout(3, 2, 2, rng);
  const std::size_t per_chunk = 8;
  AttnTensors t = make_tensors(cfg, l.tokens.size(), l.tokens.size(), 4, rng, true);
  Tape tape;
  AttentionCapture cap;
  Tensor base = run(tape, t, l, cfg, &cap).value();
  for (const Tensor& p : cap.probabilities)
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        if (!(*l.mask)[r * p.cols() + c]) CHECK(p(r, c) == 0.0);
        s += p(r, c);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }

  // perturb everything belonging to the last chunk, including its pose
  AttnTensors pert = t;
  for (std::size_t r = 2 * per_chunk; r < 3 * per_chunk; ++r)
    for (std::size_t c = 0; c < cfg.inner_dim(); ++c) {
      pert.q(r, c) += 1.0;
      pert.k(r, c) -= 2.0;
      pert.v(r, c) *= 3.0;
    }
  Layout lp = l;
  lp.frames.poses[5].translation.x() += 4.0;
  lp.frames.poses[4].rotation = yaw_rotation(2.5);
  Tensor moved = run(tape, pert, lp, cfg).value();
  for (std::size_t r = 0; r < 2 * per_chunk; ++r)
    for (std::size_t c = 0; c < base.cols(); ++c) CHECK(moved(r, c) == base(r, c));
}

TEST_CASE("pm_attention: gradients match finite differences") {
  std::mt19937_64 rng(8);
  for (AttentionMode mode : {AttentionMode::full, AttentionMode::dual}) {
    AttentionConfig cfg = small_config(mode);
    Layout l = make_layout(2, 2, 2, rng);
    AttnTensors t = make_tensors(cfg, l.tokens.size(), l.tokens.size(), 3, rng, true);
    Tensor contract = random_tensor({l.tokens.size(), 3}, rng);
    auto f = [&](Tape& tape, const std::vector<Var>& p) {
      AttentionInputs in{p[0], p[1], p[2], &l.tokens, &l.tokens, &l.frames, l.mask};
      AttentionWeights w{p[3], {p[4], p[5], p[6], p[7]}, p[8], p[9]};
      return ops::sum(ops::mul(pm_attention(in, w, cfg), tape.constant(contract)));
    };
    auto res = remind::testing::check_gradients(
        f, {t.q, t.k, t.v, t.w_o, t.w1, t.b1, t.w2, t.b2, t.w_dv, t.w_do}, 10, rng);
    INFO("mode " << to_string(mode) << " max rel " << res.max_rel_error);
    CHECK(res.failures == 0);
  }
}

TEST_CASE("pm_attention: input validation") {
  std::mt19937_64 rng(9);
  AttentionConfig cfg = small_config(AttentionMode::full);
  Layout l = make_layout(2, 1, 2, rng);
  AttnTensors t = make_tensors(cfg, l.tokens.size(), l.tokens.size(), 3, rng, false);
  Layout bad = l;
  bad.mask = std::make_shared<const std::vector<std::uint8_t>>(chunk_causal_mask(1, 3));
  Tape tape;
  CHECK_THROWS_AS(run(tape, t, bad, cfg), std::invalid_argument);
  Layout short_frames = l;
  short_frames.frames.poses.pop_back();
  CHECK_THROWS_AS(run(tape, t, short_frames, cfg), std::invalid_argument);

  AttentionConfig odd = cfg;
  odd.head_dim = 7;
  CHECK_THROWS_AS(odd.validate(), std::invalid_argument);
  CHECK(parse_attention_mode("vo_only") == AttentionMode::vo_only);
  CHECK_THROWS_AS(parse_attention_mode("bogus"), std::invalid_argument);
}
