#include <cmath>
#include <random>

#include "doctest.h"
#include "remind/curriculum.hpp"
#include "test_util.hpp"

using namespace remind;
using remind::testing::random_tensor;

namespace {

WorldConfig world() {
  WorldConfig w;
  w.grid = 4;
  return w;
}

FrameGraph occluded_graph(std::size_t onset = 6, std::size_t duration = 9, std::uint64_t seed = 1) {
  SyntheticClip c = synth_world(seed, Scenario::filling_bar, 21, world());
  return apply_interruption(c, {InterruptionKind::occluder, onset, duration, 1.0}, world()).graph;
}

FrameGraph plain_graph() { return synth_world(2, Scenario::filling_bar, 21, world()).graph; }

}  // namespace

TEST_CASE("noise_sample") {
  std::mt19937_64 rng(1);
  Tensor x0 = random_tensor({3, 4}, rng);
  Tensor eps = random_tensor({3, 4}, rng);
  NoisySample a = noise_with(x0, 0.0, eps);
  CHECK(a.x_t.storage() == x0.storage());
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(a.u[i] == eps[i] - x0[i]);
  NoisySample b = noise_with(x0, 1.0, eps);
  CHECK(b.x_t.storage() == eps.storage());
  NoisySample c = noise_with(Tensor::scalar(0.0), 0.5, Tensor::scalar(2.0));
  CHECK(c.x_t.item() == 1.0);
  CHECK(c.u.item() == 2.0);
  CHECK_THROWS_AS(noise_sample(x0, 1.5, rng), std::invalid_argument);
  CHECK_THROWS_AS(noise_sample(x0, -0.1, rng), std::invalid_argument);
  // x0 is recovered exactly from x_t and the true velocity
  NoisySample d = noise_with(x0, 0.37, eps);
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(d.x_t[i] - 0.37 * d.u[i] - x0[i]) < 1e-12);
}

TEST_CASE("flow_loss") {
  std::mt19937_64 rng(2);
  Tensor u = random_tensor({6, 5}, rng);
  Tensor p = random_tensor({6, 5}, rng);
  {
    Tape tape;
    CHECK(flow_loss(tape.constant(u), u, {1, 1, 1}, 2).value().item() == 0.0);
    CHECK_THROWS_AS(flow_loss(tape.constant(u), u, {0, 0, 0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(flow_loss(tape.constant(u), u, {1, 1}, 2), std::invalid_argument);
  }
  Tape tape;
  const double got = flow_loss(tape.constant(p), u, {1, 0, 1}, 2).value().item();
  double sum = 0.0;
  for (std::size_t r : {0u, 1u, 4u, 5u})
    for (std::size_t c = 0; c < 5; ++c) sum += (p(r, c) - u(r, c)) * (p(r, c) - u(r, c));
  CHECK(std::abs(got - sum / 20.0) < 1e-12);
}

TEST_CASE("delta_loss") {
  std::mt19937_64 rng(3);
  Tensor x0 = random_tensor({6, 4}, rng);
  auto pairs = within_chunk_pairs({1, 1}, 3);
  CHECK(pairs.size() == 4);
  Tape tape;
  CHECK(delta_loss(tape.constant(x0), x0, pairs).value().item() == 0.0);

  Tensor shifted = x0;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) shifted(r, c) += 3.25 + 0.5 * static_cast<double>(c);
  CHECK(std::abs(delta_loss(tape.constant(shifted), x0, pairs).value().item()) < 1e-9);

  Tensor hat = random_tensor({6, 4}, rng);
  long double oracle = 0.0L;
  for (auto [a, b] : pairs)
    for (std::size_t c = 0; c < 4; ++c) {
      const long double d = (static_cast<long double>(hat(b, c)) - hat(a, c)) -
                            (static_cast<long double>(x0(b, c)) - x0(a, c));
      oracle += d * d;
    }
  oracle /= static_cast<long double>(pairs.size() * 4);
  CHECK(std::abs(delta_loss(tape.constant(hat), x0, pairs).value().item() -
                 static_cast<double>(oracle)) < 1e-12);

  // invariant to one constant added to both sides
  Tensor hat_c = hat, x0_c = x0;
  for (double& v : hat_c.storage()) v += 7.0;
  for (double& v : x0_c.storage()) v += 7.0;
  CHECK(std::abs(delta_loss(tape.constant(hat_c), x0_c, pairs).value().item() -
                 delta_loss(tape.constant(hat), x0, pairs).value().item()) < 1e-9);

  CHECK_THROWS_AS(delta_loss(tape.constant(Tensor({1, 4})), Tensor({1, 4}), {{0, 0}}),
                  std::invalid_argument);
}

TEST_CASE("adaptive_weight") {
  CHECK(adaptive_weight(0.0, 500, 0.2, 5.0, 200) == 0.2);
  CHECK(adaptive_weight(0.0, 199, 0.2, 5.0, 200) == 0.0);
  CHECK(std::abs(adaptive_weight(0.2, 500, 0.2, 5.0, 200) - 0.2 * std::exp(-1.0)) < 1e-9);
  CHECK(std::abs(adaptive_weight(0.2, 500, 0.2, 5.0, 200) - 0.073576) < 1e-6);
  CHECK_THROWS_AS(adaptive_weight(-0.1, 500, 0.2, 5.0, 200), std::invalid_argument);
  double prev = adaptive_weight(0.0, 1000, 0.2, 5.0, 200);
  for (int i = 1; i <= 100; ++i) {
    const double cur = adaptive_weight(0.05 * i, 1000, 0.2, 5.0, 200);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("sigma_batch") {
  Tensor still({4, 3}, 0.7);
  CHECK(sigma_batch({still, still}) == 0.0);
  Tensor alt = Tensor::matrix(3, 1, {0.0, 1.0, 0.0});
  CHECK(sigma_batch({alt}) == 1.0);
  CHECK_THROWS_AS(sigma_batch({Tensor({1, 3})}), std::invalid_argument);

  std::mt19937_64 rng(4);
  std::vector<Tensor> clips{random_tensor({5, 3}, rng), random_tensor({7, 3}, rng)};
  long double s = 0, s2 = 0;
  std::size_t n = 0;
  for (const Tensor& c : clips)
    for (std::size_t r = 1; r < c.rows(); ++r)
      for (std::size_t k = 0; k < 3; ++k) {
        const long double d = static_cast<long double>(c(r, k)) - c(r - 1, k);
        s += d;
        s2 += d * d;
        ++n;
      }
  const long double mean = s / n;
  CHECK(std::abs(sigma_batch(clips) - static_cast<double>(s2 / n - mean * mean)) < 1e-12);
}

TEST_CASE("make_plan examples") {
  CurriculumConfig cfg;
  std::mt19937_64 rng(5);
  TrainingPlan all = make_plan(plain_graph(), 3, Regime::all_history, cfg, rng);
  CHECK(all.sequence.size() == 7);
  for (auto v : all.loss_mask()) CHECK(v == 1);
  for (double s : all.sigma()) {
    CHECK(s >= 0.02);
    CHECK(s <= 0.98);
  }

  FrameGraph g = occluded_graph();
  TrainingPlan drop = make_plan(g, 3, Regime::node_drop, cfg, rng);
  CHECK(drop.drop_set == std::vector<std::size_t>{2, 3, 4});
  auto mask = drop.loss_mask();
  CHECK(mask[5] == 1);
  CHECK(mask[6] == 1);
  CHECK(mask[1] == 0);
  CHECK(drop.sequence[1].sigma == 0.0);
  for (std::size_t k : {2u, 3u, 4u}) {
    CHECK(drop.sequence[k].noise_replaced);
    CHECK(drop.sequence[k].sigma == 1.0);
  }

  TrainingPlan noisy = make_plan(g, 3, Regime::noisy_memory, cfg, rng);
  REQUIRE(noisy.sequence.size() == 6);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(noisy.sequence[k].sigma >= 0.8);
    CHECK_FALSE(noisy.sequence[k].supervised);
  }
  CHECK(noisy.sequence[5].supervised);

  TrainingPlan front = make_plan(g, 3, Regime::v2v_frontier, cfg, rng);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(front.sequence[k].sigma == 0.0);
    CHECK_FALSE(front.sequence[k].supervised);
  }

  bool saw_four = false;
  for (int i = 0; i < 200; ++i) {
    TrainingPlan ref = make_plan(g, 3, Regime::reference_cache, cfg, rng);
    REQUIRE(ref.cache_prepend.has_value());
    const auto& p = *ref.cache_prepend;
    CHECK(p.reference_chunks == std::vector<std::size_t>{0, 1});
    CHECK(p.gap_chunks >= 2);
    CHECK(p.gap_chunks <= 6);
    CHECK(p.first_target_position == p.gap_chunks * 3);
    CHECK(ref.sequence[2].first_position == p.first_target_position);
    CHECK(ref.sequence[0].reference);
    if (p.gap_chunks == 4) {
      saw_four = true;
      CHECK(p.first_target_position == 12);
    }
  }
  CHECK(saw_four);

  CHECK_THROWS_AS(make_plan(plain_graph(), 3, Regime::node_drop, cfg, rng), std::invalid_argument);
  CHECK_THROWS_AS(make_plan(plain_graph(), 3, Regime::reference_cache, cfg, rng),
                  std::invalid_argument);
}

TEST_CASE("node_drop never drops a protected anchor") {
  CurriculumConfig cfg;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t onset = 3 + rng() % 9;
    const std::size_t dur = 1 + rng() % (15 - onset);
    FrameGraph g = occluded_graph(onset, dur, rng());
    TrainingPlan p = make_plan(g, 3, Regime::node_drop, cfg, rng);
    for (std::size_t k : p.drop_set) CHECK_FALSE(g.nodes[k].protected_anchor);
    CHECK_FALSE(g.anchors().empty());
  }
}

TEST_CASE("v2v_frontier prefix carries no loss") {
  CurriculumConfig cfg;
  std::mt19937_64 rng(7);
  TrainingPlan p = make_plan(occluded_graph(), 3, Regime::v2v_frontier, cfg, rng);
  const std::size_t rows_per_chunk = 3;
  Tensor u = random_tensor({7 * rows_per_chunk, 4}, rng);
  Tensor pred = random_tensor({7 * rows_per_chunk, 4}, rng);
  Tensor zeroed = pred;
  for (std::size_t r = 0; r < 5 * rows_per_chunk; ++r)
    for (std::size_t c = 0; c < 4; ++c) zeroed(r, c) = 0.0;
  Tape tape;
  CHECK(flow_loss(tape.constant(pred), u, p.loss_mask(), rows_per_chunk).value().item() ==
        flow_loss(tape.constant(zeroed), u, p.loss_mask(), rows_per_chunk).value().item());
}

TEST_CASE("sample_regime respects weights and applicability") {
  CurriculumConfig cfg;
  cfg.regime_weights = {0, 0, 1, 1, 1};
  std::mt19937_64 rng(8);
  std::vector<int> hits(kRegimeCount, 0);
  FrameGraph g = occluded_graph();
  for (int i = 0; i < 3000; ++i) ++hits[static_cast<std::size_t>(sample_regime(g, cfg, rng))];
  CHECK(hits[0] == 0);
  CHECK(hits[1] == 0);
  for (std::size_t i = 2; i < 5; ++i) CHECK(std::abs(hits[i] - 1000) < 120);
  CHECK_THROWS_AS(sample_regime(plain_graph(), [] {
                    CurriculumConfig c;
                    c.regime_weights = {0, 0, 1, 0, 1};
                    return c;
                  }(), rng),
                  std::invalid_argument);
  CHECK(parse_regime("node_drop") == Regime::node_drop);
  CHECK_THROWS_AS(parse_regime("nope"), std::invalid_argument);
}
