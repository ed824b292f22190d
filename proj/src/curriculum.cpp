#include "remind/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace remind {

std::string to_string(Regime r) {
  switch (r) {
    case Regime::all_history: return "all_history";
    case Regime::noisy_memory: return "noisy_memory";
    case Regime::node_drop: return "node_drop";
    case Regime::v2v_frontier: return "v2v_frontier";
    case Regime::reference_cache: return "reference_cache";
  }
  return "unknown";
}

Regime parse_regime(const std::string& name) {
  for (std::size_t i = 0; i < kRegimeCount; ++i)
    if (to_string(static_cast<Regime>(i)) == name) return static_cast<Regime>(i);
  throw std::invalid_argument("unknown regime '" + name + "'");
}

void CurriculumConfig::validate() const {
  if (!(0.0 <= sigma_min && sigma_min <= sigma_max && sigma_max <= 1.0))
    throw std::invalid_argument("curriculum: sigma range must lie in [0, 1]");
  if (!(0.0 <= noisy_min && noisy_min <= noisy_max && noisy_max <= 1.0))
    throw std::invalid_argument("curriculum: noisy-memory range must lie in [0, 1]");
  if (gap_min < 1 || gap_min > gap_max) throw std::invalid_argument("curriculum: bad gap range");
  if (alpha < 0.0 || gamma < 0.0) throw std::invalid_argument("curriculum: alpha and gamma must be >= 0");
  if (regime_weights.size() != kRegimeCount)
    throw std::invalid_argument("curriculum: one weight per regime expected");
  double total = 0.0;
  for (double w : regime_weights) {
    if (w < 0.0) throw std::invalid_argument("curriculum: negative regime weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("curriculum: all regime weights are zero");
}

std::vector<double> TrainingPlan::sigma() const {
  std::vector<double> out;
  for (const PlanChunk& c : sequence) out.push_back(c.sigma);
  return out;
}

std::vector<std::uint8_t> TrainingPlan::loss_mask() const {
  std::vector<std::uint8_t> out;
  for (const PlanChunk& c : sequence) out.push_back(c.supervised ? 1 : 0);
  return out;
}

namespace {

std::optional<std::size_t> first_of(const std::vector<std::size_t>& v) {
  if (v.empty()) return std::nullopt;
  return v.front();
}

struct GapRange {
  std::int64_t lo, hi;
};

GapRange gap_range(const FrameGraph& g, const CurriculumConfig& cfg) {
  const auto anchors = g.anchors();
  const auto n_ref = static_cast<std::int64_t>(anchors.empty() ? 0 : anchors.back() + 1);
  const auto chunks = static_cast<std::int64_t>(g.nodes.size());
  return {std::max(cfg.gap_min, n_ref), std::min(cfg.gap_max, chunks - 1)};
}

}  // namespace

bool regime_applicable(const FrameGraph& graph, Regime regime, const CurriculumConfig& cfg) {
  const std::size_t n = graph.nodes.size();
  switch (regime) {
    case Regime::all_history: return n >= 1;
    case Regime::noisy_memory:
    case Regime::v2v_frontier: return n >= 2;
    case Regime::node_drop: return graph.has_interruption() && !graph.recoveries().empty();
    case Regime::reference_cache: {
      if (!graph.has_interruption() || graph.anchors().empty() || graph.recoveries().empty())
        return false;
      const GapRange r = gap_range(graph, cfg);
      return r.lo <= r.hi;
    }
  }
  return false;
}

Regime sample_regime(const FrameGraph& graph, const CurriculumConfig& cfg, std::mt19937_64& rng) {
  std::vector<double> w(kRegimeCount, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < kRegimeCount; ++i)
    if (regime_applicable(graph, static_cast<Regime>(i), cfg)) total += (w[i] = cfg.regime_weights.at(i));
  if (total <= 0.0) throw std::invalid_argument("sample_regime: no enabled regime applies to this clip");
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (std::size_t i = 0; i < kRegimeCount; ++i) {
    if (w[i] <= 0.0) continue;
    if (u < w[i]) return static_cast<Regime>(i);
    u -= w[i];
  }
  for (std::size_t i = kRegimeCount; i-- > 0;)
    if (w[i] > 0.0) return static_cast<Regime>(i);
  return Regime::all_history;
}

TrainingPlan make_plan(const FrameGraph& graph, std::size_t frames_per_chunk, Regime regime,
                       const CurriculumConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (frames_per_chunk == 0) throw std::invalid_argument("make_plan: zero chunk size");
  if (!regime_applicable(graph, regime, cfg))
    throw std::invalid_argument("make_plan: regime " + to_string(regime) +
                                " does not apply to this graph");
  const std::size_t n = graph.nodes.size();
  const auto m = static_cast<std::int64_t>(frames_per_chunk);
  auto draw = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto sample_sigma = [&] { return draw(cfg.sigma_min, cfg.sigma_max); };
  auto chunk = [&](std::size_t k) {
    PlanChunk c;
    c.source_chunk = k;
    c.first_position = static_cast<std::int64_t>(k) * m;
    return c;
  };
  auto random_split = [&] {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(1, n - 1)(rng));
  };

  TrainingPlan plan;
  plan.regime = regime;
  const auto recovery = first_of(graph.recoveries());
  switch (regime) {
    case Regime::all_history:
      for (std::size_t k = 0; k < n; ++k) {
        PlanChunk c = chunk(k);
        c.sigma = sample_sigma();
        c.supervised = true;
        plan.sequence.push_back(c);
      }
      break;
    case Regime::noisy_memory: {
      const std::size_t current = recovery ? *recovery : random_split();
      for (std::size_t k = 0; k <= current; ++k) {
        PlanChunk c = chunk(k);
        c.sigma = k == current ? sample_sigma() : draw(cfg.noisy_min, cfg.noisy_max);
        c.supervised = k == current;
        plan.sequence.push_back(c);
      }
      break;
    }
    case Regime::node_drop: {
      plan.drop_set = graph.interruptions();
      for (std::size_t k = 0; k < n; ++k) {
        PlanChunk c = chunk(k);
        if (std::find(plan.drop_set.begin(), plan.drop_set.end(), k) != plan.drop_set.end()) {
          c.sigma = 1.0;
          c.noise_replaced = true;
        } else if (k >= *recovery) {
          c.sigma = sample_sigma();
          c.supervised = true;
        }
        plan.sequence.push_back(c);
      }
      break;
    }
    case Regime::v2v_frontier: {
      const std::size_t split = recovery ? *recovery : random_split();
      for (std::size_t k = 0; k < n; ++k) {
        PlanChunk c = chunk(k);
        if (k >= split) {
          c.sigma = sample_sigma();
          c.supervised = true;
        }
        plan.sequence.push_back(c);
      }
      break;
    }
    case Regime::reference_cache: {
      const GapRange r = gap_range(graph, cfg);
      if (r.lo > r.hi)
        throw std::invalid_argument("make_plan: no admissible reference gap for this graph");
      const std::int64_t gap = std::uniform_int_distribution<std::int64_t>(r.lo, r.hi)(rng);
      CachePrepend prep;
      prep.gap_chunks = gap;
      prep.first_target_position = gap * m;
      for (std::size_t k = 0; k <= graph.anchors().back(); ++k) {
        PlanChunk c = chunk(k);
        c.reference = true;
        prep.reference_chunks.push_back(k);
        plan.sequence.push_back(c);
      }
      for (auto k = static_cast<std::size_t>(gap); k < n; ++k) {
        PlanChunk c = chunk(k);
        if (k >= *recovery) {
          c.sigma = sample_sigma();
          c.supervised = true;
        }
        plan.sequence.push_back(c);
      }
      plan.cache_prepend = prep;
      break;
    }
  }
  validate_plan(plan, graph);
  return plan;
}

void validate_plan(const TrainingPlan& plan, const FrameGraph& graph) {
  bool any = false;
  for (const PlanChunk& c : plan.sequence) {
    any = any || c.supervised;
    if (c.source_chunk >= graph.nodes.size()) throw std::logic_error("plan: chunk outside the clip");
    if (!(c.sigma >= 0.0 && c.sigma <= 1.0)) throw std::logic_error("plan: sigma outside [0, 1]");
  }
  if (!any) throw std::logic_error("plan: loss mask is empty");
  for (std::size_t k : plan.drop_set)
    if (k < graph.nodes.size() && graph.nodes[k].protected_anchor)
      throw std::logic_error("plan: drop set contains protected anchor " + std::to_string(k));
  for (std::size_t i = 1; i < plan.sequence.size(); ++i)
    if (plan.sequence[i].first_position <= plan.sequence[i - 1].first_position)
      throw std::logic_error("plan: sequence positions not increasing");
}

NoisySample noise_with(const Tensor& x0, double sigma, const Tensor& eps) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("noise_sample: sigma outside [0, 1]");
  if (!x0.same_shape(eps)) throw std::invalid_argument("noise_sample: noise shape differs from x0");
  NoisySample s{Tensor(x0.shape()), Tensor(x0.shape())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    s.x_t[i] = (1.0 - sigma) * x0[i] + sigma * eps[i];
    s.u[i] = eps[i] - x0[i];
  }
  return s;
}

NoisySample noise_sample(const Tensor& x0, double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("noise_sample: sigma outside [0, 1]");
  Tensor eps(x0.shape());
  for (double& e : eps.storage()) e = std::normal_distribution<double>(0.0, 1.0)(rng);
  return noise_with(x0, sigma, eps);
}

Var flow_loss(Var pred, const Tensor& target, const std::vector<std::uint8_t>& loss_mask,
              std::size_t rows_per_chunk) {
  if (!pred.value().same_shape(target)) throw std::invalid_argument("flow_loss: shape mismatch");
  if (pred.value().rank() != 2) throw std::invalid_argument("flow_loss: expected rank-2 input");
  if (rows_per_chunk == 0 || loss_mask.size() * rows_per_chunk != pred.rows())
    throw std::invalid_argument("flow_loss: mask does not tile the rows");
  Tensor weight(target.shape());
  std::size_t count = 0;
  const std::size_t cols = target.cols();
  for (std::size_t r = 0; r < target.rows(); ++r) {
    if (!loss_mask[r / rows_per_chunk]) continue;
    for (std::size_t c = 0; c < cols; ++c) weight(r, c) = 1.0;
    count += cols;
  }
  if (count == 0) throw std::invalid_argument("flow_loss: empty loss mask");
  Tape& tape = *pred.tape;
  Var diff = ops::mul_const(ops::sub(pred, tape.constant(target)), weight);
  return ops::scale(ops::sum(ops::mul(diff, diff)), 1.0 / static_cast<double>(count));
}

std::vector<std::pair<std::size_t, std::size_t>> within_chunk_pairs(
    const std::vector<std::uint8_t>& mask, std::size_t frames_per_chunk) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (!mask[c]) continue;
    for (std::size_t f = 1; f < frames_per_chunk; ++f)
      out.emplace_back(c * frames_per_chunk + f - 1, c * frames_per_chunk + f);
  }
  return out;
}

Var delta_loss(Var x0_hat, const Tensor& x0,
               const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (!x0_hat.value().same_shape(x0) || x0.rank() != 2)
    throw std::invalid_argument("delta_loss: expected matching [frames x features] inputs");
  if (x0.rows() < 2) throw std::invalid_argument("delta_loss: needs at least two frames");
  if (pairs.empty()) throw std::invalid_argument("delta_loss: no frame pairs");
  std::vector<std::size_t> prev, next;
  for (auto [a, b] : pairs) {
    if (a >= x0.rows() || b >= x0.rows()) throw std::out_of_range("delta_loss: frame index");
    prev.push_back(a);
    next.push_back(b);
  }
  Tape& tape = *x0_hat.tape;
  Tensor true_delta({pairs.size(), x0.cols()});
  for (std::size_t p = 0; p < pairs.size(); ++p)
    for (std::size_t c = 0; c < x0.cols(); ++c) true_delta(p, c) = x0(next[p], c) - x0(prev[p], c);
  Var pred_delta = ops::sub(ops::gather_rows(x0_hat, next), ops::gather_rows(x0_hat, prev));
  Var err = ops::sub(pred_delta, tape.constant(true_delta));
  return ops::mean(ops::mul(err, err));
}

double sigma_batch(const std::vector<Tensor>& clips) {
  std::size_t n = 0;
  double mean = 0.0;
  for (const Tensor& c : clips) {
    if (c.rank() != 2 || c.rows() < 2) throw std::invalid_argument("sigma_batch: needs at least two frames");
    for (std::size_t r = 1; r < c.rows(); ++r)
      for (std::size_t k = 0; k < c.cols(); ++k) {
        mean += c(r, k) - c(r - 1, k);
        ++n;
      }
  }
  if (n == 0) throw std::invalid_argument("sigma_batch: empty batch");
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const Tensor& c : clips)
    for (std::size_t r = 1; r < c.rows(); ++r)
      for (std::size_t k = 0; k < c.cols(); ++k) {
        const double d = c(r, k) - c(r - 1, k) - mean;
        var += d * d;
      }
  return var / static_cast<double>(n);
}

double adaptive_weight(double sigma_batch, std::size_t iter, double alpha, double gamma,
                       std::size_t warmup) {
  if (!(sigma_batch >= 0.0)) throw std::invalid_argument("adaptive_weight: negative sigma_batch");
  if (iter < warmup) return 0.0;
  return alpha * std::exp(-gamma * sigma_batch);
}

}  // namespace remind
