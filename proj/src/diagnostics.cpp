#include "remind/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "remind/container.hpp"

namespace remind {

double ImportanceMatrix::row_sum(std::size_t i) const {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    if (ok(i, j)) s += at(i, j);
  return s;
}

ImportanceMatrix importance_from_attention(const std::vector<std::vector<Tensor>>& attention,
                                           const std::vector<std::size_t>& chunk_rows,
                                           LayerRange layers) {
  if (attention.empty() || attention.front().empty())
    throw std::invalid_argument("kv_importance: attention capture disabled");
  const std::size_t n = chunk_rows.size();
  if (n == 0) throw std::invalid_argument("kv_importance: no chunks");
  const std::size_t M = std::accumulate(chunk_rows.begin(), chunk_rows.end(), std::size_t{0});
  const Tensor& probe = attention.front().front();
  if (probe.rank() != 2 || probe.cols() != M)
    throw std::invalid_argument("kv_importance: attention is " + shape_string(probe.shape()) +
                                " but chunks cover " + std::to_string(M) + " keys");
  const std::size_t N = probe.rows();

  // Query rows belong to the trailing chunks.
  std::vector<std::size_t> start(n + 1, 0);
  for (std::size_t c = 0; c < n; ++c) start[c + 1] = start[c] + chunk_rows[c];
  if (N > M) throw std::invalid_argument("kv_importance: more queries than keys");
  const std::size_t q0 = M - N;
  std::size_t first_query_chunk = n;
  for (std::size_t c = 0; c < n; ++c)
    if (start[c] == q0) { first_query_chunk = c; break; }
  if (first_query_chunk == n && N > 0)
    throw std::invalid_argument("kv_importance: queries do not start on a chunk boundary");

  const std::size_t last = std::min(layers.last, attention.size() - 1);
  if (layers.first > last) throw std::invalid_argument("kv_importance: empty layer range");

  ImportanceMatrix mat;
  mat.n = n;
  mat.values.assign(n * n, 0.0);
  mat.available.assign(n * n, 0);
  for (std::size_t i = first_query_chunk; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mat.available[i * n + j] = 1;

  for (std::size_t l = layers.first; l <= last; ++l) {
    const auto& heads = attention[l];
    std::vector<double> cell(n * n, 0.0);
    for (const Tensor& p : heads) {
      if (p.rows() != N || p.cols() != M)
        throw std::invalid_argument("kv_importance: ragged attention capture");
      for (std::size_t i = first_query_chunk; i < n; ++i) {
        const double w = 1.0 / static_cast<double>(chunk_rows[i] * heads.size());
        for (std::size_t r = start[i]; r < start[i + 1]; ++r) {
          const double* row = p.data() + (r - q0) * M;
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = start[j]; k < start[j + 1]; ++k) s += row[k];
            cell[i * n + j] += w * s;
          }
        }
      }
    }
    for (std::size_t e = 0; e < n * n; ++e)
      if (!mat.available[e]) cell[e] = 0.0;
    mat.per_layer.push_back(cell);
  }
  for (std::size_t e = 0; e < n * n; ++e) {
    if (!mat.available[e]) continue;
    double best = 0.0;
    for (const auto& layer : mat.per_layer) best = std::max(best, layer[e]);
    mat.values[e] = best;
  }
  return mat;
}

SequenceInput sequence_from_chunks(const std::vector<Tensor>& chunks,
                                   const std::vector<std::int64_t>& chunk_positions,
                                   const std::vector<CameraPose>& poses,
                                   std::size_t frames_per_chunk, std::size_t grid,
                                   std::size_t scenario) {
  if (chunks.empty()) throw std::invalid_argument("sequence: no chunks");
  if (chunk_positions.size() != chunks.size() || poses.size() != chunks.size() * frames_per_chunk)
    throw std::invalid_argument("sequence: positions or poses do not match the chunks");
  const std::size_t rows = frames_per_chunk * grid * grid;
  const std::size_t dim = chunks.front().size() / rows;
  SequenceInput in;
  in.grid = grid;
  in.scenario = scenario;
  in.x = Tensor({chunks.size() * rows, dim});
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (chunks[i].size() != rows * dim)
      throw std::invalid_argument("sequence: chunk " + std::to_string(i) + " has shape " +
                                  shape_string(chunks[i].shape()));
    std::copy(chunks[i].storage().begin(), chunks[i].storage().end(),
              in.x.storage().begin() + static_cast<std::ptrdiff_t>(i * rows * dim));
    for (std::size_t f = 0; f < frames_per_chunk; ++f) {
      in.frames.positions.push_back(chunk_positions[i] + static_cast<std::int64_t>(f));
      in.frames.poses.push_back(poses[i * frames_per_chunk + f]);
      in.frame_sigma.push_back(0.0);
      in.frame_chunk.push_back(i);
    }
  }
  return in;
}

SequenceInput sequence_from_clip(const SyntheticClip& clip) {
  const std::size_t m = clip.frames_per_chunk();
  const std::size_t T = clip.tokens();
  const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(T))));
  if (grid * grid != T) throw std::invalid_argument("sequence: clip tokens are not a square grid");
  std::vector<Tensor> chunks;
  std::vector<std::int64_t> positions;
  const std::size_t rows = m * T * clip.dim();
  for (std::size_t c = 0; c < clip.chunks(); ++c) {
    Tensor t({m * T, clip.dim()});
    std::copy(clip.latents.data() + c * rows, clip.latents.data() + (c + 1) * rows, t.data());
    chunks.push_back(std::move(t));
    positions.push_back(static_cast<std::int64_t>(c * m));
  }
  return sequence_from_chunks(chunks, positions, clip.poses, m, grid,
                              static_cast<std::size_t>(clip.scenario));
}

ImportanceMatrix kv_importance(const Model& model, const SequenceInput& in, LayerRange layers) {
  in.validate(model.config().latent_dim);
  Tape tape;
  ForwardOutput fo = forward(tape, bind_parameters(tape, model), model.config(), in, nullptr, true);
  std::vector<std::size_t> rows;
  const std::size_t T = in.tokens_per_frame();
  for (std::size_t f = 0; f < in.frame_chunk.size(); ++f) {
    if (f == 0 || in.frame_chunk[f] != in.frame_chunk[f - 1]) rows.push_back(0);
    rows.back() += T;
  }
  return importance_from_attention(fo.attention, rows, layers);
}

double anchor_retrieval_score(const ImportanceMatrix& mat, const FrameGraph& graph) {
  const auto rec = graph.recoveries();
  if (rec.empty()) throw std::invalid_argument("anchor_retrieval_score: graph has no recovery nodes");
  const auto anchors = graph.anchors();
  const auto inter = graph.interruptions();
  double total = 0.0;
  for (std::size_t r : rec) {
    if (r >= mat.n) throw std::invalid_argument("anchor_retrieval_score: recovery chunk outside matrix");
    double s = 0.0;
    for (std::size_t a : anchors)
      if (a < mat.n && mat.ok(r, a)) s += mat.at(r, a);
    for (std::size_t k : inter)
      if (k < mat.n && mat.ok(r, k)) s -= mat.at(r, k);
    total += s;
  }
  return total / static_cast<double>(rec.size());
}

std::string to_string(TemporalScore t) {
  return t == TemporalScore::recency ? "recency" : "cache_order";
}

void ScoringScenario::validate() const {
  if (!(t_a <= t_c && t_c < t_q))
    throw std::invalid_argument("scenario: need t_a <= t_c < t_q");
  if (address_a != address_c) throw std::invalid_argument("scenario: anchor and corrupted addresses differ");
  if (address_q.size() != address_a.size()) throw std::invalid_argument("scenario: address sizes differ");
  const std::size_t d = anchor_content.size();
  if (d == 0 || corrupted_content.size() != d || query_content.size() != d || query_clean.size() != d)
    throw std::invalid_argument("scenario: content sizes differ");
  if (beta <= 0.0) throw std::invalid_argument("scenario: beta must be positive");
}

nlohmann::json ScoringScenario::to_json() const {
  return {{"t_a", t_a}, {"t_c", t_c}, {"t_q", t_q}, {"tau_deg", tau()},
          {"address_a", address_a}, {"address_c", address_c}, {"address_q", address_q},
          {"anchor_content", anchor_content}, {"corrupted_content", corrupted_content},
          {"query_content", query_content}, {"query_clean", query_clean},
          {"spatial_weight", spatial_weight}, {"beta", beta}, {"kappa", kappa},
          {"jitter", jitter}, {"seed", seed}};
}

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Zero vectors carry no content.
double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

CandidateScores pick(double sa, double sc, double t_a, double t_c) {
  CandidateScores out{sa, sc, sa == sc, ""};
  if (sa > sc) out.choice = "anchor";
  else if (sc > sa) out.choice = "corrupted";
  else out.choice = t_c < t_a ? "corrupted" : "anchor";
  return out;
}

}  // namespace

CandidateScores decoupled_scores(const ScoringScenario& s, TemporalScore temporal) {
  s.validate();
  auto phi_sp = [&](const std::vector<double>& addr) { return -s.spatial_weight * distance(s.address_q, addr); };
  double tmp_a, tmp_c;
  if (temporal == TemporalScore::recency) {
    tmp_a = -s.beta * (s.t_q - s.t_a);
    tmp_c = -s.beta * (s.t_q - s.t_c);
  } else {
    // compact slots: distinct times ranked in order, the query right after
    const double rank_a = 0.0;
    const double rank_c = s.t_c > s.t_a ? 1.0 : 0.0;
    const double rank_q = rank_c + 1.0;
    tmp_a = -s.beta * (rank_q - rank_a);
    tmp_c = -s.beta * (rank_q - rank_c);
  }
  const double cnt_a = s.kappa * cosine(s.query_content, s.anchor_content);
  const double cnt_c = s.kappa * cosine(s.query_content, s.corrupted_content);
  return pick(phi_sp(s.address_a) + tmp_a + cnt_a, phi_sp(s.address_c) + tmp_c + cnt_c, s.t_a, s.t_c);
}

CandidateScores joint_scores(const ScoringScenario& s) {
  s.validate();
  const double tau = s.tau();
  auto score = [&](const std::vector<double>& addr, double t, const std::vector<double>& content) {
    const double same = addr == s.address_q ? 1.0 : 0.0;
    const double clean = t < tau ? 1.0 : 0.0;
    return same * clean * cosine(content, s.query_clean);
  };
  return pick(score(s.address_a, s.t_a, s.anchor_content), score(s.address_c, s.t_c, s.corrupted_content),
              s.t_a, s.t_c);
}

bool SelectionReport::disagreement() const {
  return recency.choice == "corrupted" && cache_order.choice == "corrupted" && joint.choice == "anchor";
}

nlohmann::json SelectionReport::to_json() const {
  auto scores = [](const CandidateScores& c) {
    return nlohmann::json{{"anchor", c.anchor}, {"corrupted", c.corrupted}, {"tie", c.tie}, {"choice", c.choice}};
  };
  return {{"scenario_params", scenario_params},
          {"decoupled_choice", {{"recency", recency.choice}, {"cache_order", cache_order.choice}}},
          {"joint_choice", joint.choice},
          {"scores", {{"recency", scores(recency)}, {"cache_order", scores(cache_order)}, {"joint", scores(joint)}}},
          {"trials", {{"count", trials},
                      {"recency_selects_corrupted", recency_corrupted},
                      {"cache_order_selects_corrupted", cache_order_corrupted},
                      {"joint_selects_anchor", joint_anchor}}},
          {"disagreement", disagreement()}};
}

SelectionReport identifiability_sim(const ScoringScenario& s, std::size_t trials) {
  s.validate();
  SelectionReport rep;
  rep.scenario_params = s.to_json();
  rep.recency = decoupled_scores(s, TemporalScore::recency);
  rep.cache_order = decoupled_scores(s, TemporalScore::cache_order);
  rep.joint = joint_scores(s);
  rep.trials = trials;

  std::vector<ScoringScenario> variants(trials, s);
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t t = 1; t < trials; ++t) {
    for (double& v : variants[t].anchor_content) v += s.jitter * noise(rng);
    for (double& v : variants[t].corrupted_content) v += s.jitter * noise(rng);
  }
  std::vector<std::uint8_t> rc(trials), cc(trials), ja(trials);
#pragma omp parallel for schedule(static)
  for (std::size_t t = 0; t < trials; ++t) {
    rc[t] = decoupled_scores(variants[t], TemporalScore::recency).choice == "corrupted";
    cc[t] = decoupled_scores(variants[t], TemporalScore::cache_order).choice == "corrupted";
    ja[t] = joint_scores(variants[t]).choice == "anchor";
  }
  for (std::size_t t = 0; t < trials; ++t) {
    rep.recency_corrupted += rc[t];
    rep.cache_order_corrupted += cc[t];
    rep.joint_anchor += ja[t];
  }
  return rep;
}

void export_heatmap(const ImportanceMatrix& mat, const std::filesystem::path& stem, const std::string& note) {
  for (double v : mat.values)
    if (!std::isfinite(v)) throw std::invalid_argument("export_heatmap: matrix is not finite");
  const std::size_t n = mat.n;
  std::ostringstream csv;
  csv << "# importance n=" << n;
  if (!note.empty()) csv << ' ' << note;
  csv << '\n' << "query\\history";
  for (std::size_t j = 0; j < n; ++j) csv << ',' << j;
  csv << '\n' << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < n; ++i) {
    csv << i;
    for (std::size_t j = 0; j < n; ++j) {
      csv << ',';
      if (mat.ok(i, j)) csv << mat.at(i, j);
      else csv << "NA";
    }
    csv << '\n';
  }
  std::string pgm = "P5\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
  for (std::size_t e = 0; e < n * n; ++e) {
    const double v = mat.available[e] ? std::clamp(mat.values[e], 0.0, 1.0) : 0.0;
    pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  auto with_ext = [&](const char* ext) {
    std::filesystem::path p = stem;
    p += ext;
    return p;
  };
  write_file(with_ext(".csv"), csv.str());
  write_file(with_ext(".pgm"), pgm);
}

ImportanceMatrix read_heatmap_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) { header = false; continue; }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  ImportanceMatrix mat;
  mat.n = rows.size();
  mat.values.assign(mat.n * mat.n, 0.0);
  mat.available.assign(mat.n * mat.n, 0);
  for (std::size_t i = 0; i < mat.n; ++i) {
    if (rows[i].size() != mat.n + 1)
      throw std::runtime_error("heatmap csv: row " + std::to_string(i) + " has " +
                               std::to_string(rows[i].size()) + " cells");
    for (std::size_t j = 0; j < mat.n; ++j) {
      const std::string& c = rows[i][j + 1];
      if (c == "NA") continue;
      mat.values[i * mat.n + j] = std::stod(c);
      mat.available[i * mat.n + j] = 1;
    }
  }
  return mat;
}

}  // namespace remind
