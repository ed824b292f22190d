#include "remind/run_config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

#include "remind/container.hpp"

namespace remind {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return out;
}

std::int64_t to_i64(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: " + key + " expects true or false, got '" + v + "'");
}

// "a:1,b:2"
std::vector<std::pair<std::string, double>> weight_list(const std::string& key, const std::string& v) {
  std::vector<std::pair<std::string, double>> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) out.emplace_back(item, 1.0);
    else out.emplace_back(trim(item.substr(0, colon)), to_double(key, trim(item.substr(colon + 1))));
  }
  if (out.empty()) throw std::invalid_argument("config: " + key + " is empty");
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field size_field(T RunConfig::*section, std::size_t T::*member) {
  return {[=](const RunConfig& c) { return std::to_string(c.*section.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*section.*member = to_u64(k, v); }};
}

template <class T>
Field double_field(T RunConfig::*section, double T::*member) {
  return {[=](const RunConfig& c) { return fmt(c.*section.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*section.*member = to_double(k, v); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.push_back({"seed", {[](const RunConfig& c) { return std::to_string(c.seed); },
                          [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }}});

    t.push_back({"model.layers", size_field(&RunConfig::model, &ModelConfig::layers)});
    t.push_back({"model.heads", size_field(&RunConfig::model, &ModelConfig::heads)});
    t.push_back({"model.head_dim", size_field(&RunConfig::model, &ModelConfig::head_dim)});
    t.push_back({"model.token_dim", size_field(&RunConfig::model, &ModelConfig::token_dim)});
    t.push_back({"model.mlp_ratio", size_field(&RunConfig::model, &ModelConfig::mlp_ratio)});
    t.push_back({"model.mode", {[](const RunConfig& c) { return to_string(c.model.mode); },
                                [](RunConfig& c, const std::string&, const std::string& v) {
                                  c.model.mode = parse_attention_mode(v);
                                }}});
    t.push_back({"model.delta_all_bands",
                 {[](const RunConfig& c) { return std::string(c.model.delta_all_bands ? "true" : "false"); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.model.delta_all_bands = to_bool(k, v); }}});
    t.push_back({"model.phase_hidden", size_field(&RunConfig::model, &ModelConfig::phase_hidden)});
    t.push_back({"model.rope_base", double_field(&RunConfig::model, &ModelConfig::rope_base)});
    t.push_back({"model.sampler_steps", size_field(&RunConfig::model, &ModelConfig::sampler_steps)});

    t.push_back({"data.clips", size_field(&RunConfig::data, &DataConfig::clips)});
    t.push_back({"data.chunks", size_field(&RunConfig::data, &DataConfig::chunks)});
    t.push_back({"data.grid", {[](const RunConfig& c) { return std::to_string(c.data.world.grid); },
                               [](RunConfig& c, const std::string& k, const std::string& v) { c.data.world.grid = to_u64(k, v); }}});
    t.push_back({"data.latent_dim",
                 {[](const RunConfig& c) { return std::to_string(c.data.world.latent_dim); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data.world.latent_dim = to_u64(k, v);
                    c.model.latent_dim = c.data.world.latent_dim;
                  }}});
    t.push_back({"data.frames_per_chunk",
                 {[](const RunConfig& c) { return std::to_string(c.data.world.frames_per_chunk); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data.world.frames_per_chunk = to_u64(k, v);
                  }}});
    auto world_double = [](double WorldConfig::*m) {
      return Field{[=](const RunConfig& c) { return fmt(c.data.world.*m); },
                   [=](RunConfig& c, const std::string& k, const std::string& v) { c.data.world.*m = to_double(k, v); }};
    };
    t.push_back({"data.rate_min", world_double(&WorldConfig::rate_min)});
    t.push_back({"data.rate_max", world_double(&WorldConfig::rate_max)});
    t.push_back({"data.speed_min", world_double(&WorldConfig::speed_min)});
    t.push_back({"data.speed_max", world_double(&WorldConfig::speed_max)});
    t.push_back({"data.scenario_mix",
                 {[](const RunConfig& c) {
                    std::string s;
                    for (const auto& [sc, w] : c.data.scenario_mix)
                      s += (s.empty() ? "" : ",") + to_string(sc) + ":" + fmt(w);
                    return s;
                  },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data.scenario_mix.clear();
                    for (const auto& [name, w] : weight_list(k, v)) c.data.scenario_mix[parse_scenario(name)] = w;
                  }}});
    t.push_back({"data.occlusion_prob", double_field(&RunConfig::data, &DataConfig::occlusion_prob)});
    t.push_back({"data.interruption",
                 {[](const RunConfig& c) { return to_string(c.data.interruption); },
                  [](RunConfig& c, const std::string&, const std::string& v) {
                    c.data.interruption = parse_interruption_kind(v);
                  }}});
    t.push_back({"data.window_start", size_field(&RunConfig::data, &DataConfig::window_start)});
    t.push_back({"data.window_chunks", size_field(&RunConfig::data, &DataConfig::window_chunks)});
    t.push_back({"data.magnitude", double_field(&RunConfig::data, &DataConfig::magnitude)});

    t.push_back({"curriculum.sigma_min", double_field(&RunConfig::curriculum, &CurriculumConfig::sigma_min)});
    t.push_back({"curriculum.sigma_max", double_field(&RunConfig::curriculum, &CurriculumConfig::sigma_max)});
    t.push_back({"curriculum.noisy_min", double_field(&RunConfig::curriculum, &CurriculumConfig::noisy_min)});
    t.push_back({"curriculum.noisy_max", double_field(&RunConfig::curriculum, &CurriculumConfig::noisy_max)});
    auto gap = [](std::int64_t CurriculumConfig::*m) {
      return Field{[=](const RunConfig& c) { return std::to_string(c.curriculum.*m); },
                   [=](RunConfig& c, const std::string& k, const std::string& v) { c.curriculum.*m = to_i64(k, v); }};
    };
    t.push_back({"curriculum.gap_min", gap(&CurriculumConfig::gap_min)});
    t.push_back({"curriculum.gap_max", gap(&CurriculumConfig::gap_max)});
    t.push_back({"curriculum.alpha", double_field(&RunConfig::curriculum, &CurriculumConfig::alpha)});
    t.push_back({"curriculum.gamma", double_field(&RunConfig::curriculum, &CurriculumConfig::gamma)});
    t.push_back({"curriculum.warmup", size_field(&RunConfig::curriculum, &CurriculumConfig::warmup)});
    t.push_back({"curriculum.regime_weights",
                 {[](const RunConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < kRegimeCount; ++i)
                      s += (i ? "," : "") + to_string(static_cast<Regime>(i)) + ":" + fmt(c.curriculum.regime_weights[i]);
                    return s;
                  },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    std::vector<double> w(kRegimeCount, 0.0);
                    for (const auto& [name, x] : weight_list(k, v)) w[static_cast<std::size_t>(parse_regime(name))] = x;
                    c.curriculum.regime_weights = w;
                  }}});

    t.push_back({"optim.lr", double_field(&RunConfig::optim, &OptimConfig::lr)});
    t.push_back({"optim.beta1", double_field(&RunConfig::optim, &OptimConfig::beta1)});
    t.push_back({"optim.beta2", double_field(&RunConfig::optim, &OptimConfig::beta2)});
    t.push_back({"optim.eps", double_field(&RunConfig::optim, &OptimConfig::eps)});
    t.push_back({"optim.weight_decay", double_field(&RunConfig::optim, &OptimConfig::weight_decay)});
    t.push_back({"optim.iterations", size_field(&RunConfig::train, &TrainConfig::iterations)});
    t.push_back({"optim.batch", size_field(&RunConfig::train, &TrainConfig::batch)});
    t.push_back({"optim.checkpoint_every", size_field(&RunConfig::train, &TrainConfig::checkpoint_every)});

    t.push_back({"diag.layer_first",
                 {[](const RunConfig& c) { return std::to_string(c.diag.layers.first); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.diag.layers.first = to_u64(k, v); }}});
    t.push_back({"diag.layer_last",
                 {[](const RunConfig& c) {
                    return c.diag.layers.last == LayerRange{}.last ? std::string("-1") : std::to_string(c.diag.layers.last);
                  },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    const std::int64_t x = to_i64(k, v);
                    c.diag.layers.last = x < 0 ? LayerRange{}.last : static_cast<std::size_t>(x);
                  }}});
    t.push_back({"diag.trials", size_field(&RunConfig::diag, &DiagConfig::trials)});
    t.push_back({"diag.beta", double_field(&RunConfig::diag, &DiagConfig::beta)});
    t.push_back({"diag.kappa", double_field(&RunConfig::diag, &DiagConfig::kappa)});

    t.push_back({"eval.clips", size_field(&RunConfig::eval, &EvalConfig::clips)});
    t.push_back({"eval.seed_offset",
                 {[](const RunConfig& c) { return std::to_string(c.eval.seed_offset); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.seed_offset = to_u64(k, v); }}});
    t.push_back({"eval.prefix_chunks", size_field(&RunConfig::eval, &EvalConfig::prefix_chunks)});
    t.push_back({"eval.gap_chunks",
                 {[](const RunConfig& c) { return std::to_string(c.eval.gap_chunks); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.gap_chunks = to_i64(k, v); }}});
    t.push_back({"eval.reference_chunks", size_field(&RunConfig::eval, &EvalConfig::reference_chunks)});

    t.push_back({"ablate.modes",
                 {[](const RunConfig& c) {
                    std::string s;
                    for (auto m : c.ablate_modes) s += (s.empty() ? "" : ",") + to_string(m);
                    return s;
                  },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.ablate_modes.clear();
                    for (const auto& [name, w] : weight_list(k, v)) c.ablate_modes.push_back(parse_attention_mode(name));
                  }}});
    t.push_back({"ablate.parallel",
                 {[](const RunConfig& c) { return std::string(c.ablate_parallel ? "true" : "false"); },
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.ablate_parallel = to_bool(k, v); }}});
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& [name, f] : fields())
    if (name == key) {
      f.set(*this, key, trim(value));
      return;
    }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("config: override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  model.validate();
  data.world.validate();
  curriculum.validate();
  optim.validate();
  if (model.latent_dim != data.world.latent_dim) throw std::invalid_argument("config: model and data latent_dim differ");
  if (data.chunks < 2) throw std::invalid_argument("config: data.chunks must be >= 2");
  if (!(data.occlusion_prob >= 0.0 && data.occlusion_prob <= 1.0))
    throw std::invalid_argument("config: data.occlusion_prob outside [0, 1]");
  if (!(data.magnitude >= 0.0 && data.magnitude <= 1.0))
    throw std::invalid_argument("config: data.magnitude outside [0, 1]");
  if (data.window_chunks == 0 || data.window_start == 0 || data.window_start + data.window_chunks >= data.chunks)
    throw std::invalid_argument("config: interruption window must leave a clean chunk on both sides");
  double mix = 0.0;
  for (const auto& [s, w] : data.scenario_mix) {
    if (w < 0.0) throw std::invalid_argument("config: negative scenario weight");
    mix += w;
  }
  if (mix <= 0.0) throw std::invalid_argument("config: scenario_mix has no positive weight");
  if (train.batch == 0) throw std::invalid_argument("config: optim.batch must be >= 1");
  if (eval.prefix_chunks == 0) throw std::invalid_argument("config: eval.prefix_chunks must be >= 1");
  if (eval.reference_chunks == 0) throw std::invalid_argument("config: eval.reference_chunks must be >= 1");
  if (ablate_modes.empty()) throw std::invalid_argument("config: ablate.modes is empty");
}

std::map<std::string, std::string> RunConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [name, f] : fields()) out[name] = f.get(*this);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  std::string section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const std::string s = dot == std::string::npos ? "" : name.substr(0, dot);
    if (s != section && !out.empty()) out += '\n';
    section = s;
    out += name + " = " + f.get(*this) + '\n';
  }
  return out;
}

std::uint32_t RunConfig::hash() const {
  const std::string t = to_text();
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.size())));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [name, f] : fields()) out.push_back(name);
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key = value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

nlohmann::json provenance(const RunConfig& cfg) {
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08x", cfg.hash());
  return {{"config_hash", hex}, {"seed", cfg.seed}, {"version", kVersion}};
}

}  // namespace remind
