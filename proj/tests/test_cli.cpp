#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "remind/commands.hpp"
#include "remind/container.hpp"

using namespace remind;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "remind_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny() {
  RunConfig c = parse_config(R"(
seed = 7
model.heads = 2
model.head_dim = 8
model.token_dim = 8
model.mlp_ratio = 2
model.phase_hidden = 6
model.sampler_steps = 3
data.clips = 3
data.grid = 2
data.latent_dim = 8
data.occlusion_prob = 1
data.scenario_mix = filling_bar:1
optim.iterations = 3
optim.batch = 2
eval.clips = 2
diag.trials = 10
)");
  c.validate();
  return c;
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config defaults, parsing and overrides") {
  RunConfig d;
  CHECK_NOTHROW(d.validate());
  for (const auto& key : config_keys()) CHECK(d.entries().count(key) == 1);

  RunConfig again = parse_config(d.to_text());
  CHECK(again.to_text() == d.to_text());
  CHECK(again.hash() == d.hash());

  RunConfig c = parse_config("# comment\nmodel.mode = qk_only  # trailing\noptim.lr=0.01\n");
  CHECK(c.model.mode == AttentionMode::qk_only);
  CHECK(c.optim.lr == 0.01);
  c.apply_override("model.mode=dual");
  CHECK(c.model.mode == AttentionMode::dual);
  CHECK(c.hash() != d.hash());

  c.apply_override("curriculum.regime_weights = all_history:1");
  CHECK(c.curriculum.regime_weights == std::vector<double>{1, 0, 0, 0, 0});
  c.apply_override("data.latent_dim=24");
  CHECK(c.model.latent_dim == 24);

  CHECK_THROWS_WITH(parse_config("model.colour = red\n"), doctest::Contains("model.colour"));
  CHECK_THROWS_WITH(c.apply_override("optim.lr=fast"), doctest::Contains("optim.lr"));
  CHECK_THROWS(c.apply_override("optim.lr"));
  CHECK_THROWS(parse_config("data.scenario_mix = forest:1\n"));
  CHECK_THROWS(parse_config("seed\n"));

  RunConfig bad;
  bad.data.window_start = 5;
  CHECK_THROWS(bad.validate());

  nlohmann::json p = provenance(d);
  CHECK(p["version"] == kVersion);
  CHECK(p["config_hash"].get<std::string>().size() == 8);
}

TEST_CASE("gen-data") {
  auto dir = scratch("gen");
  RunConfig c = tiny();
  c.data.clips = 1;
  cmd_gen_data(c, dir / "a.rmds");
  cmd_gen_data(c, dir / "b.rmds");
  CHECK(read_file(dir / "a.rmds") == read_file(dir / "b.rmds"));

  c.data.clips = 6;
  cmd_gen_data(c, dir / "mix.rmds");
  Dataset ds = read_dataset(dir / "mix.rmds");
  REQUIRE(ds.clips.size() == 6);
  for (const auto& clip : ds.clips) {
    CHECK(clip.scenario == Scenario::filling_bar);
    CHECK_FALSE(clip.graph.interruptions().empty());
    CHECK(clip.graph.anchors() == std::vector<std::size_t>{1});
  }

  // every header graph carries interruption nodes at occlusion probability 1
  c.data.scenario_mix = {{Scenario::filling_bar, 1.0}, {Scenario::moving_dot, 1.0}, {Scenario::pan_loop_scene, 1.0}};
  c.data.clips = 12;
  cmd_gen_data(c, dir / "all.rmds");
  Container raw = read_container(dir / "all.rmds");
  for (const auto& rec : raw.header["clips"]) {
    bool inter = false;
    for (const auto& n : rec["graph"]["nodes"]) inter |= n["role"] == "interruption";
    CHECK(inter);
  }

  // round trip: everything survives apart from the f32 rounding of latents
  std::vector<SyntheticClip> direct = generate_clips(c.data, c.seed, 12);
  Dataset back = read_dataset(dir / "all.rmds");
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(back.clips[i].scenario == direct[i].scenario);
    CHECK(back.clips[i].state == direct[i].state);
    CHECK(back.clips[i].graph.recoveries() == direct[i].graph.recoveries());
    double worst = 0.0;
    for (std::size_t e = 0; e < direct[i].latents.size(); ++e)
      worst = std::max(worst, std::abs(back.clips[i].latents[e] - direct[i].latents[e]));
    CHECK(worst < 1e-6);
  }

  SUBCASE("corruption is rejected") {
    std::string bytes = read_file(dir / "all.rmds");
    bytes[bytes.size() - 5] ^= 0x40;
    write_file(dir / "bad.rmds", bytes);
    CHECK_THROWS(read_dataset(dir / "bad.rmds"));
  }
  CHECK_THROWS(cmd_gen_data(c, "/proc/remind_nowhere/d.rmds"));
}

TEST_CASE("train") {
  auto dir = scratch("train");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "d.rmds");

  SUBCASE("zero iterations saves the initialization") {
    c.train.iterations = 0;
    cmd_train(c, dir / "d.rmds", dir / "zero");
    TrainState st = load_checkpoint(dir / "zero" / "checkpoint.rmck", c.model);
    Model init(c.model, c.seed);
    for (std::size_t k = 0; k < init.params().size(); ++k)
      CHECK(st.model.params()[k].storage() == init.params()[k].storage());
    CHECK(lines(dir / "zero" / "metrics.jsonl").size() == 1);
  }
  SUBCASE("regime field is constant under a single regime") {
    c.apply_override("curriculum.regime_weights=all_history:1");
    cmd_train(c, dir / "d.rmds", dir / "one");
    auto log = lines(dir / "one" / "metrics.jsonl");
    REQUIRE(log.size() == 4);
    CHECK(nlohmann::json::parse(log[0]).contains("provenance"));
    for (std::size_t i = 1; i < log.size(); ++i) {
      auto j = nlohmann::json::parse(log[i]);
      CHECK(j["regime"] == "all_history,all_history");
      for (const char* k : {"iter", "flow", "delta", "lambda", "total"}) CHECK(j.contains(k));
    }
  }
  SUBCASE("repeat runs are byte-identical") {
    c.train.checkpoint_every = 2;
    cmd_train(c, dir / "d.rmds", dir / "r1");
    cmd_train(c, dir / "d.rmds", dir / "r2");
    for (const char* f : {"metrics.jsonl", "summary.json", "checkpoint.rmck", "checkpoint_2.rmck"})
      CHECK(read_file(dir / "r1" / f) == read_file(dir / "r2" / f));
  }
  SUBCASE("dataset/config mismatch") {
    RunConfig other = c;
    other.data.world.grid = 4;
    CHECK_THROWS_WITH(cmd_train(other, dir / "d.rmds", dir / "x"), doctest::Contains("mismatch"));
  }
  CHECK_THROWS(cmd_train(c, dir / "missing.rmds", dir / "x"));
}

TEST_CASE("rollout") {
  auto dir = scratch("rollout");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "d.rmds");
  c.train.iterations = 0;
  cmd_train(c, dir / "d.rmds", dir / "run");
  const fs::path ck = dir / "run" / "checkpoint.rmck";
  Dataset ds = read_dataset(dir / "d.rmds");

  SUBCASE("v2v with nothing to generate echoes the prefix") {
    c.eval.prefix_chunks = 7;
    auto rep = cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::v2v, 0, dir / "v0");
    REQUIRE(rep["chunks"].size() == 7);
    Container gen = read_container(dir / "v0" / "generated.rmds");
    const Tensor& lat = ds.clips[0].latents;
    REQUIRE(gen.payload.size() == lat.size());
    for (std::size_t e = 0; e < lat.size(); ++e) CHECK(gen.payload[e] == static_cast<float>(lat[e]));
    for (const auto& ch : rep["chunks"]) CHECK_FALSE(ch["generated"].get<bool>());
  }
  SUBCASE("refcache target starts at G*m") {
    c.eval.gap_chunks = 4;
    auto rep = cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::refcache, 1, dir / "ref");
    CHECK(rep["first_target_position"] == 12);
    CHECK(rep["chunks"][0]["position"] == 12);
    CHECK(rep["chunks"].back()["position"] == 18);
  }
  SUBCASE("i2v reports decoded fill per chunk") {
    auto rep = cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::i2v, 2, dir / "i2v");
    REQUIRE(rep["chunks"].size() == 7);
    CHECK(rep["chunks"][0]["abs_error"].get<double>() < 1e-6);
    for (const auto& ch : rep["chunks"]) CHECK(ch["decoded"].size() == 3);
    CHECK(rep["recovery"]["chunk"] == 5);
    auto again = cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::i2v, 2, dir / "i2v_again");
    CHECK(read_file(dir / "i2v" / "generated.rmds") == read_file(dir / "i2v_again" / "generated.rmds"));
    CHECK(read_file(dir / "i2v" / "report.json") == read_file(dir / "i2v_again" / "report.json"));
  }
  SUBCASE("errors") {
    c.eval.prefix_chunks = 8;
    CHECK_THROWS_WITH(cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::v2v, 0, dir / "e"), doctest::Contains("prefix"));
    c.eval.prefix_chunks = 2;
    CHECK_THROWS(cmd_rollout(c, ck, dir / "d.rmds", RolloutMode::v2v, 9, dir / "e"));
    CHECK_THROWS(cmd_rollout(c, dir / "nope.rmck", dir / "d.rmds", RolloutMode::v2v, 0, dir / "e"));
    CHECK_THROWS(parse_rollout_mode("t2v"));
  }
}

TEST_CASE("diagnose") {
  auto dir = scratch("diagnose");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "d.rmds");
  c.train.iterations = 0;
  cmd_train(c, dir / "d.rmds", dir / "run");
  const fs::path ck = dir / "run" / "checkpoint.rmck";

  auto out = cmd_diagnose(c, ck, dir / "d.rmds", 0, dir / "diag", true);
  CHECK(fs::exists(dir / "diag" / "importance.csv"));
  CHECK(fs::exists(dir / "diag" / "importance.pgm"));
  CHECK(out["anchor_retrieval_score"].is_number());
  // untrained: rows close to the uniform split
  CHECK(out["max_uniform_deviation"].get<double>() < 0.2);
  ImportanceMatrix back = read_heatmap_csv(dir / "diag" / "importance.csv");
  CHECK(back.n == 7);

  auto ident = nlohmann::json::parse(read_file(dir / "diag" / "identifiability.json"));
  CHECK(ident["decoupled_choice"]["recency"] == "corrupted");
  CHECK(ident["decoupled_choice"]["cache_order"] == "corrupted");
  CHECK(ident["joint_choice"] == "anchor");

  cmd_diagnose(c, ck, dir / "d.rmds", 0, dir / "diag2", true);
  CHECK(read_file(dir / "diag" / "identifiability.json") == read_file(dir / "diag2" / "identifiability.json"));
  CHECK_THROWS_WITH(cmd_diagnose(c, ck, dir / "d.rmds", 99, dir / "e", false), doctest::Contains("missing clip"));
}

TEST_CASE("ablate") {
  auto dir = scratch("ablate");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "d.rmds");
  c.train.iterations = 2;

  c.apply_override("ablate.modes=full");
  cmd_ablate(c, dir / "d.rmds", dir / "one");
  CHECK(lines(dir / "one" / "ablation.csv").size() == 2);

  c.apply_override("ablate.modes=full,qk_only,vo_only,dual");
  auto table = cmd_ablate(c, dir / "d.rmds", dir / "a");
  cmd_ablate(c, dir / "d.rmds", dir / "b");
  CHECK(read_file(dir / "a" / "ablation.csv") == read_file(dir / "b" / "ablation.csv"));
  auto rows = lines(dir / "a" / "ablation.csv");
  REQUIRE(rows.size() == 5);
  CHECK(rows[1].rfind("full,", 0) == 0);
  CHECK(rows[4].rfind("dual,", 0) == 0);
  CHECK(table["rows"][0]["clips"] == 2);

  c.ablate_parallel = true;
  cmd_ablate(c, dir / "d.rmds", dir / "p");
  CHECK(read_file(dir / "a" / "ablation.csv") == read_file(dir / "p" / "ablation.csv"));
}
