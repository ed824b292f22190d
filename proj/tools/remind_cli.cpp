#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "remind/commands.hpp"
#include "remind/container.hpp"

using namespace remind;

int main(int argc, char** argv) {
  CLI::App app{"remind: dynamic-memory video world model at desk scale"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "override a config key, key=value")->take_all();

  auto load = [&] {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    cfg.validate();
    return cfg;
  };

  auto* show = app.add_subcommand("config", "print the effective config");

  std::string out_path;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("-o,--out", out_path, "dataset file")->required();

  std::string data_path, out_dir, checkpoint, mode_name = "v2v";
  std::size_t clip_id = 0;
  bool ident = false;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("-d,--data", data_path, "dataset file")->required();
  train->add_option("-o,--out", out_dir, "run directory")->required();

  auto* roll = app.add_subcommand("rollout", "generate from a dataset clip");
  roll->add_option("-k,--checkpoint", checkpoint)->required();
  roll->add_option("-d,--data", data_path)->required();
  roll->add_option("-m,--mode", mode_name, "i2v | v2v | refcache")
      ->check(CLI::IsMember({"i2v", "v2v", "refcache"}));
  roll->add_option("--clip", clip_id);
  roll->add_option("-o,--out", out_dir)->required();

  auto* diag = app.add_subcommand("diagnose", "KV-importance heatmap and anchor score");
  diag->add_option("-k,--checkpoint", checkpoint)->required();
  diag->add_option("-d,--data", data_path)->required();
  diag->add_option("--clip", clip_id);
  diag->add_option("-o,--out", out_dir)->required();
  diag->add_flag("--identifiability", ident, "also write the decoupled vs joint selection report");

  auto* abl = app.add_subcommand("ablate", "train and score every attention mode");
  abl->add_option("-d,--data", data_path)->required();
  abl->add_option("-o,--out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = load();
    nlohmann::json result;
    if (*show) {
      std::cout << cfg.to_text();
      return 0;
    } else if (*gen) {
      result = cmd_gen_data(cfg, out_path);
    } else if (*train) {
      result = cmd_train(cfg, data_path, out_dir);
    } else if (*roll) {
      result = cmd_rollout(cfg, checkpoint, data_path, parse_rollout_mode(mode_name), clip_id, out_dir);
    } else if (*diag) {
      result = cmd_diagnose(cfg, checkpoint, data_path, clip_id, out_dir, ident);
    } else if (*abl) {
      result = cmd_ablate(cfg, data_path, out_dir);
      std::cout << read_file(fs::path(out_dir) / "ablation.csv");
    }
    std::cout << result.dump(2) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
