// Command-line driver: dataset generation, training, separation, evaluation,
// cost accounting, and the gradient/oracle self-test suite.
//
// Exit codes: 0 success, 1 usage error, 2 runtime/data error, 3 self-test
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vsep/cost.hpp"
#include "vsep/data.hpp"
#include "vsep/selftest.hpp"
#include "vsep/train.hpp"

namespace {

namespace fs = std::filesystem;

nlohmann::json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw vsep::IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw vsep::IoError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void print_resolved(const std::string& command, const nlohmann::json& cfg) {
  nlohmann::json out;
  out["command"] = command;
  out["config"] = cfg;
  std::cout << out.dump(2) << "\n";
}

struct TrainArgs {
  std::string config_path;
  std::string manifest;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> alpha_slow, alpha_fast, sources;
  std::optional<std::string> ordering;
};

vsep::TrainConfig resolve_train_config(const TrainArgs& a) {
  vsep::TrainConfig cfg;
  if (!a.config_path.empty()) {
    cfg = vsep::train_config_from_json(load_json(a.config_path),
                                       fs::path(a.config_path).parent_path().string());
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.alpha_slow) cfg.model.slow_alpha = *a.alpha_slow;
  if (a.alpha_fast) cfg.model.fast_alpha = *a.alpha_fast;
  if (a.ordering) cfg.model.ordering = *a.ordering;
  if (a.sources) cfg.n_sources = *a.sources;
  cfg.validate();
  return cfg;
}

int run_gen_data(const std::string& out_dir, const std::string& config_path, std::uint64_t seed,
                 int workers) {
  vsep::DataConfig cfg;
  if (!config_path.empty()) cfg = vsep::data_config_from_json(load_json(config_path));
  nlohmann::json resolved = vsep::data_config_to_json(cfg);
  resolved["seed"] = seed;
  resolved["out"] = out_dir;
  resolved["workers"] = workers;
  print_resolved("gen-data", resolved);
  auto data = vsep::Dataset::generate(cfg, seed, out_dir, workers);
  std::cout << "wrote " << data.items().size() << " items under " << out_dir << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  auto cfg = resolve_train_config(a);
  nlohmann::json resolved = vsep::train_config_to_json(cfg);
  resolved["manifest"] = a.manifest;
  resolved["out"] = a.out_dir;
  print_resolved("train", resolved);
  auto data = vsep::Dataset::load(a.manifest);
  auto result = vsep::train(cfg, data, a.out_dir);
  std::cout << "trained " << cfg.steps << " steps; checkpoint at " << result.checkpoint_path
            << "\n";
  if (!result.logs.empty()) {
    const auto& last = result.logs.back();
    std::cout << "final losses: l_sep " << last.l_sep << " l_e " << last.l_e << " l_M "
              << last.l_m << " total " << last.total << "\n";
  }
  return 0;
}

int run_evaluate(const TrainArgs& a, const std::string& checkpoint, const std::string& out_path) {
  auto cfg = resolve_train_config(a);
  nlohmann::json resolved = vsep::train_config_to_json(cfg);
  resolved["manifest"] = a.manifest;
  resolved["checkpoint"] = checkpoint;
  resolved["out"] = out_path;
  print_resolved("evaluate", resolved);
  auto data = vsep::Dataset::load(a.manifest);
  vsep::SlowFastModel model(cfg.model, cfg.seed);
  vsep::load_checkpoint(model.graph(), checkpoint);
  auto report = vsep::evaluate(model, data, cfg);
  auto j = vsep::eval_report_to_json(report);
  if (out_path.empty() || out_path == "-") {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw vsep::IoError("cannot write report: " + out_path);
    f << j.dump(2) << "\n";
    std::cout << "mean SDR " << report.model_summary.mean_sdr << " dB (copy-paste "
              << report.baseline_summary.mean_sdr << " dB); report at " << out_path << "\n";
  }
  return 0;
}

int run_separate(const TrainArgs& a, const std::string& checkpoint, const std::string& mixture,
                 const std::vector<std::string>& images, const std::string& out_dir) {
  auto cfg = resolve_train_config(a);
  nlohmann::json resolved = vsep::train_config_to_json(cfg);
  resolved["checkpoint"] = checkpoint;
  resolved["mixture"] = mixture;
  resolved["images"] = images;
  resolved["out"] = out_dir;
  print_resolved("separate", resolved);

  auto data_cfg_images = images;  // one output set per visual frame
  vsep::SlowFastModel model(cfg.model, cfg.seed);
  vsep::load_checkpoint(model.graph(), checkpoint);
  vsep::ad::NoGradGuard no_grad(model.graph());

  auto wav = vsep::load_wav(mixture);
  auto spec = vsep::stft(wav, cfg.stft.window_len, cfg.stft.hop_len);
  auto mix_mag = vsep::spectrogram_tensor(vsep::magnitude(spec));
  fs::create_directories(out_dir);

  // All frames go through one batched pass; normalization statistics pool
  // over the sources, matching how the model was trained.
  const int n = static_cast<int>(data_cfg_images.size());
  auto frames = vsep::ad::make_tensor({n, 3, cfg.model.image_size, cfg.model.image_size});
  std::int64_t off = 0;
  for (const auto& path : data_cfg_images) {
    auto one = vsep::image_tensor(vsep::load_ppm(path), cfg.model.image_size);
    std::copy(one->data.begin(), one->data.end(), frames->data.begin() + off);
    off += one->numel();
  }
  auto fwd = model.forward_sources(mix_mag, frames, false);
  const auto& mask_b = fwd.final_output().mask;
  const std::int64_t plane = static_cast<std::int64_t>(mask_b->dim(2)) * mask_b->dim(3);

  for (int i = 0; i < n; ++i) {
    vsep::RealGrid mask(mask_b->dim(2), mask_b->dim(3));
    std::copy_n(mask_b->data.begin() + i * plane, plane, mask.v.begin());
    auto est = vsep::istft(vsep::apply_mask(mask, spec));
    const auto tag = std::to_string(i);
    vsep::save_wav(est, (fs::path(out_dir) / ("source-" + tag + ".wav")).string());
    vsep::save_pgm(mask, (fs::path(out_dir) / ("mask-" + tag + ".pgm")).string());
    auto e_i = vsep::ad::narrow(model.graph(), fwd.vf.embedding, i, 1);
    auto f_i = vsep::ad::narrow(model.graph(), fwd.vf.fmap, i, 1);
    auto loc = vsep::localization_map(model.graph(), e_i, f_i);
    vsep::RealGrid loc_grid(loc.map->dim(0), loc.map->dim(1));
    loc_grid.v = loc.map->data;
    vsep::save_pgm(loc_grid, (fs::path(out_dir) / ("localization-" + tag + ".pgm")).string());
    std::cout << "source " << i << ": wrote wav/mask/localization under " << out_dir << "\n";
  }
  return 0;
}

int run_cost(const std::vector<std::string>& config_paths, int spec_h, int spec_w,
             const std::string& out_path) {
  std::vector<vsep::ModelConfig> cfgs;
  for (const auto& p : config_paths) cfgs.push_back(vsep::model_config_from_json(load_json(p)));
  nlohmann::json resolved;
  resolved["configs"] = config_paths;
  resolved["spec_height"] = spec_h;
  resolved["spec_width"] = spec_w;
  print_resolved("cost", resolved);
  auto table = vsep::cost_table(cfgs, spec_h, spec_w);
  std::cout << vsep::format_cost_table(table);
  if (table.entries.size() > 1) {
    std::cout << "params constant across configs: " << (table.params_constant ? "yes" : "no")
              << "\n";
    std::cout << "macs strictly decreasing: " << (table.macs_strictly_decreasing ? "yes" : "no")
              << "\n";
  }
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw vsep::IoError("cannot write cost report: " + out_path);
    f << vsep::cost_table_to_json(table).dump(2) << "\n";
  }
  return 0;
}

int run_check(std::uint64_t seed) {
  print_resolved("check", {{"seed", seed}});
  auto results = vsep::selftest::run_all(seed);
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "ok   " : "FAIL ") << r.name << ": " << r.detail << "\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << (all_pass ? "self-test passed" : "self-test FAILED") << "\n";
  return all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visually guided slow/fast spectrogram source separation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  std::string gen_out, gen_config;
  std::uint64_t gen_seed = 1;
  int gen_workers = 1;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--config", gen_config, "data config JSON");
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--workers", gen_workers, "parallel generation workers")
      ->check(CLI::Range(1, 64));

  // train
  auto* tr = app.add_subcommand("train", "run the optimization loop");
  TrainArgs train_args;
  std::uint64_t opt_seed = 0;
  int opt_as = 0, opt_af = 0, opt_n = 0;
  std::string opt_ordering;
  auto add_shared = [&](CLI::App* cmd, TrainArgs& args, bool manifest_required) {
    cmd->add_option("--config", args.config_path, "train config JSON");
    auto* m = cmd->add_option("--manifest", args.manifest, "dataset manifest JSON");
    if (manifest_required) m->required();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&args](std::uint64_t v) { args.seed = v; }, "seed override");
    cmd->add_option_function<int>(
        "--alpha-slow", [&args](int v) { args.alpha_slow = v; }, "slow stream alpha override");
    cmd->add_option_function<int>(
        "--alpha-fast", [&args](int v) { args.alpha_fast = v; }, "fast stream alpha override");
    cmd->add_option_function<std::string>(
           "--ordering", [&args](const std::string& v) { args.ordering = v; },
           "stream ordering override")
        ->check(CLI::IsMember({"slow-first", "fast-first"}));
    cmd->add_option_function<int>(
        "--sources", [&args](int v) { args.sources = v; }, "sources per mixture override");
  };
  add_shared(tr, train_args, true);
  tr->add_option("--out", train_args.out_dir, "output directory for checkpoints and logs")
      ->required();
  (void)opt_seed;
  (void)opt_as;
  (void)opt_af;
  (void)opt_n;
  (void)opt_ordering;

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the test split");
  TrainArgs eval_args;
  std::string eval_checkpoint, eval_out;
  add_shared(ev, eval_args, true);
  ev->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  ev->add_option("--out", eval_out, "report JSON path ('-' for stdout)");

  // separate
  auto* sep = app.add_subcommand("separate", "separate a mixture with a trained checkpoint");
  TrainArgs sep_args;
  std::string sep_checkpoint, sep_mixture, sep_out;
  std::vector<std::string> sep_images;
  add_shared(sep, sep_args, false);
  sep->add_option("--checkpoint", sep_checkpoint, "checkpoint file")->required();
  sep->add_option("--mixture", sep_mixture, "mixture WAV")->required();
  sep->add_option("--image", sep_images, "visual frame PPM, one per source")->required();
  sep->add_option("--out", sep_out, "output directory")->required();

  // cost
  auto* cost = app.add_subcommand("cost", "parameter and MAC accounting for model configs");
  std::vector<std::string> cost_configs;
  std::string cost_out;
  int cost_h = 128, cost_w = 64;
  cost->add_option("--config", cost_configs, "model config JSON (repeatable)")->required();
  cost->add_option("--spec-height", cost_h, "spectrogram frequency bins");
  cost->add_option("--spec-width", cost_w, "spectrogram frames");
  cost->add_option("--out", cost_out, "cost table JSON path");

  // check
  auto* chk = app.add_subcommand("check", "run the gradient/oracle self-test suite");
  std::uint64_t chk_seed = 1;
  chk->add_option("--seed", chk_seed, "self-test seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_out, gen_config, gen_seed, gen_workers);
    if (tr->parsed()) return run_train(train_args);
    if (ev->parsed()) return run_evaluate(eval_args, eval_checkpoint, eval_out);
    if (sep->parsed()) {
      return run_separate(sep_args, sep_checkpoint, sep_mixture, sep_images, sep_out);
    }
    if (cost->parsed()) return run_cost(cost_configs, cost_h, cost_w, cost_out);
    if (chk->parsed()) return run_check(chk_seed);
  } catch (const vsep::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
