// hoi-idiff: dataset generation, training, evaluation, diffusion diagnostics
// and trajectory export for the HOI image diffusion model.
//
// Exit codes: 0 success, 1 runtime failure (including an interrupted or
// diverged training run, or a failed diagnostic), 2 configuration or usage error.

#include <atomic>
#include <csignal>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hoi/checkpoint.hpp"
#include "hoi/metrics.hpp"
#include "hoi/run_config.hpp"

namespace fs = std::filesystem;
using namespace hoi;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

struct Layers {
  std::vector<std::string> configs;
  std::vector<std::string> sets;
  std::vector<std::string> ablations;
};

void add_layer_options(CLI::App* cmd, Layers& l) {
  cmd->add_option("--config", l.configs, "Config file(s), later files override earlier ones");
  cmd->add_option("--set", l.sets, "Override one setting, key=value (repeatable)");
}

void apply_ablation(KeyValueConfig& kv, const std::string& name, bool eval) {
  if (name == "gaussian-process") {
    kv.set("train.process", "gaussian");
  } else if (name == "local-patch") {
    kv.set("model.patch_mode", "local");
  } else if (name == "horizontal-only") {
    kv.set("model.patch_mode", "horizontal");
  } else if (name == "vertical-only") {
    kv.set("model.patch_mode", "vertical");
  } else if (name == "uniform-init" && eval) {
    kv.set("eval.init", "uniform");
  } else if (name == "prior-only" && eval) {
    // handled by the caller
  } else {
    throw ConfigError("unknown ablation '" + name + "' for this command");
  }
}

KeyValueConfig layered(const Layers& l, const fs::path& base, bool eval) {
  KeyValueConfig kv;
  if (!base.empty() && fs::exists(base)) kv = KeyValueConfig::load(base);
  for (const auto& f : l.configs) kv.merge(KeyValueConfig::load(f));
  for (const auto& s : l.sets) kv.set_override(s);
  for (const auto& a : l.ablations) apply_ablation(kv, a, eval);
  return kv;
}

// The dataset fixes the image shape and feature width.
void adopt_dataset_shape(KeyValueConfig& kv, const WorldConfig& world) {
  const auto pin = [&](const std::string& key, std::size_t value) {
    if (kv.has(key) && kv.get_size(key, value) != value) {
      throw ConfigError(key + " disagrees with the dataset (" + std::to_string(value) + ")");
    }
    kv.set(key, std::to_string(value));
  };
  pin("world.h", world.h);
  pin("world.w", world.w);
  pin("world.d_appearance", world.d_appearance);
}

void check_model_fits(const DenoiserConfig& model, const Dataset& data, const NoiseSchedule& sched) {
  if (model.h != data.config.h || model.w != data.config.w || model.d_appearance != data.config.d_appearance) {
    throw ConfigError("checkpoint shape does not match the dataset");
  }
  if (static_cast<int>(model.steps) != sched.steps()) {
    throw ConfigError("checkpoint step count does not match the schedule");
  }
}

std::vector<std::vector<double>> appearances(const std::vector<PairSample>& pairs) {
  std::vector<std::vector<double>> out;
  out.reserve(pairs.size());
  for (const PairSample& p : pairs) out.push_back(p.appearance);
  return out;
}

const std::vector<PairSample>& split_of(const Dataset& data, const std::string& split) {
  if (split == "test") return data.test;
  if (split == "train") return data.train;
  throw ConfigError("unknown split '" + split + "' (train, test)");
}

int cmd_gen(const Layers& l, const fs::path& out) {
  const RunConfig rc = RunConfig::from(layered(l, {}, false));
  const Dataset data = generate_dataset(rc.world);
  write_dataset(out, data);
  rc.resolved().save(out / "config.resolved");
  const std::size_t scarce = count_scarce_combinations(data);
  const auto wanted = static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(rc.world.h * rc.world.w)));
  std::cout << "train pairs " << data.train.size() << ", test pairs " << data.test.size() << '\n'
            << "combinations with < 10 training positives: " << scarce << " (target >= " << wanted << ")\n"
            << "train hash " << content_hash(out / "train.jsonl") << ", test hash "
            << content_hash(out / "test.jsonl") << '\n';
  if (scarce < wanted) std::cerr << "warning: fewer scarce combinations than the rare-split target\n";
  return 0;
}

int cmd_train(const Layers& l, const fs::path& data_dir, const fs::path& out, bool resume) {
  const Dataset data = read_dataset(data_dir);
  KeyValueConfig kv = layered(l, resume ? out / "config.resolved" : fs::path{}, false);
  adopt_dataset_shape(kv, data.config);
  const RunConfig rc = RunConfig::from(kv);
  const NoiseSchedule sched = rc.schedule.build();

  fs::create_directories(out);
  rc.resolved().save(out / "config.resolved");
  save_schedule(out / "schedule.txt", sched);

  Rng init_rng = derive_stream(rc.train.seed, 0x1A17);
  DenoiserParams params = DenoiserParams::initialized(rc.model, init_rng);
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  opts.stop = &g_stop;
  opts.progress = &std::cout;
  std::signal(SIGINT, on_sigint);
  const TrainSummary s = train(data.train, data.config.shape(), params, sched, rc.train, opts);
  std::signal(SIGINT, SIG_DFL);
  if (s.interrupted) {
    std::cerr << "interrupted after step " << s.steps << "; checkpoint and optimizer state written to "
              << out.string() << ", continue with --resume\n";
    return 1;
  }
  std::cout << "trained " << s.epochs_completed << " epochs, " << s.steps << " steps, last epoch loss "
            << s.last_epoch_loss << '\n';
  return 0;
}

int cmd_eval(const Layers& l, const std::string& ckpt, const fs::path& data_dir, const fs::path& out,
             const std::string& split, bool oracle) {
  const Dataset data = read_dataset(data_dir);
  const fs::path base = ckpt.empty() ? fs::path{} : fs::path(ckpt).parent_path() / "config.resolved";
  KeyValueConfig kv = layered(l, base, true);
  adopt_dataset_shape(kv, data.config);
  const RunConfig rc = RunConfig::from(kv);
  const NoiseSchedule sched = rc.schedule.build();
  const std::vector<PairSample>& pairs = split_of(data, split);
  if (pairs.empty()) throw ConfigError("the " + split + " split is empty");
  const bool prior_only = std::find(l.ablations.begin(), l.ablations.end(), "prior-only") != l.ablations.end();

  EvalRun run;
  if (prior_only) {
    run = prior_only_evaluation(pairs, data.affinity, rc.eval.score);
  } else {
    ReverseOptions ro;
    ro.mode = rc.eval.mode;
    ro.process = rc.train.process;
    ro.seed = rc.eval.seed;
    ro.chunk = rc.eval.chunk;
    if (oracle) {
      std::vector<HoiImage> truth;
      for (const PairSample& p : pairs) truth.push_back(ground_truth_image(p, data.config.shape()));
      const OraclePredictor predictor(data.config.shape(), std::move(truth));
      run = run_evaluation(predictor, pairs, data.affinity, sched, ro, rc.eval.uniform_init, rc.eval.score);
    } else {
      if (ckpt.empty()) throw ConfigError("--checkpoint is required unless --oracle or prior-only is given");
      const DenoiserParams params = load_checkpoint(ckpt);
      check_model_fits(params.config(), data, sched);
      const ModelPredictor predictor(params, appearances(pairs));
      run = run_evaluation(predictor, pairs, data.affinity, sched, ro, rc.eval.uniform_init, rc.eval.score);
    }
  }
  fs::create_directories(out);
  write_results(out / "results.jsonl", run.detections);
  write_metrics(out, run.report);
  rc.resolved().save(out / "config.resolved");
  std::cout << metrics_table(run.report);
  return 0;
}

int cmd_diag(const Layers& l, const std::string& out) {
  const RunConfig rc = RunConfig::from(layered(l, {}, false));
  const NoiseSchedule sched = rc.schedule.build();
  const std::vector<DiagCheck> checks = run_diagnostics(sched, rc.diag);
  const std::string report = format_report(checks);
  std::cout << report;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "diagnostics.txt") << report;
    rc.resolved().save(fs::path(out) / "config.resolved");
  }
  for (const DiagCheck& c : checks)
    if (!c.pass) return 1;
  return 0;
}

int cmd_export(const Layers& l, const std::string& ckpt, const fs::path& data_dir, int pair_id,
               const std::string& split, const fs::path& out) {
  const Dataset data = read_dataset(data_dir);
  KeyValueConfig kv = layered(l, fs::path(ckpt).parent_path() / "config.resolved", true);
  adopt_dataset_shape(kv, data.config);
  const RunConfig rc = RunConfig::from(kv);
  if (rc.train.process != ProcessKind::multinomial) throw ConfigError("trajectory export needs the multinomial process");
  const NoiseSchedule sched = rc.schedule.build();
  const std::vector<PairSample>& pairs = split_of(data, split);
  const auto it = std::find_if(pairs.begin(), pairs.end(), [&](const PairSample& p) { return p.pair_id == pair_id; });
  if (it == pairs.end()) throw ConfigError("pair " + std::to_string(pair_id) + " is not in the " + split + " split");

  const DenoiserParams params = load_checkpoint(ckpt);
  check_model_fits(params.config(), data, sched);
  const ModelPredictor predictor(params, {it->appearance});
  const std::vector<HoiImage> inits{rc.eval.uniform_init ? uniform_hoi_image(data.config.shape())
                                                         : init_noisy_hoi_image(it->detector_prior, data.config.w)};
  ReverseOptions ro;
  ro.mode = rc.eval.mode;
  ro.seed = rc.eval.seed;
  ro.record = {0};
  const ReverseOutput result = reverse_sample_batch(predictor, inits, sched, ro);
  write_trajectory(out, *result.trajectories[0]);
  rc.resolved().save(out / "config.resolved");
  std::cout << "wrote " << result.trajectories[0]->images.size() << " step images to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HOI image diffusion: synthetic data, training, evaluation and diagnostics"};
  app.require_subcommand(1);

  Layers gen_l, train_l, eval_l, diag_l, export_l;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_layer_options(gen, gen_l);
  gen->add_option("--out", gen_out, "Output directory")->required();

  std::string train_data, train_out;
  bool resume = false;
  auto* trn = app.add_subcommand("train", "Train the denoiser");
  add_layer_options(trn, train_l);
  trn->add_option("--data", train_data, "Dataset directory")->required();
  trn->add_option("--out", train_out, "Run directory")->required();
  trn->add_flag("--resume", resume, "Continue from the run directory's checkpoint and optimizer state");
  trn->add_option("--ablation", train_l.ablations,
                  "gaussian-process | local-patch | horizontal-only | vertical-only");

  std::string eval_ckpt, eval_data, eval_out, eval_split = "test";
  bool oracle = false;
  auto* ev = app.add_subcommand("eval", "Reverse-sample, post-process and score a split");
  add_layer_options(ev, eval_l);
  ev->add_option("--checkpoint", eval_ckpt, "Model checkpoint");
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--out", eval_out, "Output directory")->required();
  ev->add_option("--split", eval_split, "train or test");
  ev->add_flag("--oracle", oracle, "Replace the model with the ground-truth images");
  ev->add_option("--ablation", eval_l.ablations, "uniform-init | prior-only | gaussian-process");

  std::string diag_out;
  auto* dg = app.add_subcommand("diag", "Statistical checks of the forward process");
  add_layer_options(dg, diag_l);
  dg->add_option("--out", diag_out, "Also write the report here");

  std::string ex_ckpt, ex_data, ex_out, ex_split = "test";
  int ex_pair = -1;
  auto* ex = app.add_subcommand("export-trajectory", "Write the reverse trajectory of one pair as pixmaps");
  add_layer_options(ex, export_l);
  ex->add_option("--checkpoint", ex_ckpt, "Model checkpoint")->required();
  ex->add_option("--data", ex_data, "Dataset directory")->required();
  ex->add_option("--pair", ex_pair, "pair_id to export")->required();
  ex->add_option("--split", ex_split, "train or test");
  ex->add_option("--out", ex_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(gen_l, gen_out);
    if (*trn) return cmd_train(train_l, train_data, train_out, resume);
    if (*ev) return cmd_eval(eval_l, eval_ckpt, eval_data, eval_out, eval_split, oracle);
    if (*dg) return cmd_diag(diag_l, diag_out);
    if (*ex) return cmd_export(export_l, ex_ckpt, ex_data, ex_pair, ex_split, ex_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
