#include "hoi/run_config.hpp"

#include <set>

namespace hoi {

std::string to_string(ReverseMode mode) {
  return mode == ReverseMode::stochastic ? "stochastic" : "deterministic";
}

ReverseMode parse_reverse_mode(std::string_view name) {
  if (name == "deterministic") return ReverseMode::deterministic;
  if (name == "stochastic") return ReverseMode::stochastic;
  throw ConfigError("unknown reverse mode '" + std::string(name) + "' (deterministic, stochastic)");
}

std::string to_string(ProcessKind kind) { return kind == ProcessKind::gaussian ? "gaussian" : "multinomial"; }

ProcessKind parse_process(std::string_view name) {
  if (name == "multinomial") return ProcessKind::multinomial;
  if (name == "gaussian") return ProcessKind::gaussian;
  throw ConfigError("unknown process '" + std::string(name) + "' (multinomial, gaussian)");
}

namespace {

InitKind parse_init(std::string_view name) {
  if (name == "prior") return InitKind::prior;
  if (name == "uniform") return InitKind::uniform;
  throw ConfigError("unknown init '" + std::string(name) + "' (prior, uniform)");
}

ScoreMode parse_score(std::string_view name) {
  if (name == "presence_times_object") return ScoreMode::presence_times_object;
  if (name == "presence_only") return ScoreMode::presence_only;
  throw ConfigError("unknown score mode '" + std::string(name) + "' (presence_times_object, presence_only)");
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "seed",
      "world.h", "world.w", "world.d_appearance", "world.train_pairs", "world.test_pairs",
      "world.pairs_per_scene_min", "world.pairs_per_scene_max", "world.pairs_per_object_max",
      "world.appearance_snr", "world.prior_temperature", "world.prior_error_rate",
      "world.interaction_rate", "world.rare_fraction", "world.rare_affinity", "world.seed",
      "schedule.steps", "schedule.trials", "schedule.beta_start", "schedule.beta_end", "schedule.file",
      "model.d_model", "model.blocks", "model.heads", "model.d_step", "model.ffn_mult",
      "model.patch_mode", "model.local_patch_h", "model.local_patch_w",
      "train.m_samples", "train.batch_size", "train.epochs", "train.seed", "train.loss_mode",
      "train.process", "train.init", "train.full_sweep", "train.chunk", "train.log_every",
      "train.learning_rate", "train.weight_decay", "train.beta1", "train.beta2", "train.epsilon",
      "eval.mode", "eval.score", "eval.init", "eval.seed", "eval.chunk",
      "diag.seed", "diag.conservation_chains", "diag.terminal_pairs", "diag.terminal_samples",
      "diag.moment_samples", "diag.lattice_chains"};
  return keys;
}

}  // namespace

NoiseSchedule ScheduleSettings::build() const {
  if (trials < 1) throw ConfigError("schedule.trials must be >= 1");
  if (!file.empty()) {
    NoiseSchedule s = load_schedule(file);
    if (s.steps() != steps) throw ConfigError("schedule.file has a different step count than schedule.steps");
    return schedule_from_betas(s.betas, trials);
  }
  return build_schedule(steps, trials, beta_start, beta_end);
}

RunConfig RunConfig::from(const KeyValueConfig& kv) {
  for (const auto& [key, value] : kv.entries()) {
    if (known_keys().count(key) == 0) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig r;
  r.seed = kv.get_u64("seed", r.seed);

  WorldConfig& w = r.world;
  w.h = kv.get_size("world.h", w.h);
  w.w = kv.get_size("world.w", w.w);
  w.d_appearance = kv.get_size("world.d_appearance", w.d_appearance);
  w.train_pairs = kv.get_size("world.train_pairs", w.train_pairs);
  w.test_pairs = kv.get_size("world.test_pairs", w.test_pairs);
  w.pairs_per_scene_min = kv.get_size("world.pairs_per_scene_min", w.pairs_per_scene_min);
  w.pairs_per_scene_max = kv.get_size("world.pairs_per_scene_max", w.pairs_per_scene_max);
  w.pairs_per_object_max = kv.get_size("world.pairs_per_object_max", w.pairs_per_object_max);
  w.appearance_snr = kv.get_double("world.appearance_snr", w.appearance_snr);
  w.prior_temperature = kv.get_double("world.prior_temperature", w.prior_temperature);
  w.prior_error_rate = kv.get_double("world.prior_error_rate", w.prior_error_rate);
  w.interaction_rate = kv.get_double("world.interaction_rate", w.interaction_rate);
  w.rare_fraction = kv.get_double("world.rare_fraction", w.rare_fraction);
  w.rare_affinity = kv.get_double("world.rare_affinity", w.rare_affinity);
  w.seed = kv.get_u64("world.seed", r.seed);

  ScheduleSettings& s = r.schedule;
  s.steps = static_cast<int>(kv.get_int("schedule.steps", s.steps));
  s.trials = static_cast<int>(kv.get_int("schedule.trials", s.trials));
  s.beta_start = kv.get_double("schedule.beta_start", s.beta_start);
  s.beta_end = kv.get_double("schedule.beta_end", s.beta_end);
  s.file = kv.get_string("schedule.file", "");

  DenoiserConfig& m = r.model;
  m.d_model = kv.get_size("model.d_model", m.d_model);
  m.blocks = kv.get_size("model.blocks", m.blocks);
  m.heads = kv.get_size("model.heads", m.heads);
  m.d_step = kv.get_size("model.d_step", m.d_step);
  m.ffn_mult = kv.get_size("model.ffn_mult", m.ffn_mult);
  m.patch_mode = parse_patch_mode(kv.get_string("model.patch_mode", to_string(m.patch_mode)));
  m.local_patch_h = kv.get_size("model.local_patch_h", m.local_patch_h);
  m.local_patch_w = kv.get_size("model.local_patch_w", m.local_patch_w);

  TrainConfig& t = r.train;
  t.m_samples = kv.get_size("train.m_samples", t.m_samples);
  t.batch_size = kv.get_size("train.batch_size", t.batch_size);
  t.epochs = kv.get_size("train.epochs", t.epochs);
  t.seed = kv.get_u64("train.seed", r.seed);
  t.loss_mode = parse_loss_mode(kv.get_string("train.loss_mode", to_string(t.loss_mode)));
  t.process = parse_process(kv.get_string("train.process", to_string(t.process)));
  t.init = parse_init(kv.get_string("train.init", "prior"));
  t.full_sweep = kv.get_bool("train.full_sweep", t.full_sweep);
  t.chunk = kv.get_size("train.chunk", t.chunk);
  t.log_every = kv.get_size("train.log_every", t.log_every);
  t.optimizer.learning_rate = kv.get_double("train.learning_rate", t.optimizer.learning_rate);
  t.optimizer.weight_decay = kv.get_double("train.weight_decay", t.optimizer.weight_decay);
  t.optimizer.beta1 = kv.get_double("train.beta1", t.optimizer.beta1);
  t.optimizer.beta2 = kv.get_double("train.beta2", t.optimizer.beta2);
  t.optimizer.epsilon = kv.get_double("train.epsilon", t.optimizer.epsilon);

  EvalConfig& e = r.eval;
  e.mode = parse_reverse_mode(kv.get_string("eval.mode", to_string(e.mode)));
  e.score = parse_score(kv.get_string("eval.score", "presence_times_object"));
  e.uniform_init = parse_init(kv.get_string("eval.init", "prior")) == InitKind::uniform;
  e.seed = kv.get_u64("eval.seed", r.seed);
  e.chunk = kv.get_size("eval.chunk", e.chunk);

  DiagConfig& d = r.diag;
  d.seed = kv.get_u64("diag.seed", r.seed);
  d.conservation_chains = kv.get_size("diag.conservation_chains", d.conservation_chains);
  d.terminal_pairs = kv.get_size("diag.terminal_pairs", d.terminal_pairs);
  d.terminal_samples = kv.get_size("diag.terminal_samples", d.terminal_samples);
  d.moment_samples = kv.get_size("diag.moment_samples", d.moment_samples);
  d.lattice_chains = kv.get_size("diag.lattice_chains", d.lattice_chains);

  r.model.h = w.h;
  r.model.w = w.w;
  r.model.d_appearance = w.d_appearance;
  r.model.steps = static_cast<std::size_t>(std::max(0, s.steps));
  r.diag.h = w.h;
  r.diag.w = w.w;
  r.check();
  return r;
}

void RunConfig::check() const {
  world.check();
  if (schedule.steps < 1) throw ConfigError("schedule.steps must be >= 1");
  if (schedule.trials < 1) throw ConfigError("schedule.trials must be >= 1");
  if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1.0)) {
    throw ConfigError("need 0 < schedule.beta_start <= schedule.beta_end < 1");
  }
  model.check();
  if (model.h != world.h || model.w != world.w || model.d_appearance != world.d_appearance) {
    throw ConfigError("model and world dimensions disagree");
  }
  train.check();
  if (eval.chunk == 0) throw ConfigError("eval.chunk must be >= 1");
}

KeyValueConfig RunConfig::resolved() const {
  KeyValueConfig kv;
  const auto sz = [&](const std::string& k, std::size_t v) { kv.set(k, std::to_string(v)); };
  kv.set("seed", std::to_string(seed));
  sz("world.h", world.h);
  sz("world.w", world.w);
  sz("world.d_appearance", world.d_appearance);
  sz("world.train_pairs", world.train_pairs);
  sz("world.test_pairs", world.test_pairs);
  sz("world.pairs_per_scene_min", world.pairs_per_scene_min);
  sz("world.pairs_per_scene_max", world.pairs_per_scene_max);
  sz("world.pairs_per_object_max", world.pairs_per_object_max);
  kv.set_double("world.appearance_snr", world.appearance_snr);
  kv.set_double("world.prior_temperature", world.prior_temperature);
  kv.set_double("world.prior_error_rate", world.prior_error_rate);
  kv.set_double("world.interaction_rate", world.interaction_rate);
  kv.set_double("world.rare_fraction", world.rare_fraction);
  kv.set_double("world.rare_affinity", world.rare_affinity);
  kv.set("world.seed", std::to_string(world.seed));

  kv.set("schedule.steps", std::to_string(schedule.steps));
  kv.set("schedule.trials", std::to_string(schedule.trials));
  kv.set_double("schedule.beta_start", schedule.beta_start);
  kv.set_double("schedule.beta_end", schedule.beta_end);
  if (!schedule.file.empty()) kv.set("schedule.file", schedule.file.string());

  sz("model.d_model", model.d_model);
  sz("model.blocks", model.blocks);
  sz("model.heads", model.heads);
  sz("model.d_step", model.d_step);
  sz("model.ffn_mult", model.ffn_mult);
  kv.set("model.patch_mode", to_string(model.patch_mode));
  sz("model.local_patch_h", model.local_patch_h);
  sz("model.local_patch_w", model.local_patch_w);

  sz("train.m_samples", train.m_samples);
  sz("train.batch_size", train.batch_size);
  sz("train.epochs", train.epochs);
  kv.set("train.seed", std::to_string(train.seed));
  kv.set("train.loss_mode", to_string(train.loss_mode));
  kv.set("train.process", to_string(train.process));
  kv.set("train.init", train.init == InitKind::uniform ? "uniform" : "prior");
  kv.set("train.full_sweep", train.full_sweep ? "true" : "false");
  sz("train.chunk", train.chunk);
  sz("train.log_every", train.log_every);
  kv.set_double("train.learning_rate", train.optimizer.learning_rate);
  kv.set_double("train.weight_decay", train.optimizer.weight_decay);
  kv.set_double("train.beta1", train.optimizer.beta1);
  kv.set_double("train.beta2", train.optimizer.beta2);
  kv.set_double("train.epsilon", train.optimizer.epsilon);

  kv.set("eval.mode", to_string(eval.mode));
  kv.set("eval.score", eval.score == ScoreMode::presence_only ? "presence_only" : "presence_times_object");
  kv.set("eval.init", eval.uniform_init ? "uniform" : "prior");
  kv.set("eval.seed", std::to_string(eval.seed));
  sz("eval.chunk", eval.chunk);

  kv.set("diag.seed", std::to_string(diag.seed));
  sz("diag.conservation_chains", diag.conservation_chains);
  sz("diag.terminal_pairs", diag.terminal_pairs);
  sz("diag.terminal_samples", diag.terminal_samples);
  sz("diag.moment_samples", diag.moment_samples);
  sz("diag.lattice_chains", diag.lattice_chains);
  return kv;
}

}  // namespace hoi
