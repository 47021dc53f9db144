#pragma once

#include <filesystem>
#include <string>

#include "hoi/denoiser.hpp"
#include "hoi/diagnostics.hpp"
#include "hoi/diffusion.hpp"
#include "hoi/inference.hpp"
#include "hoi/kv_config.hpp"
#include "hoi/synthetic_world.hpp"
#include "hoi/training.hpp"

namespace hoi {

struct ScheduleSettings {
  int steps = kDefaultSteps;
  int trials = kDefaultTrials;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::filesystem::path file;  // if set, betas come from this schedule file

  NoiseSchedule build() const;
};

struct EvalConfig {
  ReverseMode mode = ReverseMode::deterministic;
  ScoreMode score = ScoreMode::presence_times_object;
  bool uniform_init = false;
  std::uint64_t seed = 1;
  std::size_t chunk = 32;
};

/// Everything one run needs, resolved from layered key = value settings.
/// Sections: world., schedule., model., train., eval., diag.
struct RunConfig {
  WorldConfig world;
  ScheduleSettings schedule;
  DenoiserConfig model;
  TrainConfig train;
  EvalConfig eval;
  DiagConfig diag;
  std::uint64_t seed = 1;  // master seed; section seeds default to it

  // Throws ConfigError on unknown keys, bad values, or inconsistent sections.
  static RunConfig from(const KeyValueConfig& kv);
  KeyValueConfig resolved() const;
  void check() const;
};

std::string to_string(ReverseMode mode);
ReverseMode parse_reverse_mode(std::string_view name);
std::string to_string(ProcessKind kind);
ProcessKind parse_process(std::string_view name);

}  // namespace hoi
