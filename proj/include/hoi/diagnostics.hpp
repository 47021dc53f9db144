#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hoi/diffusion.hpp"

namespace hoi {

struct DiagCheck {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured statistic
  double threshold = 0.0;  // pass when value < threshold
  std::string detail;
};

struct DiagConfig {
  std::size_t h = 6;
  std::size_t w = 5;
  std::uint64_t seed = 1;
  std::size_t conservation_chains = 200;
  std::size_t terminal_pairs = 20;
  std::size_t terminal_samples = 2000;
  std::size_t moment_samples = 20000;
  std::size_t lattice_chains = 200000;
};

// Every forward-chain image stays valid at 1e-9; value is the worst slice deviation.
DiagCheck check_slice_conservation(const NoiseSchedule& sched, const DiagConfig& cfg);
// Mean terminal state of iterated chains against d_init, l-inf distance < 0.02.
DiagCheck check_terminal_convergence(const NoiseSchedule& sched, const DiagConfig& cfg);
// First and second moments of the closed-form jump against iterated steps at
// k = 5, T = 100, slice length 6; value is the largest |z| score.
DiagCheck check_jump_moments(const NoiseSchedule& sched, const DiagConfig& cfg);
// Frequency-weighted total variation between the normalized posterior and the
// empirical conditional of d_{k-1} given d_k on a length-2 lattice with T = 10.
// Betas {1/3, 1/4, 1/5} make every count move d_3 by the same 0.02, so many
// count sequences share an endpoint and the conditional is not degenerate.
DiagCheck check_posterior_lattice(const DiagConfig& cfg, int k);
// S_k recurrence against the direct closed-form sum; value is the max relative error.
DiagCheck check_s_factors(const NoiseSchedule& sched);

std::vector<DiagCheck> run_diagnostics(const NoiseSchedule& sched, const DiagConfig& cfg);

// "CHECK <name> PASS|FAIL value=<v> threshold=<t> <detail>" per line.
std::string format_report(const std::vector<DiagCheck>& checks);

}  // namespace hoi
