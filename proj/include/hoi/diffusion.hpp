#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "hoi/core_types.hpp"
#include "hoi/rng.hpp"

namespace hoi {

// Which forward corruption is used. Multinomial is the simplex-preserving
// process; Gaussian is the classic baseline kept for ablations.
enum class ProcessKind { multinomial, gaussian };

/// Noise schedule for K steps. Steps are 1-based in every accessor; step 0 is
/// the clean state with alpha_bar(0) == 1.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  // Effective trial-count multipliers of the closed-form jump:
  // S_k = (1 - abar_k)^2 / sum_j (prod_{i>j} alpha_i)^2 beta_j^2.
  std::vector<double> s_factors;
  int trials = 0;

  int steps() const noexcept { return static_cast<int>(betas.size()); }
  double beta(int k) const { return betas.at(static_cast<std::size_t>(k - 1)); }
  double alpha(int k) const { return alphas.at(static_cast<std::size_t>(k - 1)); }
  double alpha_bar(int k) const {
    return k == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(k - 1));
  }
  double s_factor(int k) const { return s_factors.at(static_cast<std::size_t>(k - 1)); }

  // Integer trial count of the jump noise at step k: max(1, round(S_k * T)).
  int jump_trials(int k) const;
};

inline constexpr double kDefaultBetaStart = 1e-3;
inline constexpr double kDefaultBetaEnd = 0.18;  // abar_50 ~= 0.0080
inline constexpr int kDefaultSteps = 50;
inline constexpr int kDefaultTrials = 2000;

// Linear beta schedule from beta_start to beta_end inclusive.
NoiseSchedule build_schedule(int steps, int trials, double beta_start, double beta_end);
NoiseSchedule schedule_from_betas(std::vector<double> betas, int trials);

void save_schedule(const std::filesystem::path& path, const NoiseSchedule& sched);
NoiseSchedule load_schedule(const std::filesystem::path& path);

struct MultinomialDraw {
  std::vector<double> values;  // counts / trials
  int trials = 0;
};

MultinomialDraw sample_scaled_multinomial(std::span<const double> p, int trials, Rng& rng);

struct DiffusionState {
  std::vector<double> d0;
  std::vector<double> d_init;
  std::vector<double> d_k;
  int k = 0;
};

DiffusionState make_state(std::vector<double> d0, std::vector<double> d_init);

// d_k = (1 - beta_k) d_{k-1} + beta_k eps, eps ~ Multinomial(T, d_init) / T.
DiffusionState forward_step(const DiffusionState& state, const NoiseSchedule& sched, Rng& rng);

// d_k = abar_k d_0 + (1 - abar_k) eps, eps ~ Multinomial(round(S_k T), d_init) / round(S_k T).
std::vector<double> forward_jump(std::span<const double> d0, std::span<const double> d_init,
                                 int k, const NoiseSchedule& sched, Rng& rng);

struct PosteriorEval {
  double log_density = 0.0;
  double gamma = 1.0;
};

// Unnormalized log q(d_{k-1} | d_k, d_0) with the normalizer fixed to 1.
// Counts may be non-integer (log-gamma continuation); a negative implied count
// gives -infinity. Requires state.k >= 2.
PosteriorEval posterior_logdensity(std::span<const double> d_prev_candidate,
                                   const DiffusionState& state, const NoiseSchedule& sched);

// log of n! / prod x_i! * prod p_i^x_i with gamma-function continuation.
double generalized_multinomial_logpmf(std::span<const double> counts, double trials,
                                      std::span<const double> p);

// Whole-image forward process; each vertical slice draws independent noise.
HoiImage forward_step_image(const HoiImage& prev, const HoiImage& init, int k,
                            const NoiseSchedule& sched, Rng& rng);
HoiImage forward_jump_image(const HoiImage& clean, const HoiImage& init, int k,
                            const NoiseSchedule& sched, Rng& rng);

// Gaussian baseline.
std::vector<double> gaussian_forward_step(std::span<const double> d_prev, int k,
                                          const NoiseSchedule& sched, Rng& rng);
std::vector<double> gaussian_forward_jump(std::span<const double> d0, int k,
                                          const NoiseSchedule& sched, Rng& rng);

struct GaussianPosterior {
  std::vector<double> mean;
  double variance = 0.0;
  double coef_d0 = 0.0;
  double coef_dk = 0.0;
};

// Posterior of the Gaussian chain, defined for k >= 1:
// mean = sqrt(abar_{k-1}) beta_k / (1 - abar_k) d_0
//      + sqrt(alpha_k) (1 - abar_{k-1}) / (1 - abar_k) d_k,
// variance = (1 - abar_{k-1}) / (1 - abar_k) beta_k.
GaussianPosterior gaussian_posterior(std::span<const double> d_k, std::span<const double> d0,
                                     int k, const NoiseSchedule& sched);

}  // namespace hoi
