#include "hoi/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

namespace hoi {

namespace {

void require_simplex(std::span<const double> p, const char* what) {
  double sum = 0.0;
  for (double x : p) {
    if (!std::isfinite(x) || x < 0.0) {
      throw InvalidImageError(std::string(what) + ": entries must be finite and nonnegative");
    }
    sum += x;
  }
  if (p.empty() || std::abs(sum - 1.0) > kExternalTolerance) {
    throw InvalidImageError(std::string(what) + ": entries must sum to 1");
  }
}

std::vector<double> mix(double a, std::span<const double> x, double b, std::span<const double> y) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

int NoiseSchedule::jump_trials(int k) const {
  const double scaled = s_factor(k) * static_cast<double>(trials);
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

NoiseSchedule schedule_from_betas(std::vector<double> betas, int trials) {
  if (betas.empty()) throw RangeError("schedule needs at least one step");
  if (trials < 1) throw RangeError("trial count must be >= 1");
  NoiseSchedule s;
  s.trials = trials;
  s.betas = std::move(betas);
  const std::size_t steps = s.betas.size();
  s.alphas.resize(steps);
  s.alpha_bars.resize(steps);
  s.s_factors.resize(steps);
  double abar = 1.0;
  double denom = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double b = s.betas[i];
    if (!(b > 0.0 && b < 1.0)) {
      throw RangeError("beta values must lie in (0, 1); beta_" + std::to_string(i + 1) + " = " +
                       std::to_string(b));
    }
    const double a = 1.0 - b;
    abar *= a;
    // D_1 = beta_1^2, D_k = alpha_k^2 D_{k-1} + beta_k^2
    denom = a * a * denom + b * b;
    s.alphas[i] = a;
    s.alpha_bars[i] = abar;
    s.s_factors[i] = (1.0 - abar) * (1.0 - abar) / denom;
  }
  return s;
}

NoiseSchedule build_schedule(int steps, int trials, double beta_start, double beta_end) {
  if (steps < 1) throw RangeError("steps must be >= 1");
  if (trials < 1) throw RangeError("trials must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw RangeError("require 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double t = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * t;
  }
  return schedule_from_betas(std::move(betas), trials);
}

void save_schedule(const std::filesystem::path& path, const NoiseSchedule& sched) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write schedule: " + path.string());
  out << "# noise schedule; betas are hex floats\n";
  out << "steps = " << sched.steps() << "\n";
  out << "trials = " << sched.trials << "\n";
  char buf[64];
  for (int k = 1; k <= sched.steps(); ++k) {
    std::snprintf(buf, sizeof buf, "%a", sched.beta(k));
    out << "beta." << k << " = " << buf << "\n";
  }
  if (!out) throw IoError("failed writing schedule: " + path.string());
}

NoiseSchedule load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read schedule: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed schedule line: " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  if (!kv.count("steps") || !kv.count("trials")) throw IoError("schedule missing steps/trials");
  const int steps = std::stoi(kv["steps"]);
  const int trials = std::stoi(kv["trials"]);
  if (steps < 1) throw IoError("schedule steps must be >= 1");
  std::vector<double> betas;
  for (int k = 1; k <= steps; ++k) {
    const auto it = kv.find("beta." + std::to_string(k));
    if (it == kv.end()) throw IoError("schedule missing beta." + std::to_string(k));
    betas.push_back(std::strtod(it->second.c_str(), nullptr));
  }
  return schedule_from_betas(std::move(betas), trials);
}

MultinomialDraw sample_scaled_multinomial(std::span<const double> p, int trials, Rng& rng) {
  require_simplex(p, "multinomial probabilities");
  if (trials < 1) throw RangeError("multinomial trial count must be >= 1");
  MultinomialDraw draw;
  draw.trials = trials;
  draw.values.assign(p.size(), 0.0);
  // Sequential conditional binomials.
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) last_positive = i;
  }
  int remaining = trials;
  double mass_left = 1.0;
  for (std::size_t i = 0; i < p.size() && remaining > 0; ++i) {
    int count = 0;
    if (i == last_positive) {
      count = remaining;
    } else if (p[i] > 0.0) {
      const double q = mass_left > 0.0 ? std::min(1.0, p[i] / mass_left) : 1.0;
      if (q >= 1.0) {
        count = remaining;
      } else {
        std::binomial_distribution<int> binom(remaining, q);
        count = binom(rng);
      }
    }
    draw.values[i] = static_cast<double>(count) / static_cast<double>(trials);
    remaining -= count;
    mass_left -= p[i];
  }
  return draw;
}

DiffusionState make_state(std::vector<double> d0, std::vector<double> d_init) {
  require_simplex(d0, "d0");
  require_simplex(d_init, "d_init");
  if (d0.size() != d_init.size()) throw DimensionError("d0 and d_init lengths differ");
  DiffusionState s;
  s.d_k = d0;
  s.d0 = std::move(d0);
  s.d_init = std::move(d_init);
  s.k = 0;
  return s;
}

DiffusionState forward_step(const DiffusionState& state, const NoiseSchedule& sched, Rng& rng) {
  const int k = state.k + 1;
  if (k > sched.steps()) {
    throw RangeError("forward_step past the final step " + std::to_string(sched.steps()));
  }
  const MultinomialDraw eps = sample_scaled_multinomial(state.d_init, sched.trials, rng);
  const double b = sched.beta(k);
  DiffusionState next;
  next.d0 = state.d0;
  next.d_init = state.d_init;
  next.d_k = mix(1.0 - b, state.d_k, b, eps.values);
  next.k = k;
  return next;
}

std::vector<double> forward_jump(std::span<const double> d0, std::span<const double> d_init,
                                 int k, const NoiseSchedule& sched, Rng& rng) {
  if (k < 1 || k > sched.steps()) throw RangeError("forward_jump step out of range");
  if (d0.size() != d_init.size()) throw DimensionError("d0 and d_init lengths differ");
  require_simplex(d0, "d0");
  const MultinomialDraw eps = sample_scaled_multinomial(d_init, sched.jump_trials(k), rng);
  const double abar = sched.alpha_bar(k);
  return mix(abar, d0, 1.0 - abar, eps.values);
}

double generalized_multinomial_logpmf(std::span<const double> counts, double trials,
                                      std::span<const double> p) {
  constexpr double kNegTolerance = -1e-9;
  double out = std::lgamma(trials + 1.0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    double x = counts[i];
    if (x < kNegTolerance) return -std::numeric_limits<double>::infinity();
    x = std::max(0.0, x);
    out -= std::lgamma(x + 1.0);
    if (x > 0.0) {
      if (p[i] <= 0.0) return -std::numeric_limits<double>::infinity();
      out += x * std::log(p[i]);
    }
  }
  return out;
}

PosteriorEval posterior_logdensity(std::span<const double> d_prev_candidate,
                                   const DiffusionState& state, const NoiseSchedule& sched) {
  const int k = state.k;
  if (k < 2 || k > sched.steps()) throw RangeError("posterior needs 2 <= k <= K");
  const std::size_t n = state.d_k.size();
  if (d_prev_candidate.size() != n) throw DimensionError("candidate length mismatch");

  const double T = static_cast<double>(sched.trials);
  const double b = sched.beta(k);
  const double abar_prev = sched.alpha_bar(k - 1);
  const double s_prev = sched.s_factor(k - 1);

  std::vector<double> step_counts(n), jump_counts(n);
  for (std::size_t i = 0; i < n; ++i) {
    step_counts[i] = T * (state.d_k[i] - (1.0 - b) * d_prev_candidate[i]) / b;
    jump_counts[i] =
        s_prev * T * (d_prev_candidate[i] - abar_prev * state.d0[i]) / (1.0 - abar_prev);
  }
  PosteriorEval eval;
  eval.gamma = 1.0;
  const double step_term = generalized_multinomial_logpmf(step_counts, T, state.d_init);
  if (!std::isfinite(step_term)) {
    eval.log_density = -std::numeric_limits<double>::infinity();
    return eval;
  }
  const double jump_term = generalized_multinomial_logpmf(jump_counts, s_prev * T, state.d_init);
  eval.log_density = std::log(eval.gamma) + step_term + jump_term;
  return eval;
}

HoiImage forward_step_image(const HoiImage& prev, const HoiImage& init, int k,
                            const NoiseSchedule& sched, Rng& rng) {
  const HoiShape& shape = prev.shape();
  if (!(init.shape() == shape)) throw DimensionError("image shapes differ");
  if (k < 1 || k > sched.steps()) throw RangeError("forward step out of range");
  const double b = sched.beta(k);
  std::vector<std::vector<double>> slices(shape.w);
  for (std::size_t w = 0; w < shape.w; ++w) {
    const std::vector<double> eps = sample_scaled_multinomial(init.slice(w), sched.trials, rng).values;
    slices[w] = mix(1.0 - b, prev.slice(w), b, eps);
  }
  return image_from_slices(shape, slices);
}

HoiImage forward_jump_image(const HoiImage& clean, const HoiImage& init, int k,
                            const NoiseSchedule& sched, Rng& rng) {
  const HoiShape& shape = clean.shape();
  if (!(init.shape() == shape)) throw DimensionError("image shapes differ");
  if (k == 0) return clean;
  std::vector<std::vector<double>> slices(shape.w);
  for (std::size_t w = 0; w < shape.w; ++w) {
    slices[w] = forward_jump(clean.slice(w), init.slice(w), k, sched, rng);
  }
  return image_from_slices(shape, slices);
}

std::vector<double> gaussian_forward_step(std::span<const double> d_prev, int k,
                                          const NoiseSchedule& sched, Rng& rng) {
  if (k < 1 || k > sched.steps()) throw RangeError("gaussian step out of range");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double b = sched.beta(k);
  const double keep = std::sqrt(1.0 - b);
  const double scale = std::sqrt(b);
  std::vector<double> out(d_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * d_prev[i] + scale * normal(rng);
  return out;
}

std::vector<double> gaussian_forward_jump(std::span<const double> d0, int k,
                                          const NoiseSchedule& sched, Rng& rng) {
  if (k < 0 || k > sched.steps()) throw RangeError("gaussian jump out of range");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double abar = sched.alpha_bar(k);
  const double keep = std::sqrt(abar);
  const double scale = std::sqrt(1.0 - abar);
  std::vector<double> out(d0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * d0[i] + scale * normal(rng);
  return out;
}

GaussianPosterior gaussian_posterior(std::span<const double> d_k, std::span<const double> d0,
                                     int k, const NoiseSchedule& sched) {
  if (k < 1 || k > sched.steps()) throw RangeError("gaussian posterior step out of range");
  if (d_k.size() != d0.size()) throw DimensionError("posterior vector lengths differ");
  const double b = sched.beta(k);
  const double abar = sched.alpha_bar(k);
  const double abar_prev = sched.alpha_bar(k - 1);
  GaussianPosterior post;
  post.coef_d0 = std::sqrt(abar_prev) * b / (1.0 - abar);
  post.coef_dk = std::sqrt(1.0 - b) * (1.0 - abar_prev) / (1.0 - abar);
  post.variance = (1.0 - abar_prev) / (1.0 - abar) * b;
  post.mean.resize(d0.size());
  for (std::size_t i = 0; i < d0.size(); ++i) {
    post.mean[i] = post.coef_d0 * d0[i] + post.coef_dk * d_k[i];
  }
  return post;
}

}  // namespace hoi
