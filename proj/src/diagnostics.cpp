#include "hoi/diagnostics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>

#include "hoi/inference.hpp"
#include "hoi/rng.hpp"

namespace hoi {

namespace {

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> p(n);
  double z = 0.0;
  for (double& x : p) z += (x = g(rng));
  for (double& x : p) x /= z;
  return p;
}

std::vector<double> random_one_hot_slice(std::size_t n, Rng& rng) {
  std::vector<double> p(n, 0.0);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  p[pick(rng)] = 1.0;
  return p;
}

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

}  // namespace

DiagCheck check_slice_conservation(const NoiseSchedule& sched, const DiagConfig& cfg) {
  const HoiShape shape{cfg.h, cfg.w};
  Rng rng = derive_stream(cfg.seed, 1);
  double worst = 0.0;
  double min_entry = std::numeric_limits<double>::infinity();
  for (std::size_t chain = 0; chain < cfg.conservation_chains; ++chain) {
    std::uniform_int_distribution<std::size_t> klass(0, shape.h - 1);
    std::bernoulli_distribution coin(0.5);
    std::vector<int> present;
    for (std::size_t w = 0; w < shape.w; ++w)
      if (coin(rng)) present.push_back(static_cast<int>(w));
    HoiImage img = compose(ObjectDist::one_hot(shape.h, klass(rng)), InteractionMatrix::from_present(shape.w, present));
    const HoiImage init = init_noisy_hoi_image(ObjectDist(random_simplex(shape.h, rng)), shape.w);
    for (int k = 1; k <= sched.steps(); ++k) {
      img = forward_step_image(img, init, k, sched, rng);
      const ValidityReport rep = validate(img, kInternalTolerance);
      worst = std::max(worst, rep.max_slice_deviation);
      min_entry = std::min(min_entry, rep.min_entry);
    }
  }
  DiagCheck c{"slice_conservation", worst < kInternalTolerance && min_entry >= 0.0, worst, kInternalTolerance,
              fmt("chains=%.0f min_entry=%.3g", static_cast<double>(cfg.conservation_chains), min_entry)};
  return c;
}

DiagCheck check_terminal_convergence(const NoiseSchedule& sched, const DiagConfig& cfg) {
  const std::size_t n = 2 * cfg.h;
  Rng rng = derive_stream(cfg.seed, 2);
  double worst = 0.0;
  for (std::size_t p = 0; p < cfg.terminal_pairs; ++p) {
    const std::vector<double> d0 = random_one_hot_slice(n, rng);
    const std::vector<double> init = random_simplex(n, rng);
    std::vector<double> mean(n, 0.0);
    for (std::size_t s = 0; s < cfg.terminal_samples; ++s) {
      DiffusionState st = make_state(d0, init);
      for (int k = 1; k <= sched.steps(); ++k) st = forward_step(st, sched, rng);
      for (std::size_t i = 0; i < n; ++i) mean[i] += st.d_k[i];
    }
    for (std::size_t i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(mean[i] / static_cast<double>(cfg.terminal_samples) - init[i]));
  }
  return {"terminal_convergence", worst < 0.02, worst, 0.02,
          fmt("abar_K=%.4g samples=%.0f", sched.alpha_bar(sched.steps()), static_cast<double>(cfg.terminal_samples))};
}

DiagCheck check_jump_moments(const NoiseSchedule& sched, const DiagConfig& cfg) {
  constexpr int kStep = 5;
  constexpr std::size_t kLen = 6;
  if (sched.steps() < kStep) return {"jump_moments", false, 0.0, 4.0, "schedule shorter than 5 steps"};
  const NoiseSchedule s100 = schedule_from_betas(
      std::vector<double>(sched.betas.begin(), sched.betas.begin() + kStep), 100);
  Rng rng = derive_stream(cfg.seed, 3);
  const std::vector<double> d0 = random_simplex(kLen, rng);
  const std::vector<double> init = random_simplex(kLen, rng);
  const std::size_t n = cfg.moment_samples;

  // Accumulate raw moments 1..4 per entry for both routes.
  std::vector<std::array<double, 4>> a(kLen, {0, 0, 0, 0}), b(kLen, {0, 0, 0, 0});
  const auto add = [](std::vector<std::array<double, 4>>& acc, const std::vector<double>& x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      acc[i][0] += v;
      acc[i][1] += v * v;
      acc[i][2] += v * v * v;
      acc[i][3] += v * v * v * v;
    }
  };
  for (std::size_t s = 0; s < n; ++s) add(a, forward_jump(d0, init, kStep, s100, rng));
  for (std::size_t s = 0; s < n; ++s) {
    DiffusionState st = make_state(d0, init);
    for (int k = 1; k <= kStep; ++k) st = forward_step(st, s100, rng);
    add(b, st.d_k);
  }
  const double nn = static_cast<double>(n);
  double worst = 0.0;
  for (std::size_t i = 0; i < kLen; ++i) {
    double mean[2], var[2], m4[2];
    for (int r = 0; r < 2; ++r) {
      const auto& m = r == 0 ? a[i] : b[i];
      const double mu = m[0] / nn;
      mean[r] = mu;
      var[r] = m[1] / nn - mu * mu;
      m4[r] = m[3] / nn - 4 * mu * m[2] / nn + 6 * mu * mu * m[1] / nn - 3 * mu * mu * mu * mu;
    }
    const double se_mean = std::sqrt((var[0] + var[1]) / nn);
    if (se_mean > 0) worst = std::max(worst, std::abs(mean[0] - mean[1]) / se_mean);
    const double se_var = std::sqrt((std::max(0.0, m4[0] - var[0] * var[0]) + std::max(0.0, m4[1] - var[1] * var[1])) / nn);
    if (se_var > 0) worst = std::max(worst, std::abs(var[0] - var[1]) / se_var);
  }
  return {"jump_moments", worst < 4.0, worst, 4.0, fmt("samples=%.0f k=5 T=100", nn)};
}

DiagCheck check_posterior_lattice(const DiagConfig& cfg, int k) {
  const NoiseSchedule sched = schedule_from_betas({1.0 / 3.0, 0.25, 0.2}, 10);
  const std::vector<double> d0{1.0, 0.0};
  const std::vector<double> init{0.5, 0.5};
  const auto key = [](double x) { return std::llround(x * 1e9); };
  const int T = sched.trials;

  // Every value d_{k-1} can take, from all count sequences.
  std::map<long long, double> reachable;
  std::vector<double> level{d0[0]};
  for (int j = 1; j < k; ++j) {
    std::vector<double> next;
    for (double x : level)
      for (int c = 0; c <= T; ++c) next.push_back((1.0 - sched.beta(j)) * x + sched.beta(j) * c / T);
    level.clear();
    std::set<long long> seen;
    for (double x : next)
      if (seen.insert(key(x)).second) level.push_back(x);
  }
  for (double x : level) reachable[key(x)] = x;

  Rng rng = derive_stream(cfg.seed, 4);
  std::map<long long, std::map<long long, std::size_t>> joint;
  std::map<long long, double> dk_value;
  for (std::size_t s = 0; s < cfg.lattice_chains; ++s) {
    DiffusionState st = make_state(d0, init);
    double prev = d0[0];
    for (int j = 1; j <= k; ++j) {
      prev = st.d_k[0];
      st = forward_step(st, sched, rng);
    }
    const long long kk = key(st.d_k[0]);
    dk_value[kk] = st.d_k[0];
    ++joint[kk][key(prev)];
  }

  double weighted = 0.0;
  for (const auto& [kk, cond] : joint) {
    std::size_t total = 0;
    for (const auto& [pk, cnt] : cond) total += cnt;
    DiffusionState st = make_state(d0, init);
    st.d_k = {dk_value[kk], 1.0 - dk_value[kk]};
    st.k = k;
    std::map<long long, double> post;
    double z = 0.0;
    for (const auto& [pk, x] : reachable) {
      const double lp = posterior_logdensity(std::vector<double>{x, 1.0 - x}, st, sched).log_density;
      if (!std::isfinite(lp)) continue;
      const double count = T * (st.d_k[0] - (1.0 - sched.beta(k)) * x) / sched.beta(k);
      if (std::abs(count - std::round(count)) > 1e-6) continue;  // off the step lattice
      post[pk] = std::exp(lp);
      z += post[pk];
    }
    std::set<long long> keys;
    for (const auto& [pk, p] : post) keys.insert(pk);
    for (const auto& [pk, c] : cond) keys.insert(pk);
    double tv = 0.0;
    for (long long pk : keys) {
      const double p = post.count(pk) != 0 && z > 0 ? post[pk] / z : 0.0;
      const auto it = cond.find(pk);
      const double q = it == cond.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total);
      tv += std::abs(p - q);
    }
    weighted += 0.5 * tv * static_cast<double>(total) / static_cast<double>(cfg.lattice_chains);
  }
  return {"posterior_lattice_k" + std::to_string(k), weighted < 0.05, weighted, 0.05,
          fmt("chains=%.0f observed_states=%.0f", static_cast<double>(cfg.lattice_chains), static_cast<double>(joint.size()))};
}

DiagCheck check_s_factors(const NoiseSchedule& sched) {
  double worst = 0.0;
  for (int k = 1; k <= sched.steps(); ++k) {
    double denom = 0.0;
    for (int j = 1; j <= k; ++j) {
      double prod = 1.0;
      for (int i = j + 1; i <= k; ++i) prod *= sched.alpha(i);
      denom += prod * prod * sched.beta(j) * sched.beta(j);
    }
    const double one_minus = 1.0 - sched.alpha_bar(k);
    const double direct = one_minus * one_minus / denom;
    worst = std::max(worst, std::abs(sched.s_factor(k) - direct) / direct);
  }
  return {"s_factor_recurrence", worst < 1e-12, worst, 1e-12, fmt("steps=%.0f", sched.steps())};
}

std::vector<DiagCheck> run_diagnostics(const NoiseSchedule& sched, const DiagConfig& cfg) {
  return {check_s_factors(sched), check_slice_conservation(sched, cfg), check_terminal_convergence(sched, cfg),
          check_jump_moments(sched, cfg), check_posterior_lattice(cfg, 2), check_posterior_lattice(cfg, 3)};
}

std::string format_report(const std::vector<DiagCheck>& checks) {
  std::string out;
  char buf[320];
  for (const DiagCheck& c : checks) {
    std::snprintf(buf, sizeof buf, "CHECK %s %s value=%.6g threshold=%.6g %s\n", c.name.c_str(),
                  c.pass ? "PASS" : "FAIL", c.value, c.threshold, c.detail.c_str());
    out += buf;
  }
  return out;
}

}  // namespace hoi
