// Acceptance suite. Prints one "CRITERION <n> PASS|FAIL" line per criterion
// and exits nonzero if any fails. Reference values come from oracles written
// here, independent of the library code they check.

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "hoi/denoiser.hpp"
#include "hoi/diffusion.hpp"
#include "hoi/inference.hpp"
#include "hoi/metrics.hpp"
#include "hoi/synthetic_world.hpp"
#include "hoi/training.hpp"

using namespace hoi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

NoiseSchedule default_schedule() {
  return build_schedule(kDefaultSteps, kDefaultTrials, kDefaultBetaStart, kDefaultBetaEnd);
}

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(n);
  double z = 0.0;
  for (double& x : p) z += (x = e(rng));
  for (double& x : p) x /= z;
  return p;
}

// ---------------------------------------------------------------- 1

Outcome simplex_conservation() {
  const NoiseSchedule sched = default_schedule();
  constexpr std::size_t H = 6, W = 5;
  Rng rng = derive_stream(101, 0);
  std::uniform_int_distribution<std::size_t> klass(0, H - 1);
  std::bernoulli_distribution coin(0.3);
  double worst = 0.0, min_entry = 1.0;
  std::size_t invalid = 0, images = 0;
  for (int chain = 0; chain < 1000; ++chain) {
    std::vector<int> present;
    for (std::size_t w = 0; w < W; ++w)
      if (coin(rng)) present.push_back(static_cast<int>(w));
    HoiImage img = compose(ObjectDist::one_hot(H, klass(rng)), InteractionMatrix::from_present(W, present));
    const HoiImage init = init_noisy_hoi_image(ObjectDist(random_simplex(H, rng)), W);
    for (int k = 1; k <= sched.steps(); ++k) {
      img = forward_step_image(img, init, k, sched, rng);
      ++images;
      for (std::size_t w = 0; w < W; ++w) {
        double sum = 0.0;
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t c = 0; c < 2; ++c) {
            sum += img.at(h, w, c);
            min_entry = std::min(min_entry, img.at(h, w, c));
          }
        }
        worst = std::max(worst, std::abs(sum - 1.0));
      }
      if (!validate(img, 1e-9).pass) ++invalid;
    }
  }
  return {worst < 1e-9 && min_entry >= 0.0 && invalid == 0,
          fmt("%zu images, max slice deviation %.3g, min entry %.3g, failed validation %zu", images, worst,
              min_entry, invalid)};
}

// ---------------------------------------------------------------- 2

Outcome terminal_convergence() {
  const NoiseSchedule sched = default_schedule();
  const double abar = sched.alpha_bar(sched.steps());
  constexpr std::size_t n = 12;  // one vertical slice of a 6-row image
  constexpr int samples = 10000;
  Rng rng = derive_stream(102, 0);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  double worst = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    std::vector<double> d0(n, 0.0);
    d0[pick(rng)] = 1.0;
    const std::vector<double> init = random_simplex(n, rng);
    std::vector<double> mean(n, 0.0);
    for (int s = 0; s < samples; ++s) {
      DiffusionState st = make_state(d0, init);
      for (int k = 1; k <= sched.steps(); ++k) st = forward_step(st, sched, rng);
      for (std::size_t i = 0; i < n; ++i) mean[i] += st.d_k[i];
    }
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(mean[i] / samples - init[i]));
  }
  return {abar <= 0.01 && worst < 0.02,
          fmt("abar_50 %.5f, worst l-inf distance of the terminal mean %.5f over 20 pairs", abar, worst)};
}

// ---------------------------------------------------------------- 3

struct Moments {
  std::vector<double> s1, s2, s3, s4;
  explicit Moments(std::size_t n) : s1(n), s2(n), s3(n), s4(n) {}
  void add(const std::vector<double>& x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      s1[i] += x[i];
      s2[i] += x[i] * x[i];
      s3[i] += x[i] * x[i] * x[i];
      s4[i] += x[i] * x[i] * x[i] * x[i];
    }
  }
};

Outcome jump_consistency() {
  const NoiseSchedule base = default_schedule();
  const NoiseSchedule sched =
      schedule_from_betas(std::vector<double>(base.betas.begin(), base.betas.begin() + 5), 100);
  constexpr std::size_t n = 6;
  constexpr int samples = 100000;
  Rng rng = derive_stream(103, 0);
  const std::vector<double> d0 = random_simplex(n, rng);
  const std::vector<double> init = random_simplex(n, rng);
  Moments jump(n), iter(n);
  for (int s = 0; s < samples; ++s) jump.add(forward_jump(d0, init, 5, sched, rng));
  for (int s = 0; s < samples; ++s) {
    DiffusionState st = make_state(d0, init);
    for (int k = 1; k <= 5; ++k) st = forward_step(st, sched, rng);
    iter.add(st.d_k);
  }
  const double N = samples;
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mu[2], var[2], c4[2];
    for (int r = 0; r < 2; ++r) {
      const Moments& m = r == 0 ? jump : iter;
      const double a = m.s1[i] / N, b = m.s2[i] / N, c = m.s3[i] / N, d = m.s4[i] / N;
      mu[r] = a;
      var[r] = b - a * a;
      c4[r] = d - 4 * a * c + 6 * a * a * b - 3 * a * a * a * a;
    }
    worst_mean = std::max(worst_mean, std::abs(mu[0] - mu[1]) / std::sqrt((var[0] + var[1]) / N));
    const double se_var = std::sqrt((c4[0] - var[0] * var[0] + c4[1] - var[1] * var[1]) / N);
    worst_var = std::max(worst_var, std::abs(var[0] - var[1]) / se_var);
  }
  return {worst_mean < 4.0 && worst_var < 4.0,
          fmt("largest |difference| / standard error: mean %.3f, variance %.3f (limit 4)", worst_mean, worst_var)};
}

// ---------------------------------------------------------------- 4

double binomial_pmf(int n, int c, double p) {
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(c + 1.0) - std::lgamma(n - c + 1.0) + c * std::log(p) +
                  (n - c) * std::log1p(-p));
}

long long lattice_key(double x) { return std::llround(x * 1e9); }

Outcome posterior_fidelity() {
  // Slice length 2, T = 10, K = 3. Equal per-count increments on d_3 make many
  // count sequences share an endpoint.
  const std::vector<double> betas{1.0 / 3.0, 0.25, 0.2};
  constexpr int T = 10;
  constexpr int K = 3;
  const NoiseSchedule sched = schedule_from_betas(betas, T);
  const double d0 = 1.0;
  const double p_init = 0.3;

  // Exact law of d_j for j = 0..K from binomial count sequences.
  std::vector<std::map<long long, std::pair<double, double>>> law(K + 1);  // key -> (value, prob)
  law[0][lattice_key(d0)] = {d0, 1.0};
  for (int j = 1; j <= K; ++j) {
    const double b = betas[static_cast<std::size_t>(j - 1)];
    for (const auto& [key, vp] : law[static_cast<std::size_t>(j - 1)]) {
      for (int c = 0; c <= T; ++c) {
        const double x = (1.0 - b) * vp.first + b * c / T;
        auto& slot = law[static_cast<std::size_t>(j)][lattice_key(x)];
        slot.first = x;
        slot.second += vp.second * binomial_pmf(T, c, p_init);
      }
    }
  }

  // Simulated chains with their own binomial draws.
  constexpr int chains = 1000000;
  Rng rng = derive_stream(104, 0);
  std::binomial_distribution<int> draw(T, p_init);
  std::vector<std::map<long long, std::map<long long, std::size_t>>> joint(K + 1);
  std::vector<std::map<long long, double>> value_of(K + 1);
  for (int s = 0; s < chains; ++s) {
    double prev = d0;
    for (int j = 1; j <= K; ++j) {
      const double b = betas[static_cast<std::size_t>(j - 1)];
      const double next = (1.0 - b) * prev + b * draw(rng) / T;
      if (j >= 2) {
        const long long kk = lattice_key(next);
        value_of[static_cast<std::size_t>(j)][kk] = next;
        ++joint[static_cast<std::size_t>(j)][kk][lattice_key(prev)];
      }
      prev = next;
    }
  }

  std::string detail;
  bool pass = true;
  for (int k = 2; k <= K; ++k) {
    const double b = betas[static_cast<std::size_t>(k - 1)];
    double tv_empirical = 0.0, tv_exact = 0.0;
    std::size_t ambiguous = 0;
    for (const auto& [kk, cond] : joint[static_cast<std::size_t>(k)]) {
      const double dk = value_of[static_cast<std::size_t>(k)][kk];
      std::size_t total = 0;
      for (const auto& [pk, c] : cond) total += c;
      DiffusionState st = make_state({d0, 1.0 - d0}, {p_init, 1.0 - p_init});
      st.d_k = {dk, 1.0 - dk};
      st.k = k;
      // Reachable d_{k-1} values that one step can carry to d_k.
      std::map<long long, double> post, exact;
      double zp = 0.0, ze = 0.0;
      for (const auto& [pk, vp] : law[static_cast<std::size_t>(k - 1)]) {
        const double count = T * (dk - (1.0 - b) * vp.first) / b;
        const double c = std::round(count);
        if (std::abs(count - c) > 1e-6 || c < 0 || c > T) continue;
        const double lp = posterior_logdensity(std::vector<double>{vp.first, 1.0 - vp.first}, st, sched).log_density;
        post[pk] = std::isfinite(lp) ? std::exp(lp) : 0.0;
        zp += post[pk];
        exact[pk] = vp.second * binomial_pmf(T, static_cast<int>(c), p_init);
        ze += exact[pk];
      }
      if (post.size() > 1) ++ambiguous;
      double tv_e = 0.0, tv_x = 0.0;
      std::set<long long> keys;
      for (const auto& [pk, v] : post) keys.insert(pk);
      for (const auto& [pk, v] : cond) keys.insert(pk);
      for (long long pk : keys) {
        const double p = post.count(pk) != 0 && zp > 0 ? post[pk] / zp : 0.0;
        const double e = exact.count(pk) != 0 && ze > 0 ? exact[pk] / ze : 0.0;
        const auto it = cond.find(pk);
        const double q = it == cond.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total);
        tv_e += std::abs(p - q);
        tv_x += std::abs(p - e);
      }
      const double weight = static_cast<double>(total) / chains;
      tv_empirical += 0.5 * tv_e * weight;
      tv_exact += 0.5 * tv_x * weight;
    }
    pass = pass && tv_empirical < 0.05 && ambiguous > 0;
    detail += fmt("%sk=%d: TV to simulated conditional %.4f (to exact enumeration %.4f), %zu of %zu d_k values with "
                  "several predecessors",
                  k == 2 ? "" : "; ", k, tv_empirical, tv_exact, ambiguous, joint[static_cast<std::size_t>(k)].size());
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- 5

Outcome s_recurrence() {
  const NoiseSchedule sched = default_schedule();
  double worst = 0.0;
  for (int k = 1; k <= sched.steps(); ++k) {
    double denom = 0.0;
    for (int j = 1; j <= k; ++j) {
      double prod = 1.0;
      for (int i = j + 1; i <= k; ++i) prod *= 1.0 - sched.betas[static_cast<std::size_t>(i - 1)];
      const double b = sched.betas[static_cast<std::size_t>(j - 1)];
      denom += prod * prod * b * b;
    }
    double abar = 1.0;
    for (int i = 1; i <= k; ++i) abar *= 1.0 - sched.betas[static_cast<std::size_t>(i - 1)];
    const double direct = (1.0 - abar) * (1.0 - abar) / denom;
    worst = std::max(worst, std::abs(sched.s_factor(k) - direct) / direct);
  }
  return {worst < 1e-12, fmt("max relative error %.3g over k = 1..50", worst)};
}

// ---------------------------------------------------------------- 6

Outcome gradient_check() {
  DenoiserConfig cfg;
  cfg.h = 4;
  cfg.w = 3;
  cfg.d_model = 16;
  cfg.blocks = 2;
  cfg.heads = 4;
  cfg.d_appearance = 8;
  cfg.d_step = 16;
  cfg.steps = 50;
  const NoiseSchedule sched = default_schedule();
  Rng rng = derive_stream(106, 0);
  DenoiserParams params = DenoiserParams::initialized(cfg, rng);
  // Move off the zero-gate initialization so every path carries gradient.
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (double& v : params.values()) v += jitter(rng);

  TrainConfig tc;
  tc.m_samples = 2;
  tc.loss_mode = LossMode::both;
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<TrainingTuple> tuples;
  std::vector<std::vector<double>> appearance;
  for (int p = 0; p < 3; ++p) {
    PairSample pair;
    pair.true_object = p;
    pair.true_interactions = p == 1 ? std::vector<int>{} : std::vector<int>{0, 2};
    pair.detector_prior = ObjectDist(random_simplex(cfg.h, rng));
    pair.appearance.resize(cfg.d_appearance);
    for (double& a : pair.appearance) a = nd(rng);
    for (auto& t : make_training_targets(pair, cfg.shape(), sched, tc, rng)) {
      tuples.push_back(std::move(t));
      appearance.push_back(pair.appearance);
    }
  }
  DenoiseBatch batch(tuples.size(), cfg);
  for (std::size_t i = 0; i < tuples.size(); ++i) batch.set(i, tuples[i].noisy, appearance[i], tuples[i].k);
  const double n = static_cast<double>(tuples.size());

  const auto loss_of = [&](Mat* grad_out) {
    ForwardCache cache;
    const Mat pred = denoise_batch(params, batch, grad_out != nullptr ? &cache : nullptr);
    double loss = 0.0;
    if (grad_out != nullptr) grad_out->resize(pred.rows(), pred.cols());
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
      const std::span<const double> row(pred.row(r).data(), static_cast<std::size_t>(pred.cols()));
      const LossTerms t = tuple_loss(row, tuples[static_cast<std::size_t>(r)], sched, tc);
      loss += t.loss / n;
      if (grad_out != nullptr)
        for (std::size_t j = 0; j < t.grad.size(); ++j) (*grad_out)(r, static_cast<Eigen::Index>(j)) = t.grad[j] / n;
    }
    if (grad_out != nullptr) {
      std::vector<double> g(params.parameter_count(), 0.0);
      backward(params, cache, *grad_out, g);
      params.grads() = g;
    }
    return loss;
  };
  Mat grad_out;
  loss_of(&grad_out);
  const std::vector<double> analytic = params.grads();

  std::vector<std::size_t> idx(params.parameter_count());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(200);
  constexpr double step = 1e-5;
  constexpr double floor = 1e-6;
  double worst = 0.0;
  std::size_t nonzero = 0;
  for (std::size_t i : idx) {
    const double orig = params.values()[i];
    params.values()[i] = orig + step;
    const double up = loss_of(nullptr);
    params.values()[i] = orig - step;
    const double down = loss_of(nullptr);
    params.values()[i] = orig;
    const double numeric = (up - down) / (2 * step);
    worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), floor}));
    nonzero += std::abs(analytic[i]) > floor;
  }
  return {worst < 1e-4 && nonzero > 100,
          fmt("%zu parameters, 200 sampled (%zu with |grad| > %.0e), max relative error %.3g", params.parameter_count(),
              nonzero, floor, worst)};
}

// ---------------------------------------------------------------- 7

Outcome round_trip() {
  // The illustration: box (row 0) with push and watch present, among five
  // objects and six interactions.
  const HoiImage ill = compose(ObjectDist::one_hot(5, 0), InteractionMatrix::from_present(6, std::vector<int>{2, 5}));
  bool pattern = ill.shape() == HoiShape{5, 6};
  for (std::size_t h = 0; h < 5; ++h) {
    for (std::size_t w = 0; w < 6; ++w) {
      const bool present = w == 2 || w == 5;
      pattern = pattern && ill.at(h, w, kPresent) == (h == 0 && present ? 1.0 : 0.0);
      pattern = pattern && ill.at(h, w, kAbsent) == (h == 0 && !present ? 1.0 : 0.0);
    }
  }
  const auto [iv, im] = decompose(ill);
  for (std::size_t w = 0; w < 6; ++w) pattern = pattern && im[w][kPresent] == ((w == 2 || w == 5) ? 1.0 : 0.0);
  pattern = pattern && iv[0] == 1.0;

  Rng rng = derive_stream(107, 0);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t H = dim(rng), W = dim(rng);
    const std::vector<double> v = random_simplex(H, rng);
    std::vector<InteractionMatrix::Row> rows(W);
    for (auto& r : rows) {
      r[kPresent] = u(rng);
      r[kAbsent] = 1.0 - r[kPresent];
    }
    const auto [v2, m2] = decompose(compose(ObjectDist(v), InteractionMatrix(rows)));
    for (std::size_t h = 0; h < H; ++h) worst = std::max(worst, std::abs(v2[h] - v[h]));
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < 2; ++c) worst = std::max(worst, std::abs(m2[w][c] - rows[w][c]));
  }
  return {pattern && worst < 1e-9,
          fmt("illustration pattern %s, max factor error %.3g over 1000 pairs", pattern ? "exact" : "WRONG", worst)};
}

// ---------------------------------------------------------------- 8, 9

struct TrainedModel {
  DenoiserParams params;
  double train_seconds = 0.0;
};

DenoiserConfig benchmark_model(const WorldConfig& world, PatchMode mode) {
  DenoiserConfig cfg;
  cfg.h = world.h;
  cfg.w = world.w;
  cfg.d_appearance = world.d_appearance;
  cfg.d_model = 32;
  cfg.blocks = 2;
  cfg.heads = 4;
  cfg.d_step = 32;
  cfg.steps = kDefaultSteps;
  cfg.patch_mode = mode;
  return cfg;
}

TrainedModel train_benchmark(const Dataset& data, PatchMode mode, std::uint64_t seed, const fs::path& dir) {
  const NoiseSchedule sched = default_schedule();
  Rng init = derive_stream(seed, 0x1A17);
  TrainedModel m{DenoiserParams::initialized(benchmark_model(data.config, mode), init), 0.0};
  TrainConfig tc;
  tc.seed = seed;
  tc.epochs = 10;
  tc.optimizer.learning_rate = 1e-3;
  TrainOptions opts;
  opts.out_dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  train(data.train, data.config.shape(), m.params, sched, tc, opts);
  m.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

double triplet_f1(const DenoiserParams& params, const Dataset& data, bool uniform) {
  std::vector<std::vector<double>> app;
  for (const PairSample& p : data.test) app.push_back(p.appearance);
  const ModelPredictor predictor(params, app);
  return run_evaluation(predictor, data.test, data.affinity, default_schedule(), ReverseOptions{}, uniform,
                        ScoreMode::presence_times_object)
      .report.triplet.f1();
}

struct BenchmarkRuns {
  std::vector<double> slice_prior, slice_uniform, local_prior;
  double prior_only = 0.0;
  double seed1_train_seconds = 0.0;
};

BenchmarkRuns run_benchmark(const fs::path& scratch) {
  const Dataset data = generate_dataset(WorldConfig{});
  BenchmarkRuns r;
  r.prior_only = prior_only_evaluation(data.test, data.affinity, ScoreMode::presence_times_object).report.triplet.f1();
  for (std::uint64_t seed : {1, 2, 3}) {
    const TrainedModel slice = train_benchmark(data, PatchMode::slice, seed, scratch / ("slice" + std::to_string(seed)));
    if (seed == 1) r.seed1_train_seconds = slice.train_seconds;
    r.slice_prior.push_back(triplet_f1(slice.params, data, false));
    r.slice_uniform.push_back(triplet_f1(slice.params, data, true));
    const TrainedModel local = train_benchmark(data, PatchMode::local, seed, scratch / ("local" + std::to_string(seed)));
    r.local_prior.push_back(triplet_f1(local.params, data, false));
    std::printf("  seed %llu: slice F1 %.4f (uniform start %.4f), local F1 %.4f\n",
                static_cast<unsigned long long>(seed), r.slice_prior.back(), r.slice_uniform.back(),
                r.local_prior.back());
    std::fflush(stdout);
  }
  return r;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

Outcome learning_sanity(const BenchmarkRuns& r) {
  const double f1 = r.slice_prior.front();
  const double margin = f1 - r.prior_only;
  return {f1 >= 0.9 && margin >= 0.2 && r.seed1_train_seconds <= 1800.0,
          fmt("triplet F1 %.4f vs prior-only %.4f (margin %.1f points), training %.0f s", f1, r.prior_only,
              100.0 * margin, r.seed1_train_seconds)};
}

Outcome ablation_echoes(const BenchmarkRuns& r) {
  const double a = mean(r.slice_prior) - mean(r.slice_uniform);
  const double b = mean(r.slice_prior) - mean(r.local_prior);
  return {a >= 0.0 && b >= 0.0,
          fmt("mean F1 over 3 seeds: noisy-init %.4f vs uniform %.4f (margin %+.4f); slice %.4f vs local %.4f "
              "(margin %+.4f)",
              mean(r.slice_prior), mean(r.slice_uniform), a, mean(r.slice_prior), mean(r.local_prior), b)};
}

// ---------------------------------------------------------------- 10

std::string file_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("'") + HOI_IDIFF_CLI + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

Outcome reproducibility(const fs::path& scratch) {
  fs::create_directories(scratch);
  const fs::path data = scratch / "data";
  const std::string model =
      " --set model.d_model=32 --set model.blocks=2 --set model.heads=4 --set model.d_step=32"
      " --set train.epochs=1 --set train.learning_rate=0.001 --set train.seed=7";
  bool ok = run_cli("gen --out '" + data.string() + "'", scratch / "gen.log");
  for (int i : {1, 2}) {
    const fs::path run = scratch / ("run" + std::to_string(i));
    ok = ok && run_cli("train --data '" + data.string() + "' --out '" + run.string() + "'" + model,
                       scratch / "train.log");
    ok = ok && run_cli("eval --checkpoint '" + (run / "checkpoint.hidf").string() + "' --data '" + data.string() +
                           "' --out '" + (run / "eval").string() + "' --set eval.mode=stochastic --set eval.seed=7",
                       scratch / "eval.log");
  }
  if (!ok) return {false, "a CLI command failed; see " + scratch.string()};
  std::size_t same = 0, compared = 0;
  for (const char* f : {"checkpoint.hidf", "optimizer.state", "eval/metrics.kv", "eval/metrics.txt",
                        "eval/results.jsonl"}) {
    ++compared;
    const std::string a = file_bytes(scratch / "run1" / f);
    same += !a.empty() && a == file_bytes(scratch / "run2" / f);
  }
  return {same == compared, fmt("%zu of %zu checkpoint and metrics files byte-identical across two runs", same, compared)};
}

// ---------------------------------------------------------------- 11

double brute_force_ap(std::vector<RankedDetection> d, std::size_t positives) {
  if (positives == 0) return 0.0;
  std::stable_sort(d.begin(), d.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double ap = 0.0;
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (!d[j].true_positive) continue;
    double best = 0.0;
    for (std::size_t i = j; i < d.size(); ++i) {
      std::size_t tp = 0;
      for (std::size_t t = 0; t <= i; ++t) tp += d[t].true_positive;
      best = std::max(best, static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    ap += best;
  }
  return ap / static_cast<double>(positives);
}

Outcome metric_correctness() {
  Rng rng = derive_stream(111, 0);
  std::uniform_int_distribution<int> len(1, 25), coarse(0, 6), extra(0, 3);
  std::bernoulli_distribution hit(0.45);
  int exact = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<RankedDetection> d(static_cast<std::size_t>(len(rng)));
    std::size_t tps = 0;
    for (auto& x : d) {
      x.score = coarse(rng) / 6.0;
      x.true_positive = hit(rng);
      tps += x.true_positive;
    }
    const std::size_t positives = tps + static_cast<std::size_t>(extra(rng));
    exact += average_precision(d, positives) == brute_force_ap(d, positives);
  }
  return {exact == 50, fmt("%d of 50 random rankings match the brute-force oracle exactly", exact)};
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / "hoi_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  int failures = 0;
  const auto report = [&](int n, const char* name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("CRITERION %d %s %s: %s [%.1f s]\n", n, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "simplex conservation", simplex_conservation);
  report(2, "terminal convergence", terminal_convergence);
  report(3, "closed-form jump vs iterated steps", jump_consistency);
  report(4, "posterior fidelity", posterior_fidelity);
  report(5, "S_k recurrence", s_recurrence);
  report(6, "gradient correctness", gradient_check);
  report(7, "compose/decompose round trip", round_trip);

  BenchmarkRuns runs;
  bool trained = false;
  const auto ensure_runs = [&] {
    if (!trained) runs = run_benchmark(scratch / "bench");
    trained = true;
  };
  report(8, "learning sanity", [&] {
    ensure_runs();
    return learning_sanity(runs);
  });
  report(9, "ablation echoes", [&] {
    ensure_runs();
    return ablation_echoes(runs);
  });
  report(10, "reproducibility", [&] { return reproducibility(scratch / "repro"); });
  report(11, "metric correctness", metric_correctness);

  std::printf("%d of 11 criteria passed\n", 11 - failures);
  if (failures == 0) fs::remove_all(scratch);
  return failures == 0 ? 0 : 1;
}
