#include "hoi/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

#include "hoi/checkpoint.hpp"
#include "hoi/inference.hpp"
#include "hoi/parallel.hpp"

namespace hoi {

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::clean: return "clean";
    case LossMode::prev: return "prev";
    case LossMode::both: return "both";
  }
  return "clean";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "clean") return LossMode::clean;
  if (name == "prev") return LossMode::prev;
  if (name == "both") return LossMode::both;
  throw ConfigError("unknown loss mode '" + std::string(name) + "' (clean, prev, both)");
}

void TrainConfig::check() const {
  if (m_samples == 0) throw ConfigError("train.m_samples must be >= 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (chunk == 0) throw ConfigError("train.chunk must be >= 1");
  if (!(optimizer.learning_rate >= 0.0) || !std::isfinite(optimizer.learning_rate)) {
    throw ConfigError("train.learning_rate must be finite and >= 0");
  }
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer moment decays must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
}

void optimizer_step(std::vector<double>& params, std::span<const double> grads,
                    OptimizerState& state, const AdamWConfig& cfg) {
  if (grads.size() != params.size()) throw DimensionError("gradient length does not match parameters");
  for (double g : grads) {
    if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = params[i] * decay - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

HoiImage training_init_image(const PairSample& pair, HoiShape shape, InitKind init) {
  return init == InitKind::uniform ? uniform_hoi_image(shape)
                                   : init_noisy_hoi_image(pair.detector_prior, shape.w);
}

namespace {

std::vector<double> to_vec(const HoiImage& img) { return {img.data().begin(), img.data().end()}; }

}  // namespace

std::vector<TrainingTuple> make_training_targets(const PairSample& pair, HoiShape shape,
                                                 const NoiseSchedule& sched,
                                                 const TrainConfig& cfg, Rng& rng) {
  const int K = sched.steps();
  const HoiImage clean = ground_truth_image(pair, shape);
  const HoiImage init = training_init_image(pair, shape, cfg.init);
  const std::vector<double> clean_v = to_vec(clean);
  const std::vector<double> init_v = to_vec(init);
  std::uniform_int_distribution<int> pick(1, K);
  std::vector<TrainingTuple> out;
  out.reserve(cfg.full_sweep ? cfg.m_samples * static_cast<std::size_t>(K) : cfg.m_samples);

  for (std::size_t m = 0; m < cfg.m_samples; ++m) {
    if (cfg.full_sweep) {
      if (cfg.process == ProcessKind::gaussian) {
        std::vector<double> x = clean_v;
        for (int k = 1; k <= K; ++k) {
          std::vector<double> next = gaussian_forward_step(x, k, sched, rng);
          out.push_back({k, next, clean_v, x, init_v});
          x = std::move(next);
        }
      } else {
        HoiImage x = clean;
        for (int k = 1; k <= K; ++k) {
          HoiImage next = forward_step_image(x, init, k, sched, rng);
          out.push_back({k, to_vec(next), clean_v, to_vec(x), init_v});
          x = std::move(next);
        }
      }
      continue;
    }
    const int k = pick(rng);
    if (cfg.process == ProcessKind::gaussian) {
      std::vector<double> prev = k == 1 ? clean_v : gaussian_forward_jump(clean_v, k - 1, sched, rng);
      std::vector<double> noisy = gaussian_forward_step(prev, k, sched, rng);
      out.push_back({k, std::move(noisy), clean_v, std::move(prev), init_v});
    } else {
      const HoiImage prev = forward_jump_image(clean, init, k - 1, sched, rng);
      const HoiImage noisy = forward_step_image(prev, init, k, sched, rng);
      out.push_back({k, to_vec(noisy), clean_v, to_vec(prev), init_v});
    }
  }
  return out;
}

double mse_loss(std::span<const double> pred, std::span<const double> target, std::span<double> grad) {
  if (pred.size() != target.size() || pred.empty()) throw DimensionError("mse operands differ in shape");
  if (!grad.empty() && grad.size() != pred.size()) throw DimensionError("gradient buffer has the wrong length");
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sum += d * d;
    if (!grad.empty()) grad[i] = 2.0 * d / n;
  }
  return sum / n;
}

LossTerms tuple_loss(std::span<const double> pred_clean, const TrainingTuple& tuple,
                     const NoiseSchedule& sched, const TrainConfig& cfg) {
  const std::size_t n = pred_clean.size();
  LossTerms out;
  out.grad.assign(n, 0.0);
  std::vector<double> g(n);
  if (cfg.loss_mode != LossMode::prev) {
    out.loss += mse_loss(pred_clean, tuple.clean, g);
    for (std::size_t i = 0; i < n; ++i) out.grad[i] += g[i];
  }
  if (cfg.loss_mode != LossMode::clean) {
    // The previous state implied by the prediction under the reverse update.
    std::vector<double> implied(n);
    double coef = 0.0;
    if (cfg.process == ProcessKind::gaussian) {
      const GaussianPosterior post = gaussian_posterior(tuple.noisy, pred_clean, tuple.k, sched);
      implied = post.mean;
      coef = post.coef_d0;
    } else {
      coef = sched.alpha_bar(tuple.k - 1);
      for (std::size_t i = 0; i < n; ++i) implied[i] = coef * pred_clean[i] + (1.0 - coef) * tuple.init[i];
    }
    out.loss += mse_loss(implied, tuple.prev, g);
    for (std::size_t i = 0; i < n; ++i) out.grad[i] += coef * g[i];
  }
  return out;
}

namespace {

constexpr char kOptMagic[4] = {'H', 'I', 'D', 'O'};
constexpr std::uint32_t kOptVersion = 1;

struct ResumePoint {
  OptimizerState state;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
  double loss_sum = 0.0;
  std::uint64_t loss_count = 0;
};

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("optimizer state truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

ResumePoint load_resume(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read optimizer state: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kOptMagic)) throw IoError("not an optimizer state file");
  if (get_u64(in) != kOptVersion) throw IoError("unsupported optimizer state version");
  ResumePoint r;
  r.state.step = get_u64(in);
  r.epoch = get_u64(in);
  r.batch = get_u64(in);
  r.loss_sum = std::bit_cast<double>(get_u64(in));
  r.loss_count = get_u64(in);
  const std::uint64_t n = get_u64(in);
  if (n != count && n != 0) throw IoError("optimizer state does not match the model size");
  r.state.m.resize(n);
  r.state.v.resize(n);
  for (double& x : r.state.m) x = std::bit_cast<double>(get_u64(in));
  for (double& x : r.state.v) x = std::bit_cast<double>(get_u64(in));
  return r;
}

std::string log_line(std::uint64_t epoch, std::uint64_t step, double loss, long long wall_ms) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%llu\t%llu\t%.17g\t%lld\n", static_cast<unsigned long long>(epoch),
                static_cast<unsigned long long>(step), loss, wall_ms);
  return buf;
}

// Stream for pair slot `slot` of batch `batch` in epoch `epoch`.
Rng tuple_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch, std::uint64_t slot) {
  return derive_stream(mix_seed(mix_seed(seed, epoch + 1), batch + 1), slot);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_stream(mix_seed(seed, 0x0FDE5u), epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

void save_optimizer_state(const std::filesystem::path& path, const OptimizerState& state,
                          std::uint64_t epoch, std::uint64_t batch, double loss_sum,
                          std::uint64_t loss_count) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write optimizer state: " + tmp.string());
    out.write(kOptMagic, 4);
    put_u64(out, kOptVersion);
    put_u64(out, state.step);
    put_u64(out, epoch);
    put_u64(out, batch);
    put_u64(out, std::bit_cast<std::uint64_t>(loss_sum));
    put_u64(out, loss_count);
    put_u64(out, state.m.size());
    for (double x : state.m) put_u64(out, std::bit_cast<std::uint64_t>(x));
    for (double x : state.v) put_u64(out, std::bit_cast<std::uint64_t>(x));
    if (!out) throw IoError("failed writing optimizer state");
  }
  std::filesystem::rename(tmp, path);
}

TrainSummary train(std::span<const PairSample> pairs, HoiShape shape, DenoiserParams& params,
                   const NoiseSchedule& sched, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.check();
  if (pairs.empty()) throw ConfigError("training set is empty");
  if (!(params.config().shape() == shape)) throw DimensionError("model shape does not match the dataset");
  if (static_cast<int>(params.config().steps) != sched.steps()) {
    throw ConfigError("model step count does not match the schedule");
  }
  std::filesystem::create_directories(opts.out_dir);
  const auto ckpt_path = opts.out_dir / "checkpoint.hidf";
  const auto opt_path = opts.out_dir / "optimizer.state";
  const auto log_path = opts.out_dir / "train_log.tsv";

  ResumePoint at;
  if (opts.resume) {
    params = load_checkpoint(ckpt_path);
    at = load_resume(opt_path, params.parameter_count());
  }
  std::ofstream log(log_path, opts.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write training log");

  const std::size_t n_pairs = pairs.size();
  const std::size_t batches = (n_pairs + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t P = params.parameter_count();
  const auto t0 = std::chrono::steady_clock::now();
  const auto wall = [&] {
    return static_cast<long long>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count());
  };

  TrainSummary summary;
  summary.epochs_completed = at.epoch;
  OptimizerState& state = at.state;
  std::vector<double> last_good = params.values();

  for (std::uint64_t epoch = at.epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, n_pairs);
    for (std::uint64_t b = at.batch; b < batches; ++b) {
      if (opts.stop != nullptr && opts.stop->load()) {
        save_checkpoint(ckpt_path, params);
        save_optimizer_state(opt_path, state, epoch, b, at.loss_sum, at.loss_count);
        summary.interrupted = true;
        summary.steps = state.step;
        return summary;
      }
      // Batches wrap around the shuffled order so every step sees batch_size pairs.
      std::vector<TrainingTuple> tuples;
      std::vector<const PairSample*> owner;
      for (std::size_t slot = 0; slot < cfg.batch_size; ++slot) {
        const PairSample& pair = pairs[order[(b * cfg.batch_size + slot) % n_pairs]];
        Rng rng = tuple_stream(cfg.seed, epoch, b, slot);
        auto t = make_training_targets(pair, shape, sched, cfg, rng);
        owner.insert(owner.end(), t.size(), &pair);
        std::move(t.begin(), t.end(), std::back_inserter(tuples));
      }

      const std::size_t n = tuples.size();
      const std::size_t chunks = (n + cfg.chunk - 1) / cfg.chunk;
      std::vector<std::vector<double>> chunk_grads(chunks);
      std::vector<double> chunk_loss(chunks, 0.0);
      bool finite = true;
      try {
        parallel_for(chunks, [&](std::size_t c) {
          const std::size_t lo = c * cfg.chunk;
          const std::size_t hi = std::min(n, lo + cfg.chunk);
          DenoiseBatch batch(hi - lo, params.config());
          for (std::size_t i = lo; i < hi; ++i) batch.set(i - lo, tuples[i].noisy, owner[i]->appearance, tuples[i].k);
          ForwardCache cache;
          const Mat pred = denoise_batch(params, batch, &cache);
          Mat grad_out(pred.rows(), pred.cols());
          double loss = 0.0;
          for (std::size_t i = lo; i < hi; ++i) {
            const auto r = static_cast<Eigen::Index>(i - lo);
            const std::span<const double> row(pred.row(r).data(), static_cast<std::size_t>(pred.cols()));
            LossTerms terms = tuple_loss(row, tuples[i], sched, cfg);
            loss += terms.loss;
            for (std::size_t j = 0; j < terms.grad.size(); ++j)
              grad_out(r, static_cast<Eigen::Index>(j)) = terms.grad[j] / static_cast<double>(n);
          }
          chunk_loss[c] = loss;
          chunk_grads[c].assign(P, 0.0);
          backward(params, cache, grad_out, chunk_grads[c]);
        });
      } catch (const NonFiniteError&) {
        finite = false;
      }
      double loss = 0.0;
      for (double l : chunk_loss) loss += l;
      loss /= static_cast<double>(n);
      if (!finite || !std::isfinite(loss)) {
        params.values() = last_good;
        save_checkpoint(ckpt_path, params);
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(state.step + 1) + "; last good checkpoint kept");
      }
      std::vector<double>& grads = params.grads();
      std::fill(grads.begin(), grads.end(), 0.0);
      for (const auto& g : chunk_grads)
        for (std::size_t j = 0; j < P; ++j) grads[j] += g[j];

      last_good = params.values();
      optimizer_step(params.values(), grads, state, cfg.optimizer);
      at.loss_sum += loss;
      ++at.loss_count;
      if (cfg.log_every != 0 && state.step % cfg.log_every == 0) {
        log << log_line(epoch, state.step, loss, wall());
        log.flush();
      }
    }
    at.batch = 0;
    const double epoch_loss = at.loss_sum / static_cast<double>(std::max<std::uint64_t>(1, at.loss_count));
    at.loss_sum = 0.0;
    at.loss_count = 0;
    log << log_line(epoch + 1, state.step, epoch_loss, wall());
    log.flush();
    if (opts.progress != nullptr) {
      *opts.progress << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << epoch_loss << '\n';
    }
    save_checkpoint(ckpt_path, params);
    save_optimizer_state(opt_path, state, epoch + 1, 0, 0.0, 0);
    summary.epochs_completed = epoch + 1;
    summary.last_epoch_loss = epoch_loss;
  }
  summary.steps = state.step;
  return summary;
}

}  // namespace hoi
