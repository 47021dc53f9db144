#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hoi/denoiser.hpp"
#include "hoi/diffusion.hpp"
#include "hoi/synthetic_world.hpp"

namespace hoi {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

enum class LossMode { clean, prev, both };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

// Where the forward process is pulled towards during training.
enum class InitKind { prior, uniform };

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  std::size_t m_samples = 10;
  std::size_t batch_size = 8;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  LossMode loss_mode = LossMode::clean;
  ProcessKind process = ProcessKind::multinomial;
  InitKind init = InitKind::prior;
  bool full_sweep = false;  // every k = 1..K per trajectory instead of one sampled k
  std::size_t chunk = 40;   // tuples per forward/backward batch; fixed for determinism
  std::size_t log_every = 0;  // also log every n steps; 0 logs epochs only
  AdamWConfig optimizer;

  void check() const;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps), with bias-corrected moments.
void optimizer_step(std::vector<double>& params, std::span<const double> grads,
                    OptimizerState& state, const AdamWConfig& cfg);

struct TrainingTuple {
  int k = 0;
  std::vector<double> noisy;  // I_k (multinomial) or x_k (Gaussian)
  std::vector<double> clean;  // I_0
  std::vector<double> prev;   // I_{k-1}
  std::vector<double> init;   // d_init image the chain is pulled towards
};

HoiImage training_init_image(const PairSample& pair, HoiShape shape, InitKind init);

// M trajectories of the whole image. Each picks k uniformly from 1..K and
// emits (k, I_k, I_0, I_{k-1}); full-sweep mode emits every k of each trajectory.
std::vector<TrainingTuple> make_training_targets(const PairSample& pair, HoiShape shape,
                                                 const NoiseSchedule& sched,
                                                 const TrainConfig& cfg, Rng& rng);

// Mean squared difference; `grad` (optional, same length) receives d loss / d pred.
double mse_loss(std::span<const double> pred, std::span<const double> target,
                std::span<double> grad = {});

struct LossTerms {
  double loss = 0.0;
  std::vector<double> grad;  // at the clean-image prediction
};

// Loss of one tuple given the model's clean prediction.
LossTerms tuple_loss(std::span<const double> pred_clean, const TrainingTuple& tuple,
                     const NoiseSchedule& sched, const TrainConfig& cfg);

struct TrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  const std::atomic<bool>* stop = nullptr;  // polled between steps
  std::ostream* progress = nullptr;
};

struct TrainSummary {
  std::size_t epochs_completed = 0;
  std::uint64_t steps = 0;
  double last_epoch_loss = 0.0;
  bool interrupted = false;
};

// Files in out_dir: checkpoint.hidf (model), optimizer.state (resume point),
// train_log.tsv (epoch, step, loss, wall_ms). Checkpoints are written at the
// end of every epoch and on interruption.
TrainSummary train(std::span<const PairSample> pairs, HoiShape shape, DenoiserParams& params,
                   const NoiseSchedule& sched, const TrainConfig& cfg, const TrainOptions& opts);

void save_optimizer_state(const std::filesystem::path& path, const OptimizerState& state,
                          std::uint64_t epoch, std::uint64_t batch, double loss_sum,
                          std::uint64_t loss_count);

}  // namespace hoi
