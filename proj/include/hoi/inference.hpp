#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <optional>
#include <span>
#include <vector>

#include "hoi/denoiser.hpp"
#include "hoi/diffusion.hpp"
#include "hoi/synthetic_world.hpp"

namespace hoi {

// compose(prior, all-0.5 interactions): the reverse process starts here.
HoiImage init_noisy_hoi_image(const ObjectDist& prior, std::size_t w);
HoiImage uniform_hoi_image(HoiShape shape);

enum class ReverseMode { deterministic, stochastic };

/// Images Î_K .. Î_0 of one pair, in that order.
struct TrajectoryRecord {
  std::vector<int> steps;
  std::vector<HoiImage> images;
};

/// Predicts clean images for a batch of current states. `ids` index the
/// caller's sample list, so predictors can look up per-sample context.
class CleanPredictor {
 public:
  virtual ~CleanPredictor() = default;
  virtual HoiShape shape() const = 0;
  // rows of `current` are flattened H x W x 2 states; returns the same layout.
  virtual Mat predict(const Mat& current, std::span<const std::size_t> ids, int k) const = 0;
};

class ModelPredictor final : public CleanPredictor {
 public:
  ModelPredictor(const DenoiserParams& params, std::vector<std::vector<double>> appearance);
  HoiShape shape() const override { return params_.config().shape(); }
  Mat predict(const Mat& current, std::span<const std::size_t> ids, int k) const override;

 private:
  const DenoiserParams& params_;
  std::vector<std::vector<double>> appearance_;
};

// Returns the supplied images whatever the input; used to validate the
// sampling and metric path end to end.
class OraclePredictor final : public CleanPredictor {
 public:
  OraclePredictor(HoiShape shape, std::vector<HoiImage> truth);
  HoiShape shape() const override { return shape_; }
  Mat predict(const Mat& current, std::span<const std::size_t> ids, int k) const override;

 private:
  HoiShape shape_;
  std::vector<HoiImage> truth_;
};

struct ReverseOptions {
  ReverseMode mode = ReverseMode::deterministic;
  ProcessKind process = ProcessKind::multinomial;
  std::uint64_t seed = 0;
  std::size_t chunk = 32;           // samples per denoiser batch
  std::vector<std::size_t> record;  // sample ids whose trajectory is kept
};

struct ReverseOutput {
  std::vector<HoiImage> images;                  // Î_0 per sample
  std::vector<std::optional<TrajectoryRecord>> trajectories;  // per sample, if recorded
};

// Runs the reverse chain from `inits` (one per sample). Multinomial mode:
// Î_{k-1} = abar_{k-1} d̂_0 + (1 - abar_{k-1}) n with n = init (deterministic)
// or a fresh scaled multinomial draw from init with round(S_{k-1} T) trials
// (stochastic). Gaussian mode ignores `inits` apart from their count, starts
// from N(0, I) and steps along the Gaussian posterior. Sample i draws from
// derive_stream(seed, i), so results do not depend on chunking.
ReverseOutput reverse_sample_batch(const CleanPredictor& predictor,
                                   std::span<const HoiImage> inits, const NoiseSchedule& sched,
                                   const ReverseOptions& opts);

struct ReverseResult {
  HoiImage image;
  std::optional<TrajectoryRecord> trajectory;
};

ReverseResult reverse_sample(const HoiImage& init, const Conditioning& cond,
                             const DenoiserParams& params, const NoiseSchedule& sched,
                             ReverseMode mode, Rng& rng, bool record);

// Binary P6 pixmap of one image: H rows, 2W columns (presence block then
// absence block), gray levels from log(x + 1e-8) min-max scaled to 0..255.
std::string trajectory_pixmap(const HoiImage& img, int step);

// step_XXX.ppm per recorded image plus values.tsv (step, h, w, c, value).
void write_trajectory(const std::filesystem::path& dir, const TrajectoryRecord& record);
TrajectoryRecord read_trajectory_values(const std::filesystem::path& file, HoiShape shape);

enum class ScoreMode { presence_times_object, presence_only };

struct PairDetection {
  int pair_id = 0;
  int object_id = 0;
  int predicted_object = 0;
  std::vector<bool> interactions;  // length W
  std::vector<double> scores;      // length W, in [0, 1]
};

struct DetectionResult {
  std::vector<PairDetection> pairs;  // input order
  std::vector<std::pair<int, int>> objects;  // (object_id, predicted class), ascending id
};

// Groups pairs by object id, averages each group's images, takes the argmax
// row mass (lowest index on ties) as the class, and reads presence as
// Î[h, w, 0] > Î[h, w, 1] on that row.
DetectionResult postprocess(std::span<const PairSample> pairs, std::span<const HoiImage> images,
                            ScoreMode score_mode = ScoreMode::presence_times_object);

}  // namespace hoi
