#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hoi/inference.hpp"
#include "hoi/synthetic_world.hpp"

namespace hoi {

struct RankedDetection {
  double score = 0.0;
  bool true_positive = false;
};

// Area under the interpolated precision envelope (continuous VOC style).
// Detections are ranked by descending score; equal scores keep input order.
// Returns 0 when positives == 0.
double average_precision(std::span<const RankedDetection> detections, std::size_t positives);

struct ClassCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};

struct MetricsReport {
  std::size_t pairs = 0;
  std::size_t objects = 0;
  double object_accuracy = 0.0;  // over objects
  std::vector<ClassCounts> interaction;  // per w, ignoring the object class
  ClassCounts triplet;                   // micro counts over (pair, h, w)
  double map = 0.0;
  double map_rare = 0.0;
  double map_nonrare = 0.0;
  std::size_t classes = 0;  // (h, w) combinations with a ground-truth positive
  std::size_t rare_classes = 0;
  std::vector<double> class_ap;     // h * w, NaN where no positive exists
};

// Pairs in `truth` and `result.pairs` must be aligned by position.
MetricsReport evaluate(const DetectionResult& result, std::span<const PairSample> truth,
                       const AffinityTable& affinity);

struct EvalRun {
  DetectionResult detections;
  MetricsReport report;
};

// Reverse-samples every pair from its start image (the prior-based noisy image,
// or the uniform image), post-processes, and scores against the labels.
EvalRun run_evaluation(const CleanPredictor& predictor, std::span<const PairSample> pairs,
                       const AffinityTable& affinity, const NoiseSchedule& sched,
                       const ReverseOptions& opts, bool uniform_init, ScoreMode score);

// Post-processes the start images themselves, with no model involved.
EvalRun prior_only_evaluation(std::span<const PairSample> pairs, const AffinityTable& affinity,
                              ScoreMode score);

// One JSON object per pair: pair_id, object_id, predicted_object,
// interaction bitmask (bit w set when present), scores.
void write_results(const std::filesystem::path& file, const DetectionResult& result);
void write_metrics(const std::filesystem::path& dir, const MetricsReport& report);
std::string metrics_table(const MetricsReport& report);

}  // namespace hoi
