#include "hoi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include <json.hpp>

#include "hoi/kv_config.hpp"

namespace hoi {

double average_precision(std::span<const RankedDetection> detections, std::size_t positives) {
  if (positives == 0) return 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  const std::size_t n = order.size();
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (detections[order[i]].true_positive) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  // Recall rises by 1/positives at each true positive.
  double area = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (detections[order[i]].true_positive) area += precision[i];
  }
  return area / static_cast<double>(positives);
}

double ClassCounts::precision() const {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double ClassCounts::recall() const {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double ClassCounts::f1() const {
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
}

MetricsReport evaluate(const DetectionResult& result, std::span<const PairSample> truth,
                       const AffinityTable& affinity) {
  if (result.pairs.size() != truth.size()) throw DimensionError("results and ground truth differ in length");
  const HoiShape shape = affinity.shape;
  MetricsReport r;
  r.pairs = truth.size();
  r.interaction.assign(shape.w, {});

  std::vector<std::vector<RankedDetection>> ranked(shape.h * shape.w);
  std::vector<std::size_t> positives(shape.h * shape.w, 0);
  std::map<int, int> true_class;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const PairSample& t = truth[i];
    const PairDetection& d = result.pairs[i];
    if (d.pair_id != t.pair_id) throw DimensionError("results are not aligned with the ground truth");
    if (d.interactions.size() != shape.w || d.scores.size() != shape.w) {
      throw DimensionError("detection width does not match the affinity table");
    }
    true_class[t.object_id] = t.true_object;
    const bool object_ok = d.predicted_object == t.true_object;
    for (std::size_t w = 0; w < shape.w; ++w) {
      const bool gt = t.has_interaction(static_cast<int>(w));
      const bool pred = d.interactions[w];
      ClassCounts& c = r.interaction[w];
      if (pred && gt) ++c.tp;
      if (pred && !gt) ++c.fp;
      if (!pred && gt) ++c.fn;

      const bool triplet_hit = object_ok && gt;
      if (pred && triplet_hit) ++r.triplet.tp;
      if (pred && !triplet_hit) ++r.triplet.fp;
      if (gt && !(pred && object_ok)) ++r.triplet.fn;

      if (gt) ++positives[static_cast<std::size_t>(t.true_object) * shape.w + w];
      ranked[static_cast<std::size_t>(d.predicted_object) * shape.w + w].push_back({d.scores[w], triplet_hit});
    }
  }

  std::size_t correct = 0;
  for (const auto& [object_id, predicted] : result.objects) {
    const auto it = true_class.find(object_id);
    if (it == true_class.end()) throw DimensionError("object " + std::to_string(object_id) + " has no ground truth");
    if (it->second == predicted) ++correct;
  }
  r.objects = result.objects.size();
  r.object_accuracy = r.objects == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(r.objects);

  r.class_ap.assign(shape.h * shape.w, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0, sum_rare = 0.0, sum_common = 0.0;
  for (std::size_t h = 0; h < shape.h; ++h) {
    for (std::size_t w = 0; w < shape.w; ++w) {
      const std::size_t cls = h * shape.w + w;
      if (positives[cls] == 0) continue;
      const double ap = average_precision(ranked[cls], positives[cls]);
      r.class_ap[cls] = ap;
      ++r.classes;
      sum += ap;
      if (affinity.is_rare(h, w)) {
        ++r.rare_classes;
        sum_rare += ap;
      } else {
        sum_common += ap;
      }
    }
  }
  const std::size_t common = r.classes - r.rare_classes;
  r.map = r.classes == 0 ? 0.0 : sum / static_cast<double>(r.classes);
  r.map_rare = r.rare_classes == 0 ? 0.0 : sum_rare / static_cast<double>(r.rare_classes);
  r.map_nonrare = common == 0 ? 0.0 : sum_common / static_cast<double>(common);
  return r;
}

void write_results(const std::filesystem::path& file, const DetectionResult& result) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  for (const PairDetection& d : result.pairs) {
    std::uint64_t mask = 0;
    for (std::size_t w = 0; w < d.interactions.size(); ++w)
      if (d.interactions[w]) mask |= std::uint64_t{1} << w;
    nlohmann::ordered_json j;
    j["pair_id"] = d.pair_id;
    j["object_id"] = d.object_id;
    j["predicted_object"] = d.predicted_object;
    j["interactions"] = mask;
    j["scores"] = d.scores;
    out << j.dump() << '\n';
  }
}

std::string metrics_table(const MetricsReport& r) {
  std::string s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "pairs %zu  objects %zu  object accuracy %.4f\n", r.pairs, r.objects,
                r.object_accuracy);
  s += buf;
  std::snprintf(buf, sizeof buf, "triplet  P %.4f  R %.4f  F1 %.4f\n", r.triplet.precision(),
                r.triplet.recall(), r.triplet.f1());
  s += buf;
  std::snprintf(buf, sizeof buf, "mAP %.4f  (rare %.4f over %zu, non-rare %.4f over %zu)\n", r.map,
                r.map_rare, r.rare_classes, r.map_nonrare, r.classes - r.rare_classes);
  s += buf;
  s += "interaction  precision  recall  f1\n";
  for (std::size_t w = 0; w < r.interaction.size(); ++w) {
    const ClassCounts& c = r.interaction[w];
    std::snprintf(buf, sizeof buf, "%11zu  %9.4f  %6.4f  %.4f\n", w, c.precision(), c.recall(), c.f1());
    s += buf;
  }
  return s;
}

void write_metrics(const std::filesystem::path& dir, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.txt", std::ios::trunc);
    if (!out) throw IoError("cannot write metrics table");
    out << metrics_table(r);
  }
  KeyValueConfig kv;
  kv.set("pairs", std::to_string(r.pairs));
  kv.set("objects", std::to_string(r.objects));
  kv.set_double("object_accuracy", r.object_accuracy);
  kv.set_double("triplet.precision", r.triplet.precision());
  kv.set_double("triplet.recall", r.triplet.recall());
  kv.set_double("triplet.f1", r.triplet.f1());
  kv.set("triplet.tp", std::to_string(r.triplet.tp));
  kv.set("triplet.fp", std::to_string(r.triplet.fp));
  kv.set("triplet.fn", std::to_string(r.triplet.fn));
  kv.set_double("map", r.map);
  kv.set_double("map.rare", r.map_rare);
  kv.set_double("map.nonrare", r.map_nonrare);
  kv.set("map.classes", std::to_string(r.classes));
  kv.set("map.rare_classes", std::to_string(r.rare_classes));
  for (std::size_t w = 0; w < r.interaction.size(); ++w) {
    const std::string p = "interaction." + std::to_string(w) + ".";
    kv.set_double(p + "precision", r.interaction[w].precision());
    kv.set_double(p + "recall", r.interaction[w].recall());
    kv.set_double(p + "f1", r.interaction[w].f1());
  }
  kv.save(dir / "metrics.kv");
}

}  // namespace hoi

namespace hoi {

namespace {

std::vector<HoiImage> start_images(std::span<const PairSample> pairs, HoiShape shape, bool uniform_init) {
  std::vector<HoiImage> out;
  out.reserve(pairs.size());
  for (const PairSample& p : pairs)
    out.push_back(uniform_init ? uniform_hoi_image(shape) : init_noisy_hoi_image(p.detector_prior, shape.w));
  return out;
}

}  // namespace

EvalRun run_evaluation(const CleanPredictor& predictor, std::span<const PairSample> pairs,
                       const AffinityTable& affinity, const NoiseSchedule& sched,
                       const ReverseOptions& opts, bool uniform_init, ScoreMode score) {
  const std::vector<HoiImage> inits = start_images(pairs, affinity.shape, uniform_init);
  const ReverseOutput out = reverse_sample_batch(predictor, inits, sched, opts);
  EvalRun run;
  run.detections = postprocess(pairs, out.images, score);
  run.report = evaluate(run.detections, pairs, affinity);
  return run;
}

EvalRun prior_only_evaluation(std::span<const PairSample> pairs, const AffinityTable& affinity,
                              ScoreMode score) {
  const std::vector<HoiImage> inits = start_images(pairs, affinity.shape, false);
  EvalRun run;
  run.detections = postprocess(pairs, inits, score);
  run.report = evaluate(run.detections, pairs, affinity);
  return run;
}

}  // namespace hoi
