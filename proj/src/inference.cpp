#include "hoi/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "hoi/parallel.hpp"

namespace hoi {

HoiImage init_noisy_hoi_image(const ObjectDist& prior, std::size_t w) {
  if (w == 0) throw DimensionError("interaction count must be >= 1");
  return compose(prior, InteractionMatrix::all_half(w));
}

HoiImage uniform_hoi_image(HoiShape shape) {
  shape.check();
  return compose(ObjectDist::uniform(shape.h), InteractionMatrix::all_half(shape.w));
}

ModelPredictor::ModelPredictor(const DenoiserParams& params,
                               std::vector<std::vector<double>> appearance)
    : params_(params), appearance_(std::move(appearance)) {
  for (const auto& a : appearance_) {
    if (a.size() != params_.config().d_appearance) {
      throw DimensionError("appearance length does not match the model");
    }
  }
}

Mat ModelPredictor::predict(const Mat& current, std::span<const std::size_t> ids, int k) const {
  DenoiseBatch batch(ids.size(), params_.config());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const std::span<const double> row(current.row(static_cast<Eigen::Index>(r)).data(),
                                      static_cast<std::size_t>(current.cols()));
    batch.set(r, row, appearance_.at(ids[r]), k);
  }
  return denoise_batch(params_, batch);
}

OraclePredictor::OraclePredictor(HoiShape shape, std::vector<HoiImage> truth)
    : shape_(shape), truth_(std::move(truth)) {
  for (const HoiImage& t : truth_) {
    if (!(t.shape() == shape_)) throw DimensionError("oracle image shape mismatch");
  }
}

Mat OraclePredictor::predict(const Mat& current, std::span<const std::size_t> ids, int) const {
  Mat out(current.rows(), current.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto data = truth_.at(ids[r]).data();
    std::copy(data.begin(), data.end(), out.row(static_cast<Eigen::Index>(r)).data());
  }
  return out;
}

namespace {

std::span<const double> row_span(const Mat& m, std::size_t r) {
  return {m.row(static_cast<Eigen::Index>(r)).data(), static_cast<std::size_t>(m.cols())};
}

HoiImage checked_image(HoiShape shape, std::span<const double> row, int k) {
  const ValidityReport rep = validate(shape, row, kInternalTolerance);
  if (!rep.pass) {
    for (double x : row) {
      if (!std::isfinite(x)) throw NonFiniteError("reverse chain went non-finite at step " + std::to_string(k));
    }
    throw InvalidImageError("reverse chain left the valid set at step " + std::to_string(k) + ": " + rep.message);
  }
  return HoiImage::from_data(shape, std::vector<double>(row.begin(), row.end()), kInternalTolerance);
}

void run_chunk(const CleanPredictor& predictor, std::span<const HoiImage> inits,
               const NoiseSchedule& sched, const ReverseOptions& opts, std::size_t begin,
               std::size_t end, ReverseOutput& out) {
  const HoiShape shape = predictor.shape();
  const std::size_t n = end - begin;
  const std::size_t len = shape.size();
  const int K = sched.steps();
  std::vector<std::size_t> ids(n);
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = begin + i;
    rngs.push_back(derive_stream(opts.seed, begin + i));
  }
  std::vector<char> keep(n, 0);
  for (std::size_t id : opts.record) {
    if (id >= begin && id < end) keep[id - begin] = 1;
  }

  Mat current(n, len);
  if (opts.process == ProcessKind::gaussian) {
    for (std::size_t i = 0; i < n; ++i) {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t j = 0; j < len; ++j) current(i, j) = normal(rngs[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto data = inits[begin + i].data();
      std::copy(data.begin(), data.end(), current.row(static_cast<Eigen::Index>(i)).data());
      if (keep[i]) {
        auto& rec = out.trajectories[begin + i].emplace();
        rec.steps.push_back(K);
        rec.images.push_back(inits[begin + i]);
      }
    }
  }

  for (int k = K; k >= 1; --k) {
    const Mat clean = predictor.predict(current, ids, k);
    if (k == 1) {
      for (std::size_t i = 0; i < n; ++i) {
        out.images[begin + i] = checked_image(shape, row_span(clean, i), 0);
        if (keep[i]) {
          out.trajectories[begin + i]->steps.push_back(0);
          out.trajectories[begin + i]->images.push_back(out.images[begin + i]);
        }
      }
      break;
    }
    if (opts.process == ProcessKind::gaussian) {
      for (std::size_t i = 0; i < n; ++i) {
        const GaussianPosterior post =
            gaussian_posterior(row_span(current, i), row_span(clean, i), k, sched);
        std::normal_distribution<double> normal(0.0, 1.0);
        const double sd = std::sqrt(post.variance);
        for (std::size_t j = 0; j < len; ++j) {
          double x = post.mean[j];
          if (opts.mode == ReverseMode::stochastic) x += sd * normal(rngs[i]);
          current(i, j) = x;
        }
      }
      if (!current.allFinite()) throw NonFiniteError("reverse chain went non-finite at step " + std::to_string(k - 1));
      continue;
    }
    const double abar = sched.alpha_bar(k - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const HoiImage& init = inits[begin + i];
      std::vector<double> noise(init.data().begin(), init.data().end());
      if (opts.mode == ReverseMode::stochastic) {
        const int trials = sched.jump_trials(k - 1);
        for (std::size_t w = 0; w < shape.w; ++w) {
          const auto draw = sample_scaled_multinomial(init.slice(w), trials, rngs[i]);
          for (std::size_t h = 0; h < shape.h; ++h)
            for (std::size_t c = 0; c < 2; ++c) noise[shape.index(h, w, c)] = draw.values[h * 2 + c];
        }
      }
      for (std::size_t j = 0; j < len; ++j) current(i, j) = abar * clean(i, j) + (1.0 - abar) * noise[j];
      const HoiImage img = checked_image(shape, row_span(current, i), k - 1);
      if (keep[i]) {
        out.trajectories[begin + i]->steps.push_back(k - 1);
        out.trajectories[begin + i]->images.push_back(img);
      }
    }
  }
}

}  // namespace

ReverseOutput reverse_sample_batch(const CleanPredictor& predictor,
                                   std::span<const HoiImage> inits, const NoiseSchedule& sched,
                                   const ReverseOptions& opts) {
  const HoiShape shape = predictor.shape();
  for (const HoiImage& init : inits) {
    if (!(init.shape() == shape)) throw DimensionError("init image shape does not match the predictor");
  }
  if (opts.process == ProcessKind::gaussian && !opts.record.empty()) {
    throw ConfigError("trajectory recording needs the multinomial process");
  }
  if (sched.steps() < 1) throw RangeError("schedule has no steps");
  const std::size_t n = inits.size();
  ReverseOutput out;
  out.images.assign(n, uniform_hoi_image(shape));
  out.trajectories.assign(n, std::nullopt);
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    run_chunk(predictor, inits, sched, opts, c * chunk, std::min(n, (c + 1) * chunk), out);
  });
  return out;
}

ReverseResult reverse_sample(const HoiImage& init, const Conditioning& cond,
                             const DenoiserParams& params, const NoiseSchedule& sched,
                             ReverseMode mode, Rng& rng, bool record) {
  ModelPredictor predictor(params, {cond.appearance});
  ReverseOptions opts;
  opts.mode = mode;
  opts.seed = rng();
  if (record) opts.record = {0};
  const std::vector<HoiImage> inits{init};
  ReverseOutput out = reverse_sample_batch(predictor, inits, sched, opts);
  return {out.images[0], std::move(out.trajectories[0])};
}

DetectionResult postprocess(std::span<const PairSample> pairs, std::span<const HoiImage> images,
                            ScoreMode score_mode) {
  if (pairs.size() != images.size()) throw DimensionError("pairs and images differ in count");
  if (pairs.empty()) throw DimensionError("postprocess needs at least one pair");
  const HoiShape shape = images[0].shape();
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!(images[i].shape() == shape)) throw DimensionError("image shapes differ");
    groups[pairs[i].object_id].push_back(i);
  }

  DetectionResult result;
  result.pairs.resize(pairs.size());
  for (const auto& [object_id, members] : groups) {
    std::vector<double> row_mass(shape.h, 0.0);
    for (std::size_t h = 0; h < shape.h; ++h) {
      double total = 0.0;
      for (std::size_t i : members) {
        double mass = 0.0;
        for (std::size_t w = 0; w < shape.w; ++w)
          mass += images[i].at(h, w, kPresent) + images[i].at(h, w, kAbsent);
        total += mass;
      }
      row_mass[h] = total / static_cast<double>(members.size());
    }
    std::size_t best = 0;
    for (std::size_t h = 1; h < shape.h; ++h)
      if (row_mass[h] > row_mass[best]) best = h;
    result.objects.emplace_back(object_id, static_cast<int>(best));
    const double object_score = std::clamp(row_mass[best] / static_cast<double>(shape.w), 0.0, 1.0);

    for (std::size_t i : members) {
      PairDetection& d = result.pairs[i];
      d.pair_id = pairs[i].pair_id;
      d.object_id = object_id;
      d.predicted_object = static_cast<int>(best);
      d.interactions.resize(shape.w);
      d.scores.resize(shape.w);
      for (std::size_t w = 0; w < shape.w; ++w) {
        const double present = images[i].at(best, w, kPresent);
        d.interactions[w] = present > images[i].at(best, w, kAbsent);
        d.scores[w] = score_mode == ScoreMode::presence_only ? present : present * object_score;
      }
    }
  }
  return result;
}

}  // namespace hoi

namespace hoi {

std::string trajectory_pixmap(const HoiImage& img, int step) {
  const HoiShape shape = img.shape();
  std::vector<double> level(img.data().size());
  for (std::size_t i = 0; i < level.size(); ++i) level[i] = std::log(img.data()[i] + 1e-8);
  const auto [lo_it, hi_it] = std::minmax_element(level.begin(), level.end());
  const double lo = *lo_it;
  const double span = *hi_it - lo;
  std::string out = "P6\n# step " + std::to_string(step) +
                    ": gray = round(255 * (log(x + 1e-8) - min) / (max - min)) per file, "
                    "presence channel left, absence channel right\n" +
                    std::to_string(2 * shape.w) + " " + std::to_string(shape.h) + "\n255\n";
  for (std::size_t h = 0; h < shape.h; ++h) {
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t w = 0; w < shape.w; ++w) {
        const double t = span > 0.0 ? (level[shape.index(h, w, c)] - lo) / span : 0.0;
        const auto g = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t)));
        out.append(3, g);
      }
    }
  }
  return out;
}

void write_trajectory(const std::filesystem::path& dir, const TrajectoryRecord& record) {
  std::filesystem::create_directories(dir);
  std::ofstream values(dir / "values.tsv", std::ios::trunc);
  if (!values) throw IoError("cannot write " + (dir / "values.tsv").string());
  values << "step\th\tw\tc\tvalue\n";
  char buf[64];
  for (std::size_t i = 0; i < record.images.size(); ++i) {
    const int step = record.steps[i];
    const HoiImage& img = record.images[i];
    std::snprintf(buf, sizeof buf, "step_%03d.ppm", step);
    std::ofstream ppm(dir / buf, std::ios::binary | std::ios::trunc);
    if (!ppm) throw IoError("cannot write pixmap");
    ppm << trajectory_pixmap(img, step);
    const HoiShape s = img.shape();
    for (std::size_t h = 0; h < s.h; ++h)
      for (std::size_t w = 0; w < s.w; ++w)
        for (std::size_t c = 0; c < 2; ++c) {
          std::snprintf(buf, sizeof buf, "%.17g", img.at(h, w, c));
          values << step << '\t' << h << '\t' << w << '\t' << c << '\t' << buf << '\n';
        }
  }
}

TrajectoryRecord read_trajectory_values(const std::filesystem::path& file, HoiShape shape) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string header;
  std::getline(in, header);
  std::map<int, std::vector<double>> by_step;
  int step = 0;
  std::size_t h = 0, w = 0, c = 0;
  std::string value;
  while (in >> step >> h >> w >> c >> value) {
    if (h >= shape.h || w >= shape.w || c >= 2) throw IoError("trajectory index out of range");
    auto& data = by_step[step];
    data.resize(shape.size());
    data[shape.index(h, w, c)] = std::strtod(value.c_str(), nullptr);
  }
  TrajectoryRecord rec;
  for (auto it = by_step.rbegin(); it != by_step.rend(); ++it) {
    rec.steps.push_back(it->first);
    rec.images.push_back(HoiImage::from_data(shape, it->second));
  }
  return rec;
}

}  // namespace hoi
