#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hoi/core_types.hpp"

namespace hoi {

struct WorldConfig {
  std::size_t h = 6;
  std::size_t w = 5;
  std::size_t d_appearance = 32;
  std::size_t train_pairs = 2000;
  std::size_t test_pairs = 500;
  std::size_t pairs_per_scene_min = 1;
  std::size_t pairs_per_scene_max = 6;
  std::size_t pairs_per_object_max = 3;
  double appearance_snr = 8.0;     // noise std per feature is 1 / snr; inf means noiseless
  double prior_temperature = 0.5;  // one-hot logit scale is 1 / temperature
  double prior_error_rate = 0.1;
  double interaction_rate = 0.3;
  double rare_fraction = 0.3;    // share of (object, interaction) combinations marked rare
  double rare_affinity = 0.03;   // rate multiplier for rare combinations
  std::uint64_t seed = 1;

  HoiShape shape() const { return {h, w}; }
  void check() const;
};

/// Per-(object, interaction) presence rates. Rates average to the configured
/// interaction rate over combinations; rare combinations get a small share.
struct AffinityTable {
  HoiShape shape;
  std::vector<double> rate;  // h * w, row-major
  std::vector<bool> rare;    // h * w

  double at(std::size_t h, std::size_t w) const { return rate[h * shape.w + w]; }
  bool is_rare(std::size_t h, std::size_t w) const { return rare[h * shape.w + w]; }
};

AffinityTable make_affinity_table(const WorldConfig& cfg);

struct PairSample {
  int pair_id = 0;
  int scene_id = 0;
  int object_id = 0;  // shared by all pairs that involve the same detected object
  int true_object = 0;
  std::vector<int> true_interactions;  // ascending
  std::vector<double> appearance;      // f_a
  ObjectDist detector_prior = ObjectDist::uniform(1);

  bool has_interaction(int w) const;
};

struct Dataset {
  WorldConfig config;
  AffinityTable affinity;
  std::vector<PairSample> train;
  std::vector<PairSample> test;
};

Dataset generate_dataset(const WorldConfig& cfg);

HoiImage ground_truth_image(const PairSample& pair, HoiShape shape);

// Combinations with fewer than `threshold` positive training examples.
std::size_t count_scarce_combinations(const Dataset& data, std::size_t threshold = 10);

// Dataset directory: train.jsonl, test.jsonl (one JSON object per pair) and
// dataset.header (key = value lines with the world config and content hashes).
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& dir);

std::string world_config_text(const WorldConfig& cfg);

// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string content_hash(const std::filesystem::path& file);
std::string content_hash_bytes(const std::string& bytes);

}  // namespace hoi
