#include "hoi/synthetic_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hoi/kv_config.hpp"
#include "hoi/rng.hpp"

namespace hoi {

namespace {

using json = nlohmann::ordered_json;

// Stream indices reserved for table-level randomness; scenes use (split << 32) | index.
constexpr std::uint64_t kEmbeddingStream = 0xE0000001ull;
constexpr std::uint64_t kAffinityStream = 0xE0000002ull;

struct Embeddings {
  std::vector<std::vector<double>> object;
  std::vector<std::vector<double>> interaction;
};

Embeddings make_embeddings(const WorldConfig& cfg) {
  Rng rng = derive_stream(cfg.seed, kEmbeddingStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  Embeddings e;
  e.object.assign(cfg.h, std::vector<double>(cfg.d_appearance));
  e.interaction.assign(cfg.w, std::vector<double>(cfg.d_appearance));
  for (auto& v : e.object)
    for (double& x : v) x = normal(rng);
  for (auto& v : e.interaction)
    for (double& x : v) x = normal(rng);
  return e;
}

ObjectDist make_prior(const WorldConfig& cfg, int true_object, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int mode = true_object;
  if (cfg.h > 1 && unit(rng) < cfg.prior_error_rate) {
    std::uniform_int_distribution<int> other(0, static_cast<int>(cfg.h) - 2);
    mode = other(rng);
    if (mode >= true_object) ++mode;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> logits(cfg.h);
  for (double& l : logits) l = normal(rng);
  logits[static_cast<std::size_t>(mode)] += 1.0 / cfg.prior_temperature;
  const double hi = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - hi);
    z += l;
  }
  for (double& l : logits) l /= z;
  return ObjectDist(std::move(logits));
}

struct SplitCounters {
  int next_pair = 0;
  int next_object = 0;
};

std::vector<PairSample> generate_split(const WorldConfig& cfg, const AffinityTable& table,
                                       const Embeddings& emb, std::size_t split,
                                       std::size_t pair_count, SplitCounters& ids) {
  std::vector<PairSample> out;
  out.reserve(pair_count);
  const double noise_std = std::isinf(cfg.appearance_snr) ? 0.0 : 1.0 / cfg.appearance_snr;
  for (std::uint64_t scene = 0; out.size() < pair_count; ++scene) {
    Rng rng = derive_stream(cfg.seed, (static_cast<std::uint64_t>(split + 1) << 32) | scene);
    std::uniform_int_distribution<std::size_t> scene_size(cfg.pairs_per_scene_min,
                                                          cfg.pairs_per_scene_max);
    std::size_t left = std::min(scene_size(rng), pair_count - out.size());
    std::uniform_int_distribution<int> klass(0, static_cast<int>(cfg.h) - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    while (left > 0) {
      std::uniform_int_distribution<std::size_t> share(1, std::min(cfg.pairs_per_object_max, left));
      const std::size_t pairs = share(rng);
      const int object_id = ids.next_object++;
      const int true_object = klass(rng);
      const ObjectDist prior = make_prior(cfg, true_object, rng);
      for (std::size_t p = 0; p < pairs; ++p) {
        PairSample s;
        s.pair_id = ids.next_pair++;
        s.scene_id = static_cast<int>(scene);
        s.object_id = object_id;
        s.true_object = true_object;
        s.detector_prior = prior;
        s.appearance = emb.object[static_cast<std::size_t>(true_object)];
        for (std::size_t w = 0; w < cfg.w; ++w) {
          if (unit(rng) < table.at(static_cast<std::size_t>(true_object), w)) {
            s.true_interactions.push_back(static_cast<int>(w));
            for (std::size_t d = 0; d < cfg.d_appearance; ++d) s.appearance[d] += emb.interaction[w][d];
          }
        }
        for (double& x : s.appearance) x += noise_std * noise(rng);
        out.push_back(std::move(s));
      }
      left -= pairs;
    }
  }
  return out;
}

json pair_to_json(const PairSample& p) {
  json j;
  j["pair_id"] = p.pair_id;
  j["scene_id"] = p.scene_id;
  j["object_id"] = p.object_id;
  j["true_object"] = p.true_object;
  j["true_interactions"] = p.true_interactions;
  j["appearance"] = p.appearance;
  j["detector_prior"] = std::vector<double>(p.detector_prior.probs().begin(), p.detector_prior.probs().end());
  return j;
}

PairSample pair_from_json(const json& j, const WorldConfig& cfg) {
  PairSample p;
  p.pair_id = j.at("pair_id").get<int>();
  p.scene_id = j.at("scene_id").get<int>();
  p.object_id = j.at("object_id").get<int>();
  p.true_object = j.at("true_object").get<int>();
  p.true_interactions = j.at("true_interactions").get<std::vector<int>>();
  p.appearance = j.at("appearance").get<std::vector<double>>();
  p.detector_prior = ObjectDist(j.at("detector_prior").get<std::vector<double>>(), kExternalTolerance);
  if (p.true_object < 0 || static_cast<std::size_t>(p.true_object) >= cfg.h ||
      p.appearance.size() != cfg.d_appearance || p.detector_prior.size() != cfg.h) {
    throw IoError("dataset record " + std::to_string(p.pair_id) + " does not match the header");
  }
  for (int w : p.true_interactions) {
    if (w < 0 || static_cast<std::size_t>(w) >= cfg.w) throw IoError("interaction out of range");
  }
  return p;
}

std::string split_text(const std::vector<PairSample>& pairs) {
  std::string text;
  for (const PairSample& p : pairs) {
    text += pair_to_json(p).dump();
    text += '\n';
  }
  return text;
}

std::vector<PairSample> read_split(const std::filesystem::path& file, const WorldConfig& cfg) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::vector<PairSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(pair_from_json(json::parse(line), cfg));
    } catch (const json::exception& e) {
      throw IoError(file.string() + ": " + e.what());
    }
  }
  return out;
}

KeyValueConfig world_to_kv(const WorldConfig& cfg) {
  KeyValueConfig kv;
  kv.set("world.h", std::to_string(cfg.h));
  kv.set("world.w", std::to_string(cfg.w));
  kv.set("world.d_appearance", std::to_string(cfg.d_appearance));
  kv.set("world.train_pairs", std::to_string(cfg.train_pairs));
  kv.set("world.test_pairs", std::to_string(cfg.test_pairs));
  kv.set("world.pairs_per_scene_min", std::to_string(cfg.pairs_per_scene_min));
  kv.set("world.pairs_per_scene_max", std::to_string(cfg.pairs_per_scene_max));
  kv.set("world.pairs_per_object_max", std::to_string(cfg.pairs_per_object_max));
  kv.set_double("world.appearance_snr", cfg.appearance_snr);
  kv.set_double("world.prior_temperature", cfg.prior_temperature);
  kv.set_double("world.prior_error_rate", cfg.prior_error_rate);
  kv.set_double("world.interaction_rate", cfg.interaction_rate);
  kv.set_double("world.rare_fraction", cfg.rare_fraction);
  kv.set_double("world.rare_affinity", cfg.rare_affinity);
  kv.set("world.seed", std::to_string(cfg.seed));
  return kv;
}

}  // namespace

void WorldConfig::check() const {
  if (h == 0 || w == 0) throw ConfigError("world.h and world.w must be >= 1");
  if (d_appearance == 0) throw ConfigError("world.d_appearance must be >= 1");
  if (train_pairs == 0) throw ConfigError("world.train_pairs must be >= 1");
  if (pairs_per_scene_min == 0 || pairs_per_scene_min > pairs_per_scene_max) {
    throw ConfigError("need 1 <= pairs_per_scene_min <= pairs_per_scene_max");
  }
  if (pairs_per_object_max == 0) throw ConfigError("world.pairs_per_object_max must be >= 1");
  if (!(appearance_snr > 0.0)) throw ConfigError("world.appearance_snr must be > 0");
  if (!(prior_temperature > 0.0)) throw ConfigError("world.prior_temperature must be > 0");
  if (!(prior_error_rate >= 0.0 && prior_error_rate <= 1.0)) {
    throw ConfigError("world.prior_error_rate must lie in [0, 1]");
  }
  if (!(interaction_rate >= 0.0 && interaction_rate <= 1.0)) {
    throw ConfigError("world.interaction_rate must lie in [0, 1]");
  }
  if (!(rare_fraction >= 0.0 && rare_fraction < 1.0)) {
    throw ConfigError("world.rare_fraction must lie in [0, 1)");
  }
  if (!(rare_affinity >= 0.0 && rare_affinity <= 1.0)) {
    throw ConfigError("world.rare_affinity must lie in [0, 1]");
  }
}

AffinityTable make_affinity_table(const WorldConfig& cfg) {
  cfg.check();
  const std::size_t combos = cfg.h * cfg.w;
  AffinityTable t;
  t.shape = cfg.shape();
  t.rate.assign(combos, 0.0);
  t.rare.assign(combos, false);

  std::vector<std::size_t> order(combos);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_stream(cfg.seed, kAffinityStream);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_rare = static_cast<std::size_t>(std::lround(cfg.rare_fraction * static_cast<double>(combos)));
  for (std::size_t i = 0; i < n_rare; ++i) t.rare[order[i]] = true;

  const double rare_rate = cfg.interaction_rate * cfg.rare_affinity;
  const double common_rate =
      n_rare == combos
          ? rare_rate
          : cfg.interaction_rate *
                (static_cast<double>(combos) - static_cast<double>(n_rare) * cfg.rare_affinity) /
                static_cast<double>(combos - n_rare);
  if (common_rate > 1.0) {
    throw ConfigError("interaction_rate too high for the rare split (common rate " +
                      format_double(common_rate) + " > 1)");
  }
  for (std::size_t i = 0; i < combos; ++i) t.rate[i] = t.rare[i] ? rare_rate : common_rate;
  return t;
}

bool PairSample::has_interaction(int w) const {
  return std::binary_search(true_interactions.begin(), true_interactions.end(), w);
}

Dataset generate_dataset(const WorldConfig& cfg) {
  cfg.check();
  Dataset d;
  d.config = cfg;
  d.affinity = make_affinity_table(cfg);
  const Embeddings emb = make_embeddings(cfg);
  SplitCounters ids;
  d.train = generate_split(cfg, d.affinity, emb, 0, cfg.train_pairs, ids);
  d.test = generate_split(cfg, d.affinity, emb, 1, cfg.test_pairs, ids);
  return d;
}

HoiImage ground_truth_image(const PairSample& pair, HoiShape shape) {
  return compose(ObjectDist::one_hot(shape.h, static_cast<std::size_t>(pair.true_object)),
                 InteractionMatrix::from_present(shape.w, pair.true_interactions));
}

std::size_t count_scarce_combinations(const Dataset& data, std::size_t threshold) {
  const std::size_t W = data.config.w;
  std::vector<std::size_t> counts(data.config.h * W, 0);
  for (const PairSample& p : data.train) {
    for (int w : p.true_interactions) ++counts[static_cast<std::size_t>(p.true_object) * W + static_cast<std::size_t>(w)];
  }
  return static_cast<std::size_t>(
      std::count_if(counts.begin(), counts.end(), [&](std::size_t c) { return c < threshold; }));
}

std::string content_hash_bytes(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string content_hash(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return content_hash_bytes(ss.str());
}

std::string world_config_text(const WorldConfig& cfg) { return world_to_kv(cfg).dump(); }

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const std::string train = split_text(data.train);
  const std::string test = split_text(data.test);
  for (const auto& [name, text] : {std::pair{"train.jsonl", &train}, std::pair{"test.jsonl", &test}}) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << *text;
  }
  KeyValueConfig header = world_to_kv(data.config);
  header.set("dataset.format", "hoi-idiff-dataset-1");
  header.set("dataset.train_count", std::to_string(data.train.size()));
  header.set("dataset.test_count", std::to_string(data.test.size()));
  header.set("dataset.train_hash", content_hash_bytes(train));
  header.set("dataset.test_hash", content_hash_bytes(test));
  header.set("dataset.scarce_combinations", std::to_string(count_scarce_combinations(data)));
  std::string rare;
  for (std::size_t h = 0; h < data.config.h; ++h)
    for (std::size_t w = 0; w < data.config.w; ++w)
      if (data.affinity.is_rare(h, w)) rare += (rare.empty() ? "" : ",") + std::to_string(h) + ":" + std::to_string(w);
  header.set("dataset.rare_combinations", rare);
  std::ofstream out(dir / "dataset.header", std::ios::trunc);
  if (!out) throw IoError("cannot write dataset header");
  out << "# synthetic HOI dataset header\n" << header.dump();
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_regular_file(dir / "dataset.header")) throw IoError("no dataset in " + dir.string());
  const KeyValueConfig header = KeyValueConfig::load(dir / "dataset.header");
  if (header.get_string("dataset.format", "") != "hoi-idiff-dataset-1") {
    throw IoError("unrecognised dataset header in " + dir.string());
  }
  WorldConfig cfg;
  cfg.h = header.get_size("world.h", cfg.h);
  cfg.w = header.get_size("world.w", cfg.w);
  cfg.d_appearance = header.get_size("world.d_appearance", cfg.d_appearance);
  cfg.train_pairs = header.get_size("world.train_pairs", cfg.train_pairs);
  cfg.test_pairs = header.get_size("world.test_pairs", cfg.test_pairs);
  cfg.pairs_per_scene_min = header.get_size("world.pairs_per_scene_min", cfg.pairs_per_scene_min);
  cfg.pairs_per_scene_max = header.get_size("world.pairs_per_scene_max", cfg.pairs_per_scene_max);
  cfg.pairs_per_object_max = header.get_size("world.pairs_per_object_max", cfg.pairs_per_object_max);
  cfg.appearance_snr = header.get_double("world.appearance_snr", cfg.appearance_snr);
  cfg.prior_temperature = header.get_double("world.prior_temperature", cfg.prior_temperature);
  cfg.prior_error_rate = header.get_double("world.prior_error_rate", cfg.prior_error_rate);
  cfg.interaction_rate = header.get_double("world.interaction_rate", cfg.interaction_rate);
  cfg.rare_fraction = header.get_double("world.rare_fraction", cfg.rare_fraction);
  cfg.rare_affinity = header.get_double("world.rare_affinity", cfg.rare_affinity);
  cfg.seed = header.get_u64("world.seed", cfg.seed);

  for (const char* split : {"train", "test"}) {
    const std::string want = header.get_string(std::string("dataset.") + split + "_hash", "");
    const std::string got = content_hash(dir / (std::string(split) + ".jsonl"));
    if (want != got) throw IoError(std::string(split) + ".jsonl content hash mismatch");
  }
  Dataset d;
  d.config = cfg;
  d.affinity = make_affinity_table(cfg);
  d.train = read_split(dir / "train.jsonl", cfg);
  d.test = read_split(dir / "test.jsonl", cfg);
  return d;
}

}  // namespace hoi
