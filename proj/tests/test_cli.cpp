#include <doctest.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include "hoi/kv_config.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kCli = HOI_IDIFF_CLI;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hoi_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs the CLI with stdout and stderr captured into `log`; returns the exit code.
int run(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = quote(kCli.string());
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " > " + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& file) {
  std::ifstream in(file);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Log lines with the trailing wall-clock column removed.
std::vector<std::string> log_without_wall(const fs::path& file) {
  std::vector<std::string> out;
  for (const auto& line : lines_of(file)) out.push_back(line.substr(0, line.rfind('\t')));
  return out;
}

std::vector<std::string> with_sets(std::vector<std::string> args, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    args.push_back("--set");
    args.push_back(s);
  }
  return args;
}

const std::vector<std::string> kWorld{"world.train_pairs=40", "world.test_pairs=15"};
const std::vector<std::string> kModel{"model.d_model=16", "model.blocks=1", "model.heads=2", "model.d_step=16",
                                      "train.m_samples=3", "train.learning_rate=0.001", "train.log_every=1"};

fs::path make_dataset(const fs::path& dir) {
  const fs::path data = dir / "data";
  REQUIRE(run(with_sets({"gen", "--out", data.string()}, kWorld), dir / "gen.log") == 0);
  return data;
}

std::vector<std::string> train_args(const fs::path& data, const fs::path& out, int epochs) {
  std::vector<std::string> sets = kModel;
  sets.push_back("train.epochs=" + std::to_string(epochs));
  return with_sets({"train", "--data", data.string(), "--out", out.string()}, sets);
}

std::vector<std::string> diag_args(const std::vector<std::string>& extra) {
  std::vector<std::string> sets{"diag.conservation_chains=20", "diag.terminal_pairs=4", "diag.terminal_samples=400",
                                "diag.moment_samples=2000", "diag.lattice_chains=20000"};
  sets.insert(sets.end(), extra.begin(), extra.end());
  return with_sets({"diag"}, sets);
}

}  // namespace

TEST_CASE("usage and configuration errors exit with 2") {
  const fs::path dir = scratch("usage");
  CHECK(run({}, dir / "a.log") == 2);
  CHECK(run({"frobnicate"}, dir / "b.log") == 2);
  CHECK(run({"--help"}, dir / "c.log") == 0);
  CHECK(run({"gen", "--out", (dir / "d").string(), "--set", "world.nonsense=1"}, dir / "d.log") == 2);
  CHECK(file_bytes(dir / "d.log").find("unknown config key") != std::string::npos);
  CHECK(run({"gen", "--out", (dir / "e").string(), "--set", "schedule.steps=0"}, dir / "e.log") == 2);
  CHECK(run({"gen", "--out", (dir / "f").string(), "--config", (dir / "missing.kv").string()}, dir / "f.log") == 2);
  CHECK(run({"train", "--data", (dir / "nodata").string(), "--out", (dir / "r").string()}, dir / "g.log") == 1);
}

TEST_CASE("gen is reproducible and config files layer under --set") {
  const fs::path dir = scratch("gen");
  const fs::path a = make_dataset(dir);
  const fs::path b = dir / "data_b";
  std::ofstream(dir / "world.kv") << "world.train_pairs = 40\nworld.test_pairs = 99\n";
  REQUIRE(run({"gen", "--out", b.string(), "--config", (dir / "world.kv").string(), "--set", "world.test_pairs=15"},
              dir / "b.log") == 0);
  for (const char* f : {"train.jsonl", "test.jsonl", "dataset.header"}) CHECK(file_bytes(a / f) == file_bytes(b / f));
  CHECK(file_bytes(dir / "gen.log") == file_bytes(dir / "b.log"));
  const hoi::KeyValueConfig resolved = hoi::KeyValueConfig::load(b / "config.resolved");
  CHECK(resolved.get_size("world.test_pairs", 0) == 15);

  const fs::path c = dir / "data_c";
  REQUIRE(run(with_sets({"gen", "--out", c.string(), "--set", "seed=2"}, kWorld), dir / "c.log") == 0);
  CHECK(file_bytes(a / "train.jsonl") != file_bytes(c / "train.jsonl"));
}

TEST_CASE("train and eval are byte-identical across runs") {
  const fs::path dir = scratch("repro");
  const fs::path data = make_dataset(dir);
  REQUIRE(run(train_args(data, dir / "r1", 2), dir / "t1.log") == 0);
  REQUIRE(run(train_args(data, dir / "r2", 2), dir / "t2.log") == 0);
  CHECK(file_bytes(dir / "r1/checkpoint.hidf") == file_bytes(dir / "r2/checkpoint.hidf"));
  CHECK(file_bytes(dir / "r1/optimizer.state") == file_bytes(dir / "r2/optimizer.state"));
  CHECK(log_without_wall(dir / "r1/train_log.tsv") == log_without_wall(dir / "r2/train_log.tsv"));
  CHECK(lines_of(dir / "r1/train_log.tsv").size() == 12);  // 5 steps and one epoch line per epoch

  for (const char* mode : {"deterministic", "stochastic"}) {
    const std::string m = std::string("eval.mode=") + mode;
    for (int i : {1, 2}) {
      const fs::path out = dir / (std::string("e_") + mode + std::to_string(i));
      REQUIRE(run({"eval", "--checkpoint", (dir / "r1/checkpoint.hidf").string(), "--data", data.string(), "--out",
                   out.string(), "--set", m},
                  dir / "e.log") == 0);
    }
    const fs::path e1 = dir / (std::string("e_") + mode + "1");
    const fs::path e2 = dir / (std::string("e_") + mode + "2");
    CHECK(file_bytes(e1 / "results.jsonl") == file_bytes(e2 / "results.jsonl"));
    CHECK(file_bytes(e1 / "metrics.kv") == file_bytes(e2 / "metrics.kv"));
    CHECK(lines_of(e1 / "results.jsonl").size() == 15);
  }
  // The eval picks up the model settings the run recorded.
  const hoi::KeyValueConfig used = hoi::KeyValueConfig::load(dir / "e_deterministic1/config.resolved");
  CHECK(used.get_size("model.d_model", 0) == 16);
}

TEST_CASE("an interrupted training run resumes to the uninterrupted result") {
  const fs::path dir = scratch("resume");
  const fs::path data = make_dataset(dir);
  const int epochs = 60;
  REQUIRE(run(train_args(data, dir / "full", epochs), dir / "full.log") == 0);

  const fs::path part = dir / "part";
  const std::vector<std::string> args = train_args(data, part, epochs);
  std::vector<char*> argv{const_cast<char*>(kCli.c_str())};
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    const int fd = ::open("/dev/null", O_WRONLY);
    dup2(fd, 1);
    execv(argv[0], argv.data());
    _exit(127);
  }
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(60);
  while (lines_of(part / "train_log.tsv").size() < 8 && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  kill(pid, SIGINT);
  int status = 0;
  waitpid(pid, &status, 0);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 1);
  const std::size_t logged = lines_of(part / "train_log.tsv").size();
  CHECK(logged < lines_of(dir / "full/train_log.tsv").size());

  REQUIRE(run([&] {
    auto a = args;
    a.push_back("--resume");
    return a;
  }(),
              dir / "resume.log") == 0);
  CHECK(file_bytes(part / "checkpoint.hidf") == file_bytes(dir / "full/checkpoint.hidf"));
  CHECK(log_without_wall(part / "train_log.tsv") == log_without_wall(dir / "full/train_log.tsv"));
}

TEST_CASE("ablation switches reach the pipeline") {
  const fs::path dir = scratch("ablation");
  const fs::path data = make_dataset(dir);
  for (const char* ab : {"local-patch", "horizontal-only", "vertical-only", "gaussian-process"}) {
    const fs::path out = dir / ab;
    auto args = train_args(data, out, 1);
    args.push_back("--ablation");
    args.push_back(ab);
    REQUIRE(run(args, dir / "t.log") == 0);
    const hoi::KeyValueConfig kv = hoi::KeyValueConfig::load(out / "config.resolved");
    if (std::string(ab) == "gaussian-process") {
      CHECK(kv.get_string("train.process", "") == "gaussian");
    } else {
      const std::string mode = kv.get_string("model.patch_mode", "");
      CHECK(mode == (std::string(ab) == "local-patch" ? "local" : std::string(ab).substr(0, std::string(ab).find('-'))));
    }
    REQUIRE(run({"eval", "--checkpoint", (out / "checkpoint.hidf").string(), "--data", data.string(), "--out",
                 (out / "eval").string()},
                dir / "e.log") == 0);
    CHECK(lines_of(out / "eval/results.jsonl").size() == 15);
  }

  const fs::path base = dir / "local-patch";
  REQUIRE(run({"eval", "--checkpoint", (base / "checkpoint.hidf").string(), "--data", data.string(), "--out",
               (dir / "uni").string(), "--ablation", "uniform-init"},
              dir / "u.log") == 0);
  CHECK(hoi::KeyValueConfig::load(dir / "uni/config.resolved").get_string("eval.init", "") == "uniform");
  REQUIRE(run({"eval", "--data", data.string(), "--out", (dir / "prior").string(), "--ablation", "prior-only"},
              dir / "p.log") == 0);
  const hoi::KeyValueConfig prior = hoi::KeyValueConfig::load(dir / "prior/metrics.kv");
  CHECK(prior.get_double("triplet.f1", -1) == 0.0);
  REQUIRE(run({"eval", "--data", data.string(), "--out", (dir / "oracle").string(), "--oracle"}, dir / "o.log") == 0);
  CHECK(hoi::KeyValueConfig::load(dir / "oracle/metrics.kv").get_double("triplet.f1", -1) == 1.0);
  CHECK(run({"train", "--data", data.string(), "--out", (dir / "x").string(), "--ablation", "uniform-init"},
            dir / "x.log") == 2);
  CHECK(run({"eval", "--data", data.string(), "--out", (dir / "y").string()}, dir / "y.log") == 2);
}

TEST_CASE("diag passes on the default schedule and fails on a cool one") {
  const fs::path dir = scratch("diag");
  CHECK(run(diag_args({}), dir / "ok.log") == 0);
  const auto ok = lines_of(dir / "ok.log");
  CHECK(ok.size() == 6);
  for (const auto& line : ok) CHECK(line.find(" PASS ") != std::string::npos);

  auto args = diag_args({"schedule.beta_end=0.02"});
  args.push_back("--out");
  args.push_back((dir / "report").string());
  CHECK(run(args, dir / "bad.log") == 1);
  const std::string report = file_bytes(dir / "report/diagnostics.txt");
  CHECK(report.find("CHECK terminal_convergence FAIL") != std::string::npos);
  CHECK(report == file_bytes(dir / "bad.log"));
}

TEST_CASE("trajectory export writes one pixmap per step") {
  const fs::path dir = scratch("export");
  const fs::path data = make_dataset(dir);
  REQUIRE(run(train_args(data, dir / "r", 1), dir / "t.log") == 0);
  const auto first = lines_of(data / "test.jsonl").front();
  const auto at = first.find("\"pair_id\":") + 10;
  const std::string pair = first.substr(at, first.find_first_of(",}", at) - at);
  REQUIRE(run({"export-trajectory", "--checkpoint", (dir / "r/checkpoint.hidf").string(), "--data", data.string(),
               "--pair", pair, "--out", (dir / "traj").string()},
              dir / "x.log") == 0);
  std::size_t ppm = 0;
  for (const auto& e : fs::directory_iterator(dir / "traj")) ppm += e.path().extension() == ".ppm";
  CHECK(ppm == 51);
  CHECK(fs::exists(dir / "traj/values.tsv"));
  CHECK(run({"export-trajectory", "--checkpoint", (dir / "r/checkpoint.hidf").string(), "--data", data.string(),
             "--pair", "999999", "--out", (dir / "none").string()},
            dir / "y.log") == 2);
}
