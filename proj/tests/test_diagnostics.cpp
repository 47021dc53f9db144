#include <doctest.h>

#include <sstream>

#include "hoi/diagnostics.hpp"

using namespace hoi;

namespace {

DiagConfig quick() {
  DiagConfig c;
  c.conservation_chains = 20;
  c.terminal_pairs = 5;
  c.terminal_samples = 400;
  c.moment_samples = 3000;
  c.lattice_chains = 50000;
  return c;
}

}  // namespace

TEST_CASE("the default schedule passes every forward-process check") {
  const NoiseSchedule sched = build_schedule(kDefaultSteps, kDefaultTrials, kDefaultBetaStart, kDefaultBetaEnd);
  const std::vector<DiagCheck> checks = run_diagnostics(sched, quick());
  REQUIRE(checks.size() == 6);
  for (const DiagCheck& c : checks) {
    INFO(c.name << " value " << c.value);
    CHECK(c.pass);
    CHECK(c.value < c.threshold);
  }
}

TEST_CASE("a schedule that stops short of the prior fails terminal convergence") {
  const NoiseSchedule cool = build_schedule(50, 2000, 1e-3, 0.02);
  const DiagCheck c = check_terminal_convergence(cool, quick());
  CHECK_FALSE(c.pass);
  // The mean stays a fraction abar_K of the way from d_init to d_0.
  CHECK(c.value == doctest::Approx(cool.alpha_bar(50)).epsilon(0.05));
}

TEST_CASE("lattice checks see ambiguous predecessors") {
  for (int k : {2, 3}) {
    const DiagCheck c = check_posterior_lattice(quick(), k);
    CHECK(c.pass);
    CHECK(c.value > 0.0);  // sampling noise alone keeps it off zero
    CHECK(c.detail.find("observed_states=") != std::string::npos);
  }
}

TEST_CASE("short schedules and report format") {
  const NoiseSchedule tiny = schedule_from_betas({0.1, 0.2}, 50);
  CHECK_FALSE(check_jump_moments(tiny, quick()).pass);
  CHECK(check_s_factors(tiny).pass);
  const std::string report = format_report({{"alpha", true, 0.5, 1.0, "x=1"}, {"beta", false, 2.0, 1.0, ""}});
  std::istringstream in(report);
  std::string a, b;
  std::getline(in, a);
  std::getline(in, b);
  CHECK(a == "CHECK alpha PASS value=0.5 threshold=1 x=1");
  CHECK(b.rfind("CHECK beta FAIL value=2 threshold=1", 0) == 0);
}
