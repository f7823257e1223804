#include <gtest/gtest.h>

#include <algorithm>

#include "clan_forge/grad_check.hpp"

using namespace clan_forge;

TEST(GradCheck, AllOpsAndComposedLossesPass) {
  const GradCheckReport rep = run_grad_checks();
  for (const auto& r : rep.results) EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_error;
  EXPECT_LT(rep.seconds, 60.0);
  const auto has = [&](const std::string& n) {
    return std::any_of(rep.results.begin(), rep.results.end(), [&](const auto& r) { return r.name == n; });
  };
  EXPECT_TRUE(has("clan_generator_loss"));
  EXPECT_TRUE(has("conv2d"));
}

TEST(GradCheck, InjectedSignBugIsNamed) {
  GradCheckOptions opt;
  opt.fault = OpKind::sigmoid;
  const GradCheckReport rep = run_grad_checks(opt);
  const auto failed = rep.failures();
  EXPECT_FALSE(rep.all_pass());
  EXPECT_NE(std::find(failed.begin(), failed.end(), "sigmoid"), failed.end());
  EXPECT_EQ(std::find(failed.begin(), failed.end(), "conv2d"), failed.end());
}

TEST(GradCheck, ReportIsDeterministicPerSeed) {
  GradCheckOptions opt;
  opt.seed = 17;
  const GradCheckReport a = run_grad_checks(opt), b = run_grad_checks(opt);
  ASSERT_EQ(a.results.size(), b.results.size());
  for (std::size_t i = 0; i < a.results.size(); ++i) EXPECT_EQ(a.results[i].max_rel_error, b.results[i].max_rel_error);
}

TEST(GradCheck, RelativeErrorHandlesZeroGradients) {
  const std::vector<double> z{0.0, 0.0};
  EXPECT_EQ(relative_error(z, z), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(std::vector<double>{1.0, 0.0}, std::vector<double>{-1.0, 0.0}), 2.0);
}
