#include <gtest/gtest.h>

#include "mast/errors.hpp"
#include "mast/gradcheck.hpp"

namespace {

TEST(Gradcheck, EveryCasePasses) {
  const auto report = mast::gradcheck(0);
  ASSERT_GT(report.cases.size(), 20u);
  for (const auto& c : report.cases) {
    EXPECT_TRUE(c.passed) << c.name << " rel error " << c.max_rel_error;
    EXPECT_LT(c.max_rel_error, c.tolerance) << c.name;
  }
  EXPECT_TRUE(report.passed());
  EXPECT_EQ(report.cases.back().name, "total_loss");
  EXPECT_DOUBLE_EQ(report.cases.back().tolerance, 1e-3);
  EXPECT_LT(report.seconds, 60.0);
}

TEST(Gradcheck, JsonMirrorsReport) {
  const auto report = mast::gradcheck(1);
  const auto j = mast::to_json(report);
  EXPECT_EQ(j["passed"].get<bool>(), report.passed());
  ASSERT_EQ(j["cases"].size(), report.cases.size());
  EXPECT_EQ(j["cases"][0]["name"], report.cases[0].name);
}

TEST(Gradcheck, RelativeErrorCatchesWrongGradients) {
  EXPECT_DOUBLE_EQ(mast::max_relative_error({1.0, -2.0}, {1.0, -2.0}, 1e-6), 0.0);
  EXPECT_NEAR(mast::max_relative_error({1.0, 2.0}, {1.0, 2.2}, 1e-6), 0.2 / 2.2, 1e-15);
  // A factor-of-two slip on a tiny gradient is still caught, relative to the floor.
  EXPECT_NEAR(mast::max_relative_error({2e-5}, {1e-5}, 1e-6), 0.5, 1e-12);
  EXPECT_NEAR(mast::max_relative_error({2e-9}, {1e-9}, 1e-6), 1e-3, 1e-12);
  EXPECT_THROW(mast::max_relative_error({1.0}, {}, 1e-6), mast::ContractError);
}

TEST(Gradcheck, EmptyReportDoesNotPass) {
  EXPECT_FALSE(mast::GradcheckReport{}.passed());
}

}  // namespace
