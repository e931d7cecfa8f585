#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sfmlab/stats.hpp"

using namespace sfmlab;

TEST_CASE("percentile with linear interpolation") {
  // Oracle: sorted {1,2,3,4}; p50 -> index 1.5 -> 2.5; p95 -> index 2.85 -> 3.85.
  std::vector<double> v = {4, 1, 3, 2};
  CHECK(stats::percentile(v, 0) == doctest::Approx(1.0));
  CHECK(stats::percentile(v, 100) == doctest::Approx(4.0));
  CHECK(stats::percentile(v, 50) == doctest::Approx(2.5));
  CHECK(stats::percentile(v, 95) == doctest::Approx(3.85));
  CHECK_THROWS_AS(stats::percentile({}, 50), ValidationError);
}

TEST_CASE("ranks average over ties") {
  // Oracle: {10, 20, 20, 30} -> ranks {1, 2.5, 2.5, 4}.
  const auto r = stats::ranks({10, 20, 20, 30});
  CHECK(r[0] == doctest::Approx(1.0));
  CHECK(r[1] == doctest::Approx(2.5));
  CHECK(r[2] == doctest::Approx(2.5));
  CHECK(r[3] == doctest::Approx(4.0));
}

TEST_CASE("spearman rho on hand-worked example") {
  // Oracle: x={1,2,3,4,5}, y={2,1,4,3,5} (tie-free). Rank differences are
  // {1,1,1,1,0}, so rho = 1 - 6*sum(d^2)/(n(n^2-1)) = 1 - 24/120 = 0.8.
  const double rho = stats::spearman_rho({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5});
  CHECK(rho == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(stats::spearman_rho({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(stats::spearman_rho({1, 2}, {1, 2}), ValidationError);
}

TEST_CASE("student t cdf against table values") {
  // Oracle: standard t tables. df=1: CDF(1.0)=0.75, CDF(12.706)=0.975.
  // df=10: CDF(2.228)=0.975. CDF(0)=0.5 for any df.
  CHECK(stats::student_t_cdf(0.0, 5) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(stats::student_t_cdf(1.0, 1) == doctest::Approx(0.75).epsilon(1e-6));
  CHECK(stats::student_t_cdf(12.706, 1) == doctest::Approx(0.975).epsilon(1e-4));
  CHECK(stats::student_t_cdf(2.228, 10) == doctest::Approx(0.975).epsilon(1e-4));
  CHECK(stats::student_t_cdf(-2.228, 10) == doctest::Approx(0.025).epsilon(1e-4));
}

TEST_CASE("one-sided negative-trend p-value behaves directionally") {
  // A strongly negative rho must give a small p; a positive rho a large one.
  CHECK(stats::spearman_pvalue_negative(-0.9, 10) < 0.01);
  CHECK(stats::spearman_pvalue_negative(0.9, 10) > 0.99);
  CHECK(stats::spearman_pvalue_negative(-1.0, 10) == 0.0);
}

TEST_CASE("least squares line fit on exact data") {
  // Oracle: y = 3x - 1 exactly -> slope 3, intercept -1, r^2 = 1.
  const auto fit = stats::fit_line({0, 1, 2, 3}, {-1, 2, 5, 8});
  CHECK(fit.slope == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(fit.intercept == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(fit.r_squared == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pearson of anticorrelated data is -1") {
  CHECK(stats::pearson({1, 2, 3}, {6, 4, 2}) == doctest::Approx(-1.0).epsilon(1e-12));
}
