// ebt/stats.hpp
//
// Small statistics used by the evaluation reports.

#pragma once

#include <cstddef>
#include <vector>

namespace ebt::stats {

struct Interval {
  double low = 0.0, high = 0.0;
};

// Wilson score interval for k successes in n trials (two-sided, default 95%).
// n = 0 gives [0, 1].
Interval wilson(std::size_t k, std::size_t n, double z = 1.959963984540054);

// One-sided Mann-Whitney U test of "a tends to be larger than b", normal
// approximation with tie and continuity corrections. Returns the p-value.
double rank_test_greater(const std::vector<double>& a, const std::vector<double>& b);

double mean(const std::vector<double>& v);
// Midpoint of the two central order statistics for even sizes.
double median(std::vector<double> v);

}  // namespace ebt::stats
