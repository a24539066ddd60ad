#pragma once

#include <span>
#include <vector>

namespace forge {

// Quantile of already sorted data, linear interpolation between order
// statistics at position p * (n - 1).
double quantile_sorted(std::span<const double> sorted, double p);

std::vector<double> quantiles(std::vector<double> values, std::span<const double> ps);

// 1-based ranks, ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of average ranks. Throws kUndefinedCorrelation when
// either side is constant or fewer than 3 points are given.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace forge
