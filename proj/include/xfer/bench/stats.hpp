#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xfer/error.hpp"

namespace xfer {

// Per-(source, target) test cross-entropies, nats/token.
struct ScoreMatrix {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> h;  // [source][target]

  std::size_t n_sources() const { return sources.size(); }
  std::size_t n_targets() const { return targets.size(); }
};

// Arithmetic mean, summed in ascending target-name order.
double aggregate_score(const std::map<std::string, double>& per_target);

// Column-wise z-normalization across sources (population std).
// Requires >= 2 sources and non-degenerate columns.
std::vector<std::vector<double>> normalize_scores(const ScoreMatrix& m);

// Percentile bootstrap of the mean of one normalized row.
std::pair<double, double> bootstrap_ci(const std::vector<double>& row,
                                       long n_resamples = 10000,
                                       double level = 0.95,
                                       std::uint64_t seed = 0);

// Back-transform a normalized interval to raw cross-entropy space using
// the column means/stds averaged over targets.
std::pair<double, double> denormalize_ci(double lo, double hi,
                                         const ScoreMatrix& m);

// Column statistics helpers (population std).
std::vector<double> column_means(const ScoreMatrix& m);
std::vector<double> column_stds(const ScoreMatrix& m);

}  // namespace xfer
