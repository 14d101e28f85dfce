#include "xfer/bench/stats.hpp"

#include <algorithm>
#include <cmath>

#include "xfer/rng.hpp"

namespace xfer {

double aggregate_score(const std::map<std::string, double>& per_target) {
  if (per_target.empty()) {
    throw ValidationError("aggregate_score: no targets");
  }
  double sum = 0.0;  // std::map iterates in ascending key order
  for (const auto& [name, h] : per_target) sum += h;
  return sum / static_cast<double>(per_target.size());
}

std::vector<double> column_means(const ScoreMatrix& m) {
  std::vector<double> mu(m.n_targets(), 0.0);
  for (const auto& row : m.h) {
    for (std::size_t t = 0; t < mu.size(); ++t) mu[t] += row[t];
  }
  for (double& v : mu) v /= static_cast<double>(m.n_sources());
  return mu;
}

std::vector<double> column_stds(const ScoreMatrix& m) {
  const auto mu = column_means(m);
  std::vector<double> sd(m.n_targets(), 0.0);
  for (const auto& row : m.h) {
    for (std::size_t t = 0; t < sd.size(); ++t) {
      const double d = row[t] - mu[t];
      sd[t] += d * d;
    }
  }
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(m.n_sources()));
  return sd;
}

std::vector<std::vector<double>> normalize_scores(const ScoreMatrix& m) {
  if (m.n_sources() < 2) {
    throw ValidationError(
        "normalize_scores: need at least 2 sources, have " +
        std::to_string(m.n_sources()));
  }
  const auto mu = column_means(m);
  const auto sd = column_stds(m);
  for (std::size_t t = 0; t < sd.size(); ++t) {
    if (sd[t] <= 0.0) {
      throw ValidationError("normalize_scores: zero variance in target column " +
                            m.targets[t]);
    }
  }
  std::vector<std::vector<double>> out(m.n_sources(),
                                       std::vector<double>(m.n_targets()));
  for (std::size_t s = 0; s < m.n_sources(); ++s) {
    for (std::size_t t = 0; t < m.n_targets(); ++t) {
      out[s][t] = (m.h[s][t] - mu[t]) / sd[t];
    }
  }
  return out;
}

namespace {

// Linear-interpolation quantile of a sorted vector.
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace

std::pair<double, double> bootstrap_ci(const std::vector<double>& row,
                                       long n_resamples, double level,
                                       std::uint64_t seed) {
  if (row.size() < 2) {
    throw ValidationError("bootstrap_ci: need at least 2 values");
  }
  if (n_resamples < 100) {
    throw ValidationError("bootstrap_ci: n_resamples must be >= 100");
  }
  if (level <= 0.0 || level >= 1.0) {
    throw ValidationError("bootstrap_ci: level must be in (0, 1)");
  }
  Rng rng(seed);
  const auto n = static_cast<std::uint64_t>(row.size());
  std::vector<double> means(n_resamples);
  for (long r = 0; r < n_resamples; ++r) {
    double sum = 0.0;
    for (std::uint64_t i = 0; i < n; ++i) sum += row[rng.uniform_int(n)];
    means[r] = sum / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

std::pair<double, double> denormalize_ci(double lo, double hi,
                                         const ScoreMatrix& m) {
  const auto mu = column_means(m);
  const auto sd = column_stds(m);
  double mu_bar = 0.0, sd_bar = 0.0;
  for (std::size_t t = 0; t < mu.size(); ++t) {
    mu_bar += mu[t];
    sd_bar += sd[t];
  }
  mu_bar /= static_cast<double>(mu.size());
  sd_bar /= static_cast<double>(sd.size());
  return {lo * sd_bar + mu_bar, hi * sd_bar + mu_bar};
}

}  // namespace xfer
