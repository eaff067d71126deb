#pragma once

// Blocked log-domain averaging for prior-sampling Monte Carlo estimators.
// Each draw i is generated from its own counter stream, blocks are reduced
// independently and merged in block order, so the OpenMP path and the serial
// reference produce bit-identical estimates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "bfsurf/numerics.hpp"

namespace bfsurf::detail {

inline constexpr std::size_t kMcBlock = 4096;

struct LogMoments {
  double max = -std::numeric_limits<double>::infinity();
  double s1 = 0.0;  // Σ exp(l - max)
  double s2 = 0.0;  // Σ exp(2(l - max))
};

inline void merge(LogMoments& acc, const LogMoments& other) {
  if (other.max == -std::numeric_limits<double>::infinity()) return;
  if (other.max > acc.max) {
    const double r = std::exp(acc.max - other.max);
    acc.s1 = acc.s1 * r + other.s1;
    acc.s2 = acc.s2 * r * r + other.s2;
    acc.max = other.max;
  } else {
    const double r = std::exp(other.max - acc.max);
    acc.s1 += other.s1 * r;
    acc.s2 += other.s2 * r * r;
  }
}

template <class Draws>
LogMoments block_moments(const Draws& draws, std::size_t begin, std::size_t end) {
  LogMoments m;
  std::vector<double> buf(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    buf[i - begin] = draws.log_lik(i);
    m.max = std::max(m.max, buf[i - begin]);
  }
  if (m.max == -std::numeric_limits<double>::infinity()) return m;
  for (double l : buf) {
    const double e = std::exp(l - m.max);
    m.s1 += e;
    m.s2 += e * e;
  }
  return m;
}

// Delta-method standard error of log(mean): sqrt(Σe²/(Σe)² - 1/N).
inline numerics::McEstimate finish(const LogMoments& m, std::size_t n_draws) {
  const double nd = static_cast<double>(n_draws);
  const double log_mean = m.max + std::log(m.s1) - std::log(nd);
  const double rel_var = std::max(m.s2 / (m.s1 * m.s1) - 1.0 / nd, 0.0);
  return {log_mean, std::sqrt(rel_var)};
}

template <class Draws>
numerics::McEstimate mc_estimate_parallel(const Draws& draws, std::size_t n_draws) {
  const std::size_t n_blocks = (n_draws + kMcBlock - 1) / kMcBlock;
  std::vector<LogMoments> parts(n_blocks);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(n_blocks); ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * kMcBlock;
    parts[static_cast<std::size_t>(b)] = block_moments(draws, begin, std::min(begin + kMcBlock, n_draws));
  }
  LogMoments total;
  for (const auto& p : parts) merge(total, p);
  return finish(total, n_draws);
}

template <class Draws>
numerics::McEstimate mc_estimate_serial(const Draws& draws, std::size_t n_draws) {
  LogMoments total;
  for (std::size_t begin = 0; begin < n_draws; begin += kMcBlock)
    merge(total, block_moments(draws, begin, std::min(begin + kMcBlock, n_draws)));
  return finish(total, n_draws);
}

}  // namespace bfsurf::detail
