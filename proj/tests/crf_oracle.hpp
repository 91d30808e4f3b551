// Brute-force enumeration over all T^L tag paths (test-only).
#pragma once

#include "matchvie/ad/tape.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace matchvie::testing {

struct Enumeration {
  double log_z = 0;
  std::vector<int> best;
  double best_score = -std::numeric_limits<double>::infinity();
};

/// Scores every path independently: start + emissions + transitions + end.
inline Enumeration enumerate_paths(const ad::Mat<double>& em, const ad::Mat<double>& trans,
                                   const ad::Mat<double>& start, const ad::Mat<double>& end) {
  const int L = static_cast<int>(em.rows()), T = static_cast<int>(em.cols());
  std::vector<int> path(static_cast<std::size_t>(L), 0);
  std::vector<double> scores;
  Enumeration out;
  while (true) {
    double s = start(0, path[0]) + end(0, path[static_cast<std::size_t>(L - 1)]);
    for (int t = 0; t < L; ++t) {
      s += em(t, path[static_cast<std::size_t>(t)]);
      if (t > 0) s += trans(path[static_cast<std::size_t>(t - 1)], path[static_cast<std::size_t>(t)]);
    }
    scores.push_back(s);
    if (s > out.best_score) {  // strict: first (lexicographically smallest) path wins ties
      out.best_score = s;
      out.best = path;
    }
    int k = L - 1;
    while (k >= 0 && ++path[static_cast<std::size_t>(k)] == T) path[static_cast<std::size_t>(k--)] = 0;
    if (k < 0) break;
  }
  double m = -std::numeric_limits<double>::infinity();
  for (double s : scores) m = std::max(m, s);
  double acc = 0;
  for (double s : scores) acc += std::exp(s - m);
  out.log_z = m + std::log(acc);
  return out;
}

}  // namespace matchvie::testing
