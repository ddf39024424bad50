#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "nhmm/fullsum_lattice.hpp"

namespace nhmm {

/// binomial(n, k) as a double; exact for the small arguments used here.
inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(r);
}

/// Calls `visit(path)` for every monotone state path of length `frames` that
/// starts in state 0, ends in state `states - 1`, and only loops or advances.
inline void for_each_monotone_path(std::size_t frames, std::size_t states,
                                   const std::function<void(const std::vector<std::size_t>&)>& visit) {
  if (states == 0 || frames < states) return;
  std::vector<std::size_t> path(frames, 0);
  std::function<void(std::size_t)> rec = [&](std::size_t t) {
    if (t == frames) {
      if (path[frames - 1] == states - 1) visit(path);
      return;
    }
    const std::size_t prev = path[t - 1];
    // Remaining frames must still cover the remaining states.
    if (states - 1 - prev <= frames - 1 - t) {
      path[t] = prev;
      rec(t + 1);
    }
    if (prev + 1 < states) {
      path[t] = prev + 1;
      rec(t + 1);
    }
  };
  if (frames == 1) {
    visit(path);
    return;
  }
  rec(1);
}

/// Scaled log weight of one explicit path.
inline double path_log_weight(const std::vector<std::size_t>& path, const MatrixD& log_phi,
                              const TransitionField& field, const Scales& scales) {
  double w = scales.lpm * log_phi(0, path[0]);
  for (std::size_t t = 1; t < path.size(); ++t) {
    const std::size_t from = path[t - 1];
    const double tr = path[t] == from ? field.log_loop(t, from) : field.log_forward(t, from);
    w += scales.tm * tr + scales.lpm * log_phi(t, path[t]);
  }
  return w;
}

inline constexpr double kBruteForceMaxPaths = 1e6;

/// Reference lattice statistics by explicit enumeration of every path.
inline LatticeStats brute_force(const MatrixD& log_phi, const TransitionField& field,
                                const Scales& scales) {
  detail::validate_lattice_inputs(log_phi, field, scales);
  const std::size_t T = log_phi.rows(), S = log_phi.cols();
  if (binomial(T - 1, S - 1) > kBruteForceMaxPaths)
    throw std::invalid_argument("instance too large for path enumeration");

  std::vector<std::vector<std::size_t>> paths;
  std::vector<double> weights;
  for_each_monotone_path(T, S, [&](const std::vector<std::size_t>& p) {
    paths.push_back(p);
    weights.push_back(path_log_weight(p, log_phi, field, scales));
  });

  LatticeStats out;
  out.log_likelihood = log_sum_exp(weights);
  out.gamma = MatrixD(T, S, 0.0);
  out.xi_loop = MatrixD(T - 1, S, 0.0);
  out.xi_fwd = MatrixD(T - 1, S, 0.0);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const double post = std::exp(weights[i] - out.log_likelihood);
    const auto& p = paths[i];
    for (std::size_t t = 0; t < T; ++t) out.gamma(t, p[t]) += post;
    for (std::size_t t = 0; t + 1 < T; ++t) {
      if (p[t + 1] == p[t])
        out.xi_loop(t, p[t]) += post;
      else
        out.xi_fwd(t, p[t]) += post;
    }
  }
  return out;
}

}  // namespace nhmm
