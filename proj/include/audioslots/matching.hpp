#pragma once

// Minimum-cost assignment (Hungarian / Kuhn-Munkres with potentials) and the
// permutation-invariant MSE objective built on it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "audioslots/autodiff.hpp"
#include "audioslots/errors.hpp"

namespace audioslots::matching {

namespace detail {
using audioslots::detail::require;
using audioslots::detail::require_shape;
}  // namespace detail

/// rows x cols matrix of pairwise costs. Row = prediction, column = target.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  static CostMatrix from_rows(const std::vector<std::vector<double>>& m) {
    CostMatrix c(m.size(), m.empty() ? 0 : m.front().size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      detail::require(m[i].size() == c.cols, "cost matrix rows have unequal lengths");
      for (std::size_t j = 0; j < c.cols; ++j) c.at(i, j) = m[i][j];
    }
    return c;
  }

  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct Assignment {
  std::vector<std::size_t> permutation;  // prediction index -> target index
  double total_cost = 0.0;
};

namespace detail {

// Among all perfect matchings that use only tight edges, pick the
// lexicographically smallest one, starting from a valid matching.
inline void lexicographic_refine(const std::vector<std::vector<bool>>& tight, std::vector<std::size_t>& col_of_row) {
  const std::size_t n = col_of_row.size();
  std::vector<std::size_t> row_of_col(n);
  for (std::size_t i = 0; i < n; ++i) row_of_col[col_of_row[i]] = i;
  std::vector<bool> fixed(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!tight[i][j] || fixed[row_of_col[j]]) continue;
      if (col_of_row[i] == j) break;
      // Free column col_of_row[i]; row r = row_of_col[j] must reach it via an
      // alternating path over unfixed rows, avoiding column j.
      const std::size_t target = col_of_row[i];
      const std::size_t start = row_of_col[j];
      std::vector<long> prev_row_of_col(n, -1);
      std::vector<bool> seen_col(n, false);
      seen_col[j] = true;
      std::queue<std::size_t> q;
      q.push(start);
      bool found = false;
      while (!q.empty() && !found) {
        const std::size_t r = q.front();
        q.pop();
        for (std::size_t c = 0; c < n; ++c) {
          if (!tight[r][c] || seen_col[c]) continue;
          if (c != target && (fixed[row_of_col[c]] || row_of_col[c] == i)) continue;
          seen_col[c] = true;
          prev_row_of_col[c] = static_cast<long>(r);
          if (c == target) {
            found = true;
            break;
          }
          q.push(row_of_col[c]);
        }
      }
      if (!found) continue;
      // Rotate along the path back from the freed column.
      std::size_t c = target;
      while (true) {
        const std::size_t r = static_cast<std::size_t>(prev_row_of_col[c]);
        const std::size_t old = col_of_row[r];
        col_of_row[r] = c;
        row_of_col[c] = r;
        if (r == start) break;
        c = old;
      }
      col_of_row[i] = j;
      row_of_col[j] = i;
      break;
    }
    fixed[i] = true;
  }
}

}  // namespace detail

/// Globally minimal assignment of a square, finite cost matrix. Among
/// equal-cost optima, the lexicographically smallest permutation is returned.
inline Assignment hungarian(const CostMatrix& c) {
  audioslots::detail::require(c.rows == c.cols, "hungarian: cost matrix must be square, got " + std::to_string(c.rows) +
                                                    "x" + std::to_string(c.cols));
  audioslots::detail::require(c.values.size() == c.rows * c.cols, "hungarian: malformed cost matrix");
  double scale = 0.0;
  for (double v : c.values) {
    audioslots::detail::require(std::isfinite(v), "hungarian: cost matrix has non-finite entries");
    scale = std::max(scale, std::abs(v));
  }
  const std::size_t n = c.rows;
  Assignment a;
  if (n == 0) return a;

  // 1-based potentials formulation; p[j] is the row matched to column j.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;

  const double tol = 1e-9 * (1.0 + scale);
  std::vector<std::vector<bool>> tight(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tight[i][j] = std::abs(c.at(i, j) - u[i + 1] - v[j + 1]) <= tol;
  detail::lexicographic_refine(tight, col_of_row);

  a.permutation = std::move(col_of_row);
  for (std::size_t i = 0; i < n; ++i) a.total_cost += c.at(i, a.permutation[i]);
  return a;
}

enum class Objective { Minimize, Maximize };

/// Optimal assignment under a pairwise score matrix (row = estimate,
/// column = target). Maximization runs hungarian on the negated matrix;
/// total_cost reports the score sum in the original sign.
inline Assignment match_scores(const CostMatrix& scores, Objective objective) {
  if (objective == Objective::Minimize) return hungarian(scores);
  CostMatrix neg = scores;
  for (auto& v : neg.values) v = -v;
  Assignment a = hungarian(neg);
  a.total_cost = -a.total_cost;
  return a;
}

/// Builds the score matrix score(target_j, estimate_i) and matches
/// estimates to targets.
template <class Item>
Assignment match_by_score(const std::vector<Item>& targets, const std::vector<Item>& estimates,
                          const std::function<double(const Item& target, const Item& estimate)>& score,
                          Objective objective) {
  audioslots::detail::require(targets.size() == estimates.size(),
                              "match_by_score: " + std::to_string(targets.size()) + " targets vs " +
                                  std::to_string(estimates.size()) + " estimates");
  const std::size_t n = targets.size();
  CostMatrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s.at(i, j) = score(targets[j], estimates[i]);
  return match_scores(s, objective);
}

/// Per-pair mean squared error between rows of preds [n, ...] and targets
/// [n, ...], accumulated in 64 bits.
template <class T>
CostMatrix mse_cost_matrix(const Tensor<T>& preds, const Tensor<T>& targets) {
  audioslots::detail::require_shape(preds.shape == targets.shape && preds.rank() >= 1,
                                    "pit loss: prediction shape " + to_string(preds.shape) + " vs target shape " +
                                        to_string(targets.shape));
  const std::size_t n = preds.dim(0), cells = preds.size() / n;
  CostMatrix c(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const T* a = preds.data.data() + i * cells;
      const T* b = targets.data.data() + j * cells;
      for (std::size_t k = 0; k < cells; ++k) {
        const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        acc += d * d;
      }
      c.at(i, j) = acc / static_cast<double>(cells);
    }
  return c;
}

template <class T>
struct PitLoss {
  ad::Var<T> loss;
  Assignment assignment;
};

/// Permutation-invariant MSE: mean over matched (prediction, target) pairs
/// and cells. The assignment is a constant of the backward pass.
template <class T>
PitLoss<T> pit_mse_loss(const ad::Var<T>& preds, const Tensor<T>& targets) {
  const CostMatrix cost = mse_cost_matrix(preds.value(), targets);
  PitLoss<T> out;
  out.assignment = hungarian(cost);
  auto& tape = *preds.tape();
  const auto matched = ad::gather_rows(tape.constant(targets), out.assignment.permutation);
  const auto diff = ad::sub(preds, matched);
  out.loss = ad::mean(ad::mul(diff, diff));
  return out;
}

}  // namespace audioslots::matching
