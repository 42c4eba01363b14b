#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace pneudrive::sysid {

/// Fills `residuals` (fixed length) for parameters `x`.
using ResidualFn = std::function<void(std::span<const double> x, std::span<double> residuals)>;
using CostFn = std::function<double(std::span<const double> x)>;

struct Box {
  std::vector<double> lower;
  std::vector<double> upper;
};

enum class Termination { gradient, cost_change, step_size, max_iterations, stalled, simplex_size, max_evaluations };

std::string_view to_string(Termination t);
/// Whether the termination reason counts as convergence.
bool is_converged(Termination t);

struct LmOptions {
  std::size_t max_iterations = 200;
  double ftol = 1e-6;   // relative cost reduction
  double xtol = 1e-8;   // relative step
  double gtol = 1e-10;  // projected gradient, inf-norm
  double fd_step = 1e-7;
  double initial_lambda = 1e-3;
};

struct OptimizeResult {
  std::vector<double> x;
  double cost = 0.0;  // 0.5 * sum r^2 for LM, objective value otherwise
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  Termination termination = Termination::max_iterations;
  bool converged() const { return is_converged(termination); }
};

/// Box-constrained Levenberg-Marquardt with a forward-difference Jacobian.
/// Steps are projected onto the box.
OptimizeResult minimize_least_squares(const ResidualFn& residuals, std::size_t n_residuals,
                                      std::vector<double> x0, const Box& box, const LmOptions& options = {});

struct NelderMeadOptions {
  std::size_t max_evaluations = 4000;
  double initial_step = 0.05;
  double size_tol = 1e-8;
  double ftol = 1e-12;
};

/// Derivative-free simplex search; trial points are clamped into the box.
OptimizeResult minimize_nelder_mead(const CostFn& cost, std::vector<double> x0, const Box& box,
                                    const NelderMeadOptions& options = {});

}  // namespace pneudrive::sysid
