#include "pneudrive/optimizer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pneudrive::sysid {

std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::gradient:
      return "gradient";
    case Termination::cost_change:
      return "cost_change";
    case Termination::step_size:
      return "step_size";
    case Termination::max_iterations:
      return "max_iterations";
    case Termination::stalled:
      return "stalled";
    case Termination::simplex_size:
      return "simplex_size";
    case Termination::max_evaluations:
      return "max_evaluations";
  }
  return "unknown";
}

bool is_converged(Termination t) {
  return t == Termination::gradient || t == Termination::cost_change || t == Termination::step_size ||
         t == Termination::simplex_size;
}

namespace {

void check_box(const std::vector<double>& x, const Box& box) {
  if (box.lower.size() != x.size() || box.upper.size() != x.size()) {
    throw std::invalid_argument("bounds do not match parameter count");
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(box.lower[i] <= box.upper[i])) throw std::invalid_argument("lower bound above upper bound");
  }
}

void project(std::vector<double>& x, const Box& box) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], box.lower[i], box.upper[i]);
}

double half_sq(const Eigen::VectorXd& r) {
  const double c = 0.5 * r.squaredNorm();
  return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
}

}  // namespace

OptimizeResult minimize_least_squares(const ResidualFn& residuals, std::size_t n_residuals,
                                      std::vector<double> x0, const Box& box, const LmOptions& opt) {
  check_box(x0, box);
  const std::size_t n = x0.size();
  const auto m = static_cast<Eigen::Index>(n_residuals);

  OptimizeResult out;
  std::vector<double> x = std::move(x0);
  project(x, box);

  Eigen::VectorXd r(m);
  const auto eval = [&](const std::vector<double>& at, Eigen::VectorXd& into) {
    residuals(at, std::span<double>(into.data(), static_cast<std::size_t>(into.size())));
    ++out.evaluations;
  };
  eval(x, r);
  double cost = half_sq(r);
  if (!std::isfinite(cost)) {
    out.x = x;
    out.cost = cost;
    out.termination = Termination::stalled;
    return out;
  }

  Eigen::MatrixXd jac(m, static_cast<Eigen::Index>(n));
  Eigen::VectorXd r_trial(m);
  double lambda = opt.initial_lambda;
  double nu = 2.0;
  out.termination = Termination::max_iterations;

  for (std::size_t iter = 0; iter < opt.max_iterations; ++iter) {
    out.iterations = iter + 1;
    for (std::size_t j = 0; j < n; ++j) {
      double h = opt.fd_step * (1.0 + std::abs(x[j]));
      if (x[j] + h > box.upper[j]) h = -h;
      auto xp = x;
      xp[j] += h;
      eval(xp, r_trial);
      jac.col(static_cast<Eigen::Index>(j)) = (r_trial - r) / h;
    }
    const Eigen::VectorXd g = jac.transpose() * r;
    const Eigen::MatrixXd hess = jac.transpose() * jac;

    // Coordinates pinned at a bound with the gradient pushing outward stay fixed.
    double pg = 0.0;
    std::vector<Eigen::Index> free;
    for (std::size_t j = 0; j < n; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const bool blocked = (x[j] <= box.lower[j] && g[jj] > 0.0) || (x[j] >= box.upper[j] && g[jj] < 0.0);
      if (blocked) continue;
      pg = std::max(pg, std::abs(g[jj]));
      free.push_back(jj);
    }
    const auto nf = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd hess_free(nf, nf);
    Eigen::VectorXd g_free(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      g_free[a] = g[free[a]];
      for (Eigen::Index b = 0; b < nf; ++b) hess_free(a, b) = hess(free[a], free[b]);
    }
    if (!std::isfinite(pg)) {
      out.termination = Termination::stalled;
      break;
    }
    if (pg <= opt.gtol) {
      out.termination = Termination::gradient;
      break;
    }

    bool accepted = false;
    bool done = false;
    while (!accepted) {
      Eigen::MatrixXd a = hess_free;
      for (Eigen::Index j = 0; j < nf; ++j) a(j, j) += lambda * std::max(hess_free(j, j), 1e-12);
      const Eigen::VectorXd delta = a.ldlt().solve(-g_free);

      std::vector<double> trial = x;
      for (Eigen::Index j = 0; j < nf; ++j) trial[static_cast<std::size_t>(free[j])] += delta[j];
      project(trial, box);
      Eigen::VectorXd step(static_cast<Eigen::Index>(n));
      for (std::size_t j = 0; j < n; ++j) step[static_cast<Eigen::Index>(j)] = trial[j] - x[j];

      double xnorm = 0.0;
      for (double v : x) xnorm += v * v;
      xnorm = std::sqrt(xnorm);
      if (step.norm() <= opt.xtol * (xnorm + opt.xtol)) {
        out.termination = Termination::step_size;
        done = true;
        break;
      }

      const double predicted = -(g.dot(step) + 0.5 * step.dot(hess * step));
      eval(trial, r_trial);
      const double trial_cost = half_sq(r_trial);
      if (predicted > 0.0 && trial_cost < cost) {
        const double rho = (cost - trial_cost) / predicted;
        lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        nu = 2.0;
        const double reduction = cost - trial_cost;
        x = std::move(trial);
        r.swap(r_trial);
        cost = trial_cost;
        accepted = true;
        if (reduction <= opt.ftol * cost) {
          out.termination = Termination::cost_change;
          done = true;
        }
      } else {
        lambda *= nu;
        nu *= 2.0;
        if (lambda > 1e16) {
          out.termination = Termination::stalled;
          done = true;
          break;
        }
      }
    }
    if (done) break;
  }

  out.x = std::move(x);
  out.cost = cost;
  return out;
}

OptimizeResult minimize_nelder_mead(const CostFn& cost, std::vector<double> x0, const Box& box,
                                    const NelderMeadOptions& opt) {
  check_box(x0, box);
  const std::size_t n = x0.size();
  project(x0, box);

  OptimizeResult out;
  const auto f = [&](std::vector<double>& p) {
    project(p, box);
    ++out.evaluations;
    const double v = cost(p);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<std::vector<double>> simplex(n + 1, x0);
  std::vector<double> values(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double span = box.upper[i] - box.lower[i];
    double step = opt.initial_step * (span > 0.0 ? span : 1.0);
    if (simplex[i + 1][i] + step > box.upper[i]) step = -step;
    simplex[i + 1][i] += step;
  }
  for (std::size_t i = 0; i <= n; ++i) values[i] = f(simplex[i]);

  std::vector<std::size_t> order(n + 1);
  out.termination = Termination::max_evaluations;
  while (out.evaluations < opt.max_evaluations) {
    ++out.iterations;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    const auto best = order.front();
    const auto worst = order.back();
    const auto second = order[n - 1];

    double size = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      for (std::size_t j = 0; j < n; ++j) size = std::max(size, std::abs(simplex[i][j] - simplex[best][j]));
    }
    const double spread = std::abs(values[worst] - values[best]);
    if (size <= opt.size_tol || (std::isfinite(values[worst]) &&
                                 spread <= opt.ftol * (std::abs(values[best]) + 1e-300))) {
      out.termination = Termination::simplex_size;
      break;
    }

    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (std::size_t j = 0; j < n; ++j) centroid[j] += simplex[i][j] / static_cast<double>(n);
    }
    const auto along = [&](double coef) {
      std::vector<double> p(n);
      for (std::size_t j = 0; j < n; ++j) p[j] = centroid[j] + coef * (simplex[worst][j] - centroid[j]);
      return p;
    };

    auto reflected = along(-1.0);
    const double fr = f(reflected);
    if (fr < values[best]) {
      auto expanded = along(-2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        simplex[worst] = std::move(expanded);
        values[worst] = fe;
      } else {
        simplex[worst] = std::move(reflected);
        values[worst] = fr;
      }
    } else if (fr < values[second]) {
      simplex[worst] = std::move(reflected);
      values[worst] = fr;
    } else {
      auto contracted = fr < values[worst] ? along(-0.5) : along(0.5);
      const double fc = f(contracted);
      if (fc < std::min(fr, values[worst])) {
        simplex[worst] = std::move(contracted);
        values[worst] = fc;
      } else {
        for (std::size_t i = 0; i <= n; ++i) {
          if (i == best) continue;
          for (std::size_t j = 0; j < n; ++j) simplex[i][j] = simplex[best][j] + 0.5 * (simplex[i][j] - simplex[best][j]);
          values[i] = f(simplex[i]);
        }
      }
    }
  }

  const auto best = static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
  out.x = simplex[best];
  out.cost = values[best];
  return out;
}

}  // namespace pneudrive::sysid
