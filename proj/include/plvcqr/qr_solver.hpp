#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "plvcqr/errors.hpp"

namespace plvcqr {

/// Score function; psi(0, tau) = tau.
inline double psi(double u, double tau) noexcept { return u < 0.0 ? tau - 1.0 : tau; }

/// Check loss rho_tau(u) = u * (tau - I(u < 0)).
inline double rho(double u, double tau) noexcept { return u * (tau - (u < 0.0 ? 1.0 : 0.0)); }

inline double check_loss(const Eigen::Ref<const Eigen::VectorXd>& r, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) s += rho(r(i), tau);
  return s;
}

inline double check_loss(const Eigen::Ref<const Eigen::VectorXd>& r, double tau,
                         const Eigen::Ref<const Eigen::VectorXd>& w) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) s += w(i) * rho(r(i), tau);
  return s;
}

struct L1Penalty {
  std::vector<Eigen::Index> indices;
  double lambda = 0.0;
};

struct QrProblem {
  Eigen::MatrixXd design;
  Eigen::VectorXd response;
  double tau = 0.5;
  Eigen::VectorXd weights;  // empty means all ones
  std::optional<L1Penalty> penalty;
};

enum class SolveStatus { optimal, max_iter, degenerate };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iter: return "max-iter";
    case SolveStatus::degenerate: return "degenerate";
  }
  return "?";
}

struct QrSolution {
  Eigen::VectorXd coefficients;
  double objective = 0.0;
  Eigen::VectorXd residuals;  // one per design row, exact zeros on the basis
  SolveStatus status = SolveStatus::optimal;
  Eigen::Index rank = 0;
  int iterations = 0;
  std::vector<Eigen::Index> basis;  // interpolated rows; >= N are penalty rows
};

enum class SolverMethod { automatic, simplex, interior_point };

struct SolverOptions {
  SolverMethod method = SolverMethod::automatic;
  int max_iter = 0;  // 0 picks a size-based cap
  std::optional<Eigen::VectorXd> start;  // warm start coefficients
};

/// Objective recomputed from coefficients.
inline double qr_objective(const QrProblem& pb, const Eigen::VectorXd& coef) {
  const Eigen::VectorXd r = pb.response - pb.design * coef;
  double obj = pb.weights.size() ? check_loss(r, pb.tau, pb.weights) : check_loss(r, pb.tau);
  if (pb.penalty)
    for (auto j : pb.penalty->indices) obj += pb.penalty->lambda * std::abs(coef(j));
  return obj;
}

namespace detail {

struct SimplexResult {
  Eigen::VectorXd coef;
  std::vector<Eigen::Index> basis;
  int iterations = 0;
  bool converged = false;
  bool unique = true;
  bool degenerate_vertex = false;  // zero-residual rows outside the basis
};

inline double zero_tolerance(const Eigen::VectorXd& b) {
  return 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff());
}

// Picks d linearly independent rows of A, preferring small |r|.
inline std::vector<Eigen::Index> crossover_basis(const Eigen::MatrixXd& A,
                                                 const Eigen::VectorXd& r) {
  const Eigen::Index M = A.rows(), d = A.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(M));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(r(a)) < std::abs(r(b));
  });
  std::vector<Eigen::Index> basis;
  Eigen::MatrixXd Q(d, d);
  for (double thresh : {1e-6, 1e-10}) {
    basis.clear();
    Eigen::Index k = 0;
    for (Eigen::Index idx : order) {
      if (k == d) break;
      Eigen::VectorXd v = A.row(idx).transpose();
      const double nrm = v.norm();
      if (nrm == 0.0) continue;
      for (int pass = 0; pass < 2; ++pass)
        if (k > 0) v -= Q.leftCols(k) * (Q.leftCols(k).transpose() * v);
      const double vn = v.norm();
      if (vn > thresh * nrm) {
        Q.col(k++) = v / vn;
        basis.push_back(idx);
      }
    }
    if (k == d) return basis;
  }
  throw SolverError("crossover: design rows do not span the coefficient space");
}

// Exact vertex descent for min sum rho_tau(b - A c), A full column rank.
// Each step leaves the current vertex along the steepest basis edge and moves
// to the minimizing breakpoint of the one-dimensional piecewise-linear loss.
inline SimplexResult simplex(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double tau,
                             std::vector<Eigen::Index> basis, int max_iter) {
  const Eigen::Index M = A.rows(), d = A.cols();
  const double ztol = zero_tolerance(b);
  SimplexResult res;
  std::vector<char> in_basis(static_cast<std::size_t>(M), 0);
  Eigen::MatrixXd H(d, d), Hinv(d, d);
  Eigen::VectorXd coef(d), r(M), g(d), c(d), u(M), hb(d);
  std::vector<Eigen::Index> zero_rows;
  std::vector<std::pair<double, Eigen::Index>> heap;

  auto refresh = [&] {
    std::fill(in_basis.begin(), in_basis.end(), 0);
    for (Eigen::Index k = 0; k < d; ++k) {
      H.row(k) = A.row(basis[static_cast<std::size_t>(k)]);
      hb(k) = b(basis[static_cast<std::size_t>(k)]);
      in_basis[static_cast<std::size_t>(basis[static_cast<std::size_t>(k)])] = 1;
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(H);
    Hinv = lu.inverse();
    coef = lu.solve(hb);
    r.noalias() = b - A * coef;
    for (auto i : basis) r(i) = 0.0;
  };
  refresh();

  Eigen::VectorXd s(M);
  for (int it = 0; it < max_iter; ++it) {
    if (it > 0 && it % 40 == 0) refresh();
    zero_rows.clear();
    for (Eigen::Index i = 0; i < M; ++i) {
      if (in_basis[static_cast<std::size_t>(i)]) {
        s(i) = 0.0;
      } else if (std::abs(r(i)) <= ztol) {
        s(i) = 0.0;
        zero_rows.push_back(i);
      } else {
        s(i) = r(i) < 0.0 ? tau - 1.0 : tau;
      }
    }
    g.noalias() = A.transpose() * s;
    c.noalias() = Hinv.transpose() * g;

    Eigen::MatrixXd ZH;
    if (!zero_rows.empty()) {
      ZH.resize(static_cast<Eigen::Index>(zero_rows.size()), d);
      for (std::size_t m = 0; m < zero_rows.size(); ++m)
        ZH.row(static_cast<Eigen::Index>(m)) = A.row(zero_rows[m]) * Hinv;
    }

    // Directional derivatives along +/- each edge; sigma = +1 drives the
    // leaving row's residual negative.
    double best = 0.0;
    Eigen::Index best_k = -1;
    double best_sigma = 0.0, best_raw = 0.0;
    bool flat = false;
    for (Eigen::Index k = 0; k < d; ++k) {
      double deg_plus = 0.0, deg_minus = 0.0;
      for (Eigen::Index m = 0; m < ZH.rows(); ++m) {
        const double v = ZH(m, k);
        deg_plus += v < 0.0 ? tau * (-v) : (1.0 - tau) * v;
        deg_minus += v > 0.0 ? tau * v : (1.0 - tau) * (-v);
      }
      const double dp = -c(k) + (1.0 - tau) + deg_plus;
      const double dm = c(k) + tau + deg_minus;
      const double scale = 1.0 + std::abs(c(k)) + deg_plus + deg_minus;
      const double nrm = Hinv.col(k).norm();
      if (std::abs(dp) <= 1e-10 * scale || std::abs(dm) <= 1e-10 * scale) flat = true;
      if (dp < -1e-10 * scale && dp / nrm < best) {
        best = dp / nrm;
        best_k = k;
        best_sigma = 1.0;
        best_raw = dp;
      }
      if (dm < -1e-10 * scale && dm / nrm < best) {
        best = dm / nrm;
        best_k = k;
        best_sigma = -1.0;
        best_raw = dm;
      }
    }
    if (best_k < 0) {
      res.converged = true;
      res.unique = !flat;
      res.degenerate_vertex = !zero_rows.empty();
      res.iterations = it;
      break;
    }

    const Eigen::VectorXd delta = best_sigma * Hinv.col(best_k);
    u.noalias() = A * delta;
    heap.clear();
    for (Eigen::Index i = 0; i < M; ++i) {
      if (in_basis[static_cast<std::size_t>(i)] || std::abs(r(i)) <= ztol) continue;
      if (r(i) * u(i) > 0.0) heap.emplace_back(r(i) / u(i), i);
    }
    auto cmp = [](const auto& a, const auto& bb) { return a.first > bb.first; };
    std::make_heap(heap.begin(), heap.end(), cmp);
    double slope = best_raw;
    Eigen::Index enter = -1;
    double step = 0.0;
    while (!heap.empty()) {
      std::pop_heap(heap.begin(), heap.end(), cmp);
      const auto [si, i] = heap.back();
      heap.pop_back();
      slope += std::abs(u(i));
      if (slope >= 0.0) {
        enter = i;
        step = si;
        break;
      }
    }
    if (enter < 0) throw SolverError("simplex: unbounded descent direction");

    const Eigen::Index leave = basis[static_cast<std::size_t>(best_k)];
    coef += step * delta;
    r -= step * u;
    r(enter) = 0.0;
    for (auto i : basis) r(i) = 0.0;
    r(leave) = -step * best_sigma;

    // Replace row best_k of H by A.row(enter).
    const Eigen::RowVectorXd eh = A.row(enter) * Hinv;
    const double piv = eh(best_k);
    if (std::abs(piv) < 1e-14) {
      basis[static_cast<std::size_t>(best_k)] = enter;
      refresh();
      continue;
    }
    Eigen::RowVectorXd vh = eh;
    vh(best_k) -= 1.0;
    const Eigen::VectorXd col = Hinv.col(best_k);
    Hinv.noalias() -= (col / piv) * vh;
    basis[static_cast<std::size_t>(best_k)] = enter;
    in_basis[static_cast<std::size_t>(leave)] = 0;
    in_basis[static_cast<std::size_t>(enter)] = 1;
    res.iterations = it + 1;
  }
  refresh();
  res.coef = coef;
  res.basis = basis;
  return res;
}

// Mehrotra predictor-corrector on the bounded dual
//   max b'a  s.t.  A'a = (1 - tau) A'1,  0 <= a <= 1,
// returning the primal coefficients. Used only to seed the simplex.
inline Eigen::VectorXd interior_point(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                                      double tau, int max_iter = 100) {
  const Eigen::Index M = A.rows(), d = A.cols();
  const Eigen::VectorXd cvec = -b;
  const Eigen::VectorXd rhs = (1.0 - tau) * (A.transpose() * Eigen::VectorXd::Ones(M));
  Eigen::VectorXd x = Eigen::VectorXd::Constant(M, 1.0 - tau);
  Eigen::VectorXd t = Eigen::VectorXd::Constant(M, tau);
  Eigen::VectorXd beta = A.colPivHouseholderQr().solve(b);
  Eigen::VectorXd v = -beta;
  Eigen::VectorXd r = b - A * beta;
  const double d0 = std::max(1e-3, 0.1 * r.cwiseAbs().mean());
  Eigen::VectorXd z = (-r).cwiseMax(0.0).array() + d0;
  Eigen::VectorXd w = r.cwiseMax(0.0).array() + d0;

  auto max_step = [](const Eigen::VectorXd& val, const Eigen::VectorXd& dir) {
    double a = 1.0;
    for (Eigen::Index i = 0; i < val.size(); ++i)
      if (dir(i) < 0.0) a = std::min(a, -val(i) / dir(i));
    return a;
  };

  Eigen::MatrixXd Nmat(d, d);
  Eigen::VectorXd qinv(M), rhat(M), dx(M), dz(M), dw(M), dv(d);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd rp = rhs - A.transpose() * x;
    const Eigen::VectorXd rd = cvec - A * v - z + w;
    const double gap = x.dot(z) + t.dot(w);
    const double mu = gap / (2.0 * static_cast<double>(M));
    if (gap < 1e-11 * (1.0 + std::abs(cvec.dot(x))) && rd.lpNorm<Eigen::Infinity>() < 1e-9 &&
        rp.lpNorm<Eigen::Infinity>() < 1e-9)
      break;

    qinv = (z.cwiseQuotient(x) + w.cwiseQuotient(t)).cwiseInverse();
    Nmat.noalias() = A.transpose() * qinv.asDiagonal() * A;
    Eigen::LLT<Eigen::MatrixXd> llt(Nmat);
    if (llt.info() != Eigen::Success) break;

    auto direction = [&](const Eigen::VectorXd& comp_x, const Eigen::VectorXd& comp_t) {
      rhat = rd - comp_x.cwiseQuotient(x) + comp_t.cwiseQuotient(t);
      dv = llt.solve(rp + A.transpose() * qinv.cwiseProduct(rhat));
      dx = qinv.cwiseProduct(A * dv - rhat);
      dz = (comp_x - z.cwiseProduct(dx)).cwiseQuotient(x);
      dw = (comp_t + w.cwiseProduct(dx)).cwiseQuotient(t);
    };

    direction(-x.cwiseProduct(z), -t.cwiseProduct(w));
    double ap = std::min(max_step(x, dx), max_step(t, -dx));
    double ad = std::min(max_step(z, dz), max_step(w, dw));
    const double mu_aff = ((x + ap * dx).dot(z + ad * dz) + (t - ap * dx).dot(w + ad * dw)) /
                          (2.0 * static_cast<double>(M));
    const double sigma = std::pow(mu_aff / mu, 3.0);
    const Eigen::VectorXd cx = Eigen::VectorXd::Constant(M, sigma * mu) - x.cwiseProduct(z) -
                               dx.cwiseProduct(dz);
    const Eigen::VectorXd ct = Eigen::VectorXd::Constant(M, sigma * mu) - t.cwiseProduct(w) +
                               dx.cwiseProduct(dw);
    direction(cx, ct);
    ap = std::min(1.0, 0.9995 * std::min(max_step(x, dx), max_step(t, -dx)));
    ad = std::min(1.0, 0.9995 * std::min(max_step(z, dz), max_step(w, dw)));
    x += ap * dx;
    t = Eigen::VectorXd::Ones(M) - x;
    v += ad * dv;
    z += ad * dz;
    w += ad * dw;
  }
  return -v;
}

// RNG-free deterministic perturbation used to escape a degenerate vertex.
inline Eigen::VectorXd perturbation(Eigen::Index M, double scale, std::uint64_t salt) {
  Eigen::VectorXd p(M);
  std::uint64_t state = 0x9E3779B97F4A7C15ull ^ salt;
  for (Eigen::Index i = 0; i < M; ++i) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    p(i) = scale * (static_cast<double>(z >> 11) * 0x1.0p-53 - 0.5);
  }
  return p;
}

}  // namespace detail

struct CertificateResult {
  bool feasible = false;
  double residual = 0.0;  // || X_Z' (w a) + g ||_inf relative to the score scale
  std::size_t zero_rows = 0;
};

/// Checks first-order optimality of `coef` for the problem: scores a in
/// [tau-1, tau] on zero-residual rows must cancel the gradient of the
/// nonzero-residual rows. Solved by projected accelerated gradient.
inline CertificateResult optimality_certificate(const QrProblem& pb, const Eigen::VectorXd& coef,
                                                double tol = 1e-6) {
  // Work with the penalty as augmented rows, like the solver does.
  const Eigen::Index N = pb.design.rows(), d = pb.design.cols();
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> resid, wts;
  const Eigen::VectorXd r = pb.response - pb.design * coef;
  for (Eigen::Index i = 0; i < N; ++i) {
    rows.emplace_back(pb.design.row(i));
    resid.push_back(r(i));
    wts.push_back(pb.weights.size() ? pb.weights(i) : 1.0);
  }
  if (pb.penalty && pb.penalty->lambda > 0.0) {
    for (auto j : pb.penalty->indices) {
      for (double sgn : {1.0, -1.0}) {
        Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(d);
        e(j) = sgn;
        rows.push_back(e);
        resid.push_back(-sgn * coef(j));
        wts.push_back(pb.penalty->lambda);
      }
    }
  }
  const double ztol = detail::zero_tolerance(pb.response);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
  std::vector<std::size_t> zero;
  double scale = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    scale += wts[i] * rows[i].cwiseAbs().sum();
    if (std::abs(resid[i]) <= ztol) {
      zero.push_back(i);
    } else {
      g += wts[i] * psi(resid[i], pb.tau) * rows[i].transpose();
    }
  }
  CertificateResult out;
  out.zero_rows = zero.size();
  scale = std::max(scale / static_cast<double>(rows.size()), 1e-300);
  if (zero.empty()) {
    out.residual = g.lpNorm<Eigen::Infinity>() / scale;
    out.feasible = out.residual <= tol;
    return out;
  }
  Eigen::MatrixXd Mz(d, static_cast<Eigen::Index>(zero.size()));
  for (std::size_t m = 0; m < zero.size(); ++m)
    Mz.col(static_cast<Eigen::Index>(m)) = wts[zero[m]] * rows[zero[m]].transpose();
  const double lo = pb.tau - 1.0, hi = pb.tau;
  auto proj = [&](Eigen::VectorXd a) { return a.cwiseMax(lo).cwiseMin(hi).eval(); };

  // Square nonsingular case: solve directly.
  if (Mz.cols() == d) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(Mz);
    if (lu.isInvertible()) {
      Eigen::VectorXd a = lu.solve(-g);
      const Eigen::VectorXd pa = proj(a);
      out.residual = (Mz * pa + g).lpNorm<Eigen::Infinity>() / scale;
      out.feasible = out.residual <= tol;
      return out;
    }
  }
  const double L = std::max(Mz.squaredNorm(), 1e-300);  // Frobenius bound on the Lipschitz constant
  Eigen::VectorXd a = Eigen::VectorXd::Constant(Mz.cols(), pb.tau - 0.5), yk = a, prev = a;
  double tk = 1.0;
  for (int it = 0; it < 20000; ++it) {
    const Eigen::VectorXd grad = Mz.transpose() * (Mz * yk + g);
    prev = a;
    a = proj(yk - grad / L);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
    yk = a + ((tk - 1.0) / tn) * (a - prev);
    tk = tn;
    if (it % 100 == 0 && (Mz * a + g).lpNorm<Eigen::Infinity>() / scale <= 0.1 * tol) break;
  }
  out.residual = (Mz * a + g).lpNorm<Eigen::Infinity>() / scale;
  out.feasible = out.residual <= tol;
  return out;
}

/// Minimizes sum w_i rho_tau(y_i - x_i'b) (+ lambda * sum_{j in P} |b_j|) to
/// an exact vertex of the LP.
inline QrSolution solve(const QrProblem& pb, const SolverOptions& opt = {}) {
  const Eigen::Index N = pb.design.rows(), d = pb.design.cols();
  if (!(pb.tau > 0.0 && pb.tau < 1.0)) throw DomainError("tau must lie in (0,1)");
  if (pb.response.size() != N) throw DimensionError("response length != design rows");
  if (pb.weights.size() && pb.weights.size() != N)
    throw DimensionError("weights length != design rows");
  if (pb.weights.size() && (pb.weights.array() <= 0.0).any())
    throw DomainError("weights must be positive");
  if (pb.penalty) {
    if (pb.penalty->lambda < 0.0) throw DomainError("penalty lambda must be >= 0");
    for (auto j : pb.penalty->indices)
      if (j < 0 || j >= d) throw DimensionError("penalty index out of range");
  }
  if (N == 0) throw EmptyInputError("empty QR problem");

  // Augmented, row-scaled LP: weights fold into the rows because
  // w * rho(r) = rho(w * r) for w > 0.
  const bool penalized = pb.penalty && pb.penalty->lambda > 0.0 && !pb.penalty->indices.empty();
  const Eigen::Index P = penalized ? static_cast<Eigen::Index>(pb.penalty->indices.size()) : 0;
  Eigen::MatrixXd A(N + 2 * P, d);
  Eigen::VectorXd b(N + 2 * P);
  A.topRows(N) = pb.design;
  b.head(N) = pb.response;
  if (pb.weights.size()) {
    A.topRows(N) = pb.weights.asDiagonal() * pb.design;
    b.head(N) = pb.weights.cwiseProduct(pb.response);
  }
  for (Eigen::Index k = 0; k < P; ++k) {
    const auto j = pb.penalty->indices[static_cast<std::size_t>(k)];
    A.row(N + 2 * k).setZero();
    A.row(N + 2 * k + 1).setZero();
    A(N + 2 * k, j) = pb.penalty->lambda;
    A(N + 2 * k + 1, j) = -pb.penalty->lambda;
    b(N + 2 * k) = 0.0;
    b(N + 2 * k + 1) = 0.0;
  }
  const Eigen::Index M = A.rows();

  QrSolution sol;
  sol.status = SolveStatus::optimal;
  sol.coefficients = Eigen::VectorXd::Zero(d);

  // Drop collinear columns; the reduced problem has full column rank.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> cqr(A);
  cqr.setThreshold(1e-10);
  const Eigen::Index rank = cqr.rank();
  sol.rank = rank;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < rank; ++k) keep.push_back(cqr.colsPermutation().indices()(k));
  std::sort(keep.begin(), keep.end());
  if (rank < d) sol.status = SolveStatus::degenerate;

  if (rank > 0) {
    Eigen::MatrixXd Ar(M, rank);
    for (Eigen::Index k = 0; k < rank; ++k) Ar.col(k) = A.col(keep[static_cast<std::size_t>(k)]);
    const int cap = opt.max_iter > 0 ? opt.max_iter : static_cast<int>(20 * (M + rank) + 1000);

    Eigen::VectorXd start;
    SolverMethod method = opt.method;
    if (method == SolverMethod::automatic) method = SolverMethod::simplex;
    if (opt.start) {
      if (opt.start->size() != d) throw DimensionError("warm start length != design columns");
      start.resize(rank);
      for (Eigen::Index k = 0; k < rank; ++k) start(k) = (*opt.start)(keep[static_cast<std::size_t>(k)]);
    } else if (method == SolverMethod::interior_point) {
      start = detail::interior_point(Ar, b, pb.tau);
    } else {
      const Eigen::VectorXd ls = cqr.solve(b);
      start.resize(rank);
      for (Eigen::Index k = 0; k < rank; ++k) start(k) = ls(keep[static_cast<std::size_t>(k)]);
    }
    const Eigen::VectorXd r0 = b - Ar * start;
    auto basis = detail::crossover_basis(Ar, r0);
    auto sr = detail::simplex(Ar, b, pb.tau, basis, cap);
    int total_iter = sr.iterations;

    // A degenerate vertex can stall edge descent; verify and, if needed,
    // re-enter from a perturbed response.
    auto certify = [&](const detail::SimplexResult& s) {
      QrProblem red;
      red.design = Ar;
      red.response = b;
      red.tau = pb.tau;
      return optimality_certificate(red, s.coef).feasible;
    };
    if (sr.converged && sr.degenerate_vertex && !certify(sr)) {
      const double scale = 1e-7 * std::max(1.0, b.cwiseAbs().maxCoeff());
      for (std::uint64_t attempt = 0; attempt < 3; ++attempt) {
        const Eigen::VectorXd bp = b + detail::perturbation(M, scale, attempt);
        auto sp = detail::simplex(Ar, bp, pb.tau, sr.basis, cap);
        auto so = detail::simplex(Ar, b, pb.tau, sp.basis, cap);
        total_iter += sp.iterations + so.iterations;
        sr = so;
        if (sr.converged && certify(sr)) break;
      }
      if (!certify(sr)) sol.status = SolveStatus::degenerate;
    }
    if (!sr.converged) sol.status = SolveStatus::max_iter;
    else if (!sr.unique && sol.status == SolveStatus::optimal) sol.status = SolveStatus::degenerate;
    sol.iterations = total_iter;
    for (Eigen::Index k = 0; k < rank; ++k)
      sol.coefficients(keep[static_cast<std::size_t>(k)]) = sr.coef(k);
    sol.basis = sr.basis;
  }

  sol.residuals = pb.response - pb.design * sol.coefficients;
  for (auto i : sol.basis)
    if (i < N) sol.residuals(i) = 0.0;
  sol.objective = pb.weights.size() ? check_loss(sol.residuals, pb.tau, pb.weights)
                                    : check_loss(sol.residuals, pb.tau);
  if (penalized)
    for (auto j : pb.penalty->indices) sol.objective += pb.penalty->lambda * std::abs(sol.coefficients(j));
  return sol;
}

/// L1-penalized variant; lambda = 0 reduces to solve().
inline QrSolution solve_l1(const QrProblem& pb, const SolverOptions& opt = {}) {
  if (!pb.penalty) throw ArgumentError("solve_l1: problem has no penalty");
  if (pb.penalty->indices.empty()) throw ArgumentError("solve_l1: empty penalty set");
  if (pb.penalty->lambda < 0.0) throw DomainError("solve_l1: lambda must be >= 0");
  return solve(pb, opt);
}

}  // namespace plvcqr
