#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "mml/modelspec.hpp"

namespace mml {

struct FitOptions {
  enum class Algorithm { lagrangian, scoring };
  Algorithm algorithm = Algorithm::lagrangian;
  double zero_cell_epsilon = 1e-6;
  double tol_constraint = 1e-8;
  double tol_score = 1e-8;
  int max_iter = 5000;
  bool compute_cov = true;
  InvertOptions invert;  // inner inversion budget for scoring
};

struct FitResult {
  Table m_hat;
  Vec lambda_hat;  // probability-scale components
  Vec beta_hat;
  Mat cov_m, cov_beta;
  double G2 = 0.0;  // against the saturated model
  int df = 0;
  double bic = 0.0;
  int iterations = 0;
  bool converged = false;
  double max_constraint_violation = 0.0;
  bool epsilon_adjusted = false;
  std::vector<std::string> warnings;
};

/// Poisson kernel log-likelihood n'log m - 1'm (multinomial constant dropped).
inline double loglik(const Table& m, const Table& n) {
  double L = 0.0;
  for (std::size_t i = 0; i < m.scheme().cell_count(); ++i) {
    if (!(m[i] >= detail::kPositivityFloor)) throw PositivityError("nonpositive expected frequency");
    L += n[i] * std::log(m[i]) - m[i];
  }
  return L;
}

namespace detail {

/// Columns of Lambda·C without materializing the full Jacobian: only blocks
/// whose components carry nonzero C rows are expanded.
inline Mat jacobian_times(const MLLParameterization& param, const Vec& m, const Mat& C) {
  const auto& sc = param.scheme();
  Mat out = Mat::Zero(Eigen::Index(sc.cell_count()), C.cols());
  if (C.cols() == 0) return out;
  for (std::size_t b = 0; b < param.blocks().size(); ++b) {
    if (!param.block_included(b)) continue;
    const auto& blk = param.blocks()[b];
    Eigen::Index nb = blk.columns.cols();
    Eigen::Index off = Eigen::Index(param.offset(b));
    if (C.middleRows(off, nb).cwiseAbs().maxCoeff() == 0.0) continue;
    auto proj = sc.projection(blk.marginal);
    Vec vals = Vec::Zero(Eigen::Index(blk.rows));
    {
      Vec pm = Vec::Zero(Eigen::Index(sc.category_count(blk.marginal)));
      for (std::size_t v = 0; v < sc.cell_count(); ++v) pm[Eigen::Index(proj[v])] += m[Eigen::Index(v)];
      if (blk.shared_rows)
        vals = pm;
      else
        for (std::size_t g = 0; g < blk.cell_row.size(); ++g)
          for (std::size_t c = 0; c < blk.cell_row[g].size(); ++c)
            if (blk.cell_row[g][c] >= 0) vals[blk.cell_row[g][c]] += pm[Eigen::Index(c)];
    }
    for (Eigen::Index r = 0; r < vals.size(); ++r)
      if (!(vals[r] >= kPositivityFloor)) throw PositivityError("nonpositive marginal sum");
    Mat rowsC = C.middleRows(off, nb);
    for (Eigen::Index col = 0; col < nb; ++col) {
      const auto& rows = blk.cell_row[blk.shared_rows ? 0 : std::size_t(col)];
      for (std::size_t v = 0; v < sc.cell_count(); ++v) {
        long r = rows[proj[v]];
        if (r >= 0) out.row(Eigen::Index(v)) += blk.columns(r, col) / vals[r] * rowsC.row(col);
      }
    }
  }
  return out;
}

inline Vec adjust_zero_cells(const Table& n, double eps, bool& adjusted) {
  Vec out = n.cells();
  adjusted = false;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (out[i] == 0.0) {
      out[i] = eps;
      adjusted = true;
    }
  return out;
}

inline void finalize_fit(FitResult& fit, const MLLParameterization& param, const ModelSpec& spec,
                         const Vec& nadj, const Vec& m) {
  const auto& sc = param.scheme();
  fit.m_hat = Table(sc, m, TableKind::counts);
  fit.lambda_hat = param.compute_lambda(fit.m_hat);
  Mat XtX = spec.X.transpose() * spec.X;
  fit.beta_hat = XtX.ldlt().solve(spec.X.transpose() * fit.lambda_hat);
  fit.df = spec.df();
  double g2 = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) g2 += 2.0 * nadj[i] * (std::log(nadj[i]) - std::log(m[i]));
  fit.G2 = std::max(0.0, g2);
  fit.bic = fit.G2 + 2.0 * double(fit.df) * std::log(nadj.sum());
}

}  // namespace detail

/// Asymptotic covariances of the fitted frequencies and of beta. The inner
/// projection uses H = [Lambda·C, 1] so that the multinomial total is treated
/// as fixed; cov_beta follows by the delta method through beta=(X'X)^{-1}X'lambda.
inline std::pair<Mat, Mat> covariances(const FitResult& fit, const ModelSpec& spec) {
  if (!fit.converged) throw Error("covariances require a converged fit");
  const auto& param = spec.param;
  const Vec& m = fit.m_hat.cells();
  Eigen::Index K = m.size();
  Mat LC = detail::jacobian_times(param, m, spec.C);
  Mat H(K, LC.cols() + 1);
  if (LC.cols() > 0) H.leftCols(LC.cols()) = LC;
  H.col(LC.cols()) = Vec::Ones(K);
  Mat DH = m.asDiagonal() * H;
  Mat inner = H.transpose() * DH;
  Mat innerInv = Eigen::CompleteOrthogonalDecomposition<Mat>(inner).pseudoInverse();
  Mat cov_m = Mat(m.asDiagonal()) - DH * innerInv * DH.transpose();

  Mat L = param.jacobian(fit.m_hat);
  Mat A = (spec.X.transpose() * spec.X).ldlt().solve(spec.X.transpose()) * L.transpose();
  // lambda_hat is on the probability scale: project out the total rescaling
  // direction, under which the non-empty components are invariant anyway.
  Mat cov_beta = A * cov_m * A.transpose();
  return {cov_m, cov_beta};
}

/// Aitchison-Silvey Lagrangian iteration on log m.
inline FitResult fit_lagrangian(const Table& n, const ModelSpec& spec, const FitOptions& opts = {}) {
  if (n.kind() != TableKind::counts) throw SchemeError("fit expects a table of counts");
  const auto& param = spec.param;
  const auto& sc = param.scheme();
  FitResult fit;
  Vec nadj = detail::adjust_zero_cells(n, opts.zero_cell_epsilon, fit.epsilon_adjusted);
  if (fit.epsilon_adjusted)
    fit.warnings.push_back("zero observed cells replaced by epsilon; re-check at epsilon/10");

  if (spec.C.cols() == 0) {  // saturated: m = n maximizes the likelihood
    fit.converged = true;
    detail::finalize_fit(fit, param, spec, nadj, nadj);
    if (opts.compute_cov) std::tie(fit.cov_m, fit.cov_beta) = covariances(fit, spec);
    return fit;
  }

  Vec m = nadj.array() + opts.zero_cell_epsilon;
  auto update = [&](const Vec& mc, Vec& u, double& cviol) {
    Vec lam = param.compute_lambda_freq(Table(sc, mc, TableKind::counts));
    Vec Cl = spec.C.transpose() * lam;
    cviol = Cl.size() ? Cl.cwiseAbs().maxCoeff() : 0.0;
    Mat LC = detail::jacobian_times(param, mc, spec.C);
    Mat Hm = LC.transpose() * (mc.asDiagonal() * LC);
    double scale = Hm.cwiseAbs().maxCoeff();
    Eigen::LDLT<Mat> ldlt(Hm);
    Vec rhs = LC.transpose() * (nadj - mc) + Cl;
    Vec mult = ldlt.solve(rhs);
    if (!(ldlt.info() == Eigen::Success) || !mult.allFinite() ||
        (Hm * mult - rhs).cwiseAbs().maxCoeff() > 1e-6 * std::max(1.0, scale)) {
      Hm += 1e-10 * std::max(1.0, scale) * Mat::Identity(Hm.rows(), Hm.cols());
      mult = Hm.ldlt().solve(rhs);
      if (fit.warnings.empty() || fit.warnings.back().find("ridge") == std::string::npos)
        fit.warnings.push_back("constraint normal matrix near-singular; ridge applied");
    }
    u = (nadj.array() / mc.array() - 1.0).matrix() - LC * mult;
  };

  Vec u;
  double cviol = 0.0;
  update(m, u, cviol);
  double unorm = u.norm();
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    if (cviol < opts.tol_constraint && u.cwiseAbs().maxCoeff() < opts.tol_score) {
      fit.converged = true;
      break;
    }
    double step = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 30; ++h) {
      Vec mt = (m.array().log() + step * u.array()).exp();
      Vec ut;
      double cv;
      bool ok = true;
      try {
        update(mt, ut, cv);
      } catch (const PositivityError&) {
        ok = false;
      }
      if (ok && ut.allFinite() && ut.norm() <= unorm) {
        m = mt;
        u = ut;
        unorm = ut.norm();
        cviol = cv;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      fit.warnings.push_back("step search stalled");
      break;
    }
  }
  fit.iterations = it;
  fit.max_constraint_violation = cviol;
  detail::finalize_fit(fit, param, spec, nadj, m);
  if (fit.converged && opts.compute_cov) std::tie(fit.cov_m, fit.cov_beta) = covariances(fit, spec);
  return fit;
}

/// Fisher scoring on beta in the freedom form lambda = X beta; the inner step
/// recovers m from lambda via parameterization inversion.
inline FitResult fit_scoring(const Table& n, const ModelSpec& spec, const FitOptions& opts = {}) {
  if (n.kind() != TableKind::counts) throw SchemeError("fit expects a table of counts");
  const auto& param = spec.param;
  const auto& sc = param.scheme();
  if (!param.include_empty())
    throw SchemeError("scoring needs the full (frequency-scale) parameterization");
  FitResult fit;
  Vec nadj = detail::adjust_zero_cells(n, opts.zero_cell_epsilon, fit.epsilon_adjusted);
  if (fit.epsilon_adjusted)
    fit.warnings.push_back("zero observed cells replaced by epsilon; re-check at epsilon/10");

  InvertOptions iopts = opts.invert;
  // empty-effect component index (housed in the first marginal, first block)
  Eigen::Index empty_idx = -1;
  for (std::size_t b = 0; b < param.blocks().size(); ++b)
    if (param.blocks()[b].effect == 0) empty_idx = Eigen::Index(param.offset(b));

  auto m_of_lambda = [&](const Vec& lam) {
    Table p = param.invert(lam, iopts);
    Vec lp = param.compute_lambda(p);
    double scale = std::exp(lam[empty_idx] - lp[empty_idx]);
    return Vec(p.cells() * scale);
  };

  Mat XtX = spec.X.transpose() * spec.X;
  Vec beta = XtX.ldlt().solve(spec.X.transpose() *
                              param.compute_lambda_freq(Table(sc, nadj, TableKind::counts)));
  Vec m = m_of_lambda(spec.X * beta);
  double L = loglik(Table(sc, m, TableKind::counts), Table(sc, nadj, TableKind::counts));

  int it = 0;
  for (; it < opts.max_iter; ++it) {
    Mat Lam = param.jacobian(Table(sc, m, TableKind::counts));
    Eigen::PartialPivLU<Mat> lu(Lam);
    Vec r = (nadj.array() / m.array() - 1.0).matrix();
    // s = X' Lambda^{-1} (n/m - 1);  I = X' Lambda^{-1} D_m^{-1} Lambda'^{-1} X
    Vec s = spec.X.transpose() * lu.solve(r);
    if (s.cwiseAbs().maxCoeff() < opts.tol_score) {
      fit.converged = true;
      break;
    }
    Mat W = lu.solve(Mat(m.cwiseInverse().asDiagonal()) * lu.solve(Mat::Identity(m.size(), m.size())).transpose());
    Mat I = spec.X.transpose() * W * spec.X;
    double scale = I.cwiseAbs().maxCoeff();
    Eigen::LDLT<Mat> ldlt(I);
    Vec dir = ldlt.solve(s);
    if (!(ldlt.info() == Eigen::Success) || !dir.allFinite()) {
      I += 1e-10 * std::max(1.0, scale) * Mat::Identity(I.rows(), I.cols());
      dir = I.ldlt().solve(s);
      fit.warnings.push_back("information matrix near-singular; ridge applied");
    }
    double step = 1.0;
    bool accepted = false;
    for (int h = 0; h <= 30; ++h) {
      Vec bt = beta + step * dir;
      try {
        Vec mt = m_of_lambda(spec.X * bt);
        double Lt = loglik(Table(sc, mt, TableKind::counts), Table(sc, nadj, TableKind::counts));
        if (Lt > L - 1e-12) {
          beta = bt;
          m = mt;
          L = Lt;
          accepted = true;
          break;
        }
      } catch (const InversionError&) {
        // fall through to a half step
      } catch (const PositivityError&) {
      }
      step *= 0.5;
    }
    if (!accepted) {
      fit.warnings.push_back("step search stalled");
      break;
    }
  }
  fit.iterations = it;
  {
    Vec Cl = spec.C.cols() ? Vec(spec.C.transpose() * param.compute_lambda_freq(Table(sc, m, TableKind::counts)))
                           : Vec();
    fit.max_constraint_violation = Cl.size() ? Cl.cwiseAbs().maxCoeff() : 0.0;
  }
  detail::finalize_fit(fit, param, spec, nadj, m);
  fit.beta_hat = beta;
  if (fit.converged && opts.compute_cov) std::tie(fit.cov_m, fit.cov_beta) = covariances(fit, spec);
  return fit;
}

inline FitResult fit(const Table& n, const ModelSpec& spec, const FitOptions& opts = {}) {
  return opts.algorithm == FitOptions::Algorithm::scoring ? fit_scoring(n, spec, opts)
                                                          : fit_lagrangian(n, spec, opts);
}

struct LRTest {
  double G2 = 0.0;
  int df = 0;
  double p = 1.0;
};

/// Likelihood-ratio test of the more restrictive fit0 against fit1.
inline LRTest lr_test(const FitResult& fit0, const FitResult& fit1, const Table& n) {
  if (fit0.m_hat.scheme().cell_count() != n.scheme().cell_count() ||
      fit1.m_hat.scheme().cell_count() != n.scheme().cell_count())
    throw SchemeError("mismatched tables in likelihood-ratio test");
  LRTest t;
  double g2 = 0.0;
  for (std::size_t i = 0; i < n.scheme().cell_count(); ++i)
    if (n[i] > 0) g2 += 2.0 * n[i] * (std::log(fit1.m_hat[i]) - std::log(fit0.m_hat[i]));
  t.G2 = std::max(0.0, g2);
  t.df = fit0.df - fit1.df;
  if (t.df > 0) {
    boost::math::chi_squared chi(double(t.df));
    t.p = boost::math::cdf(boost::math::complement(chi, t.G2));
  } else {
    t.p = 1.0;
  }
  return t;
}

/// Information criterion as reported alongside G2 (penalty 2*df*log N).
inline double bic(const FitResult& fit, double N) {
  return fit.G2 + 2.0 * double(fit.df) * std::log(N);
}

}  // namespace mml
