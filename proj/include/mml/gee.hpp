#pragma once

#include <string>
#include <vector>

#include "mml/modelspec.hpp"

namespace mml {

/// Marginal-mean model for GEE: log-linear components of the declared
/// (non-nested) marginals only; the joint table is never materialized.
/// y stacks the marginal frequency vectors in declaration order.
class GeeModel {
 public:
  static GeeModel build(const VariableScheme& scheme, const std::vector<Mask>& marginals,
                        CodingKind coding = CodingKind::local) {
    if (coding != CodingKind::local && coding != CodingKind::spanning)
      throw SchemeError("GEE supports local and spanning codings");
    if (marginals.empty()) throw SchemeError("no marginals declared");
    GeeModel g;
    g.scheme_ = scheme;
    g.marginals_ = marginals;
    g.coding_ = coding;
    for (std::size_t i = 0; i < marginals.size(); ++i) {
      scheme.check_mask(marginals[i]);
      if (marginals[i] == 0) throw SchemeError("empty marginal");
      for (std::size_t j = 0; j < i; ++j)
        if ((marginals[i] & marginals[j]) == marginals[i] ||
            (marginals[i] & marginals[j]) == marginals[j])
          throw SchemeError("GEE marginals must be non-nested");
      g.yoff_.push_back(g.ylen_);
      g.ylen_ += scheme.category_count(marginals[i]);
    }
    // house every nonempty effect contained in some marginal
    std::vector<Mask> effects;
    for (Mask e = 1; e < (Mask(1u) << scheme.size()); ++e)
      for (std::size_t i = 0; i < marginals.size(); ++i)
        if ((e & marginals[i]) == e) {
          g.house_.push_back(int(i));
          effects.push_back(e);
          break;
        }
    std::vector<std::size_t> ord(effects.size());
    for (std::size_t k = 0; k < ord.size(); ++k) ord[k] = k;
    std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
      if (g.house_[a] != g.house_[b]) return g.house_[a] < g.house_[b];
      if (popcount(effects[a]) != popcount(effects[b])) return popcount(effects[a]) < popcount(effects[b]);
      return effects[a] < effects[b];
    });
    std::vector<int> house_sorted;
    for (std::size_t k : ord) {
      g.blocks_.push_back(contrast_matrix(scheme, marginals[std::size_t(g.house_[k])], effects[k], coding));
      house_sorted.push_back(g.house_[k]);
      g.offset_.push_back(g.ncomp_);
      g.ncomp_ += std::size_t(g.blocks_.back().columns.cols());
    }
    g.house_ = std::move(house_sorted);

    // per-marginal reconstruction parameterizations (mixed parameterization)
    for (std::size_t i = 0; i < marginals.size(); ++i) {
      VariableScheme sub = scheme.sub_scheme(marginals[i]);
      std::vector<Mask> inters;
      for (std::size_t j = 0; j < i; ++j) {
        Mask o = marginals[j] & marginals[i];
        if (o != 0) inters.push_back(o);
      }
      auto olds = inters.empty() ? inters : detail::maximal_elements(inters);
      std::sort(olds.begin(), olds.end());
      olds.erase(std::unique(olds.begin(), olds.end()), olds.end());
      MarginalSequence ms;
      for (Mask o : olds) ms.marginals.push_back(compress(o, marginals[i], scheme));
      ms.marginals.push_back(sub.full_mask());
      g.mini_.push_back(MLLParameterization::build(sub, ms, coding, false));
      g.old_global_.push_back(std::move(olds));
    }
    return g;
  }

  const VariableScheme& scheme() const { return scheme_; }
  const std::vector<Mask>& marginals() const { return marginals_; }
  std::size_t n_components() const { return ncomp_; }
  std::size_t y_length() const { return ylen_; }
  std::size_t y_offset(std::size_t i) const { return yoff_[i]; }

  /// y = M'n: stacked observed marginal frequencies.
  Vec stack(const Table& n) const {
    Vec y = Vec::Zero(Eigen::Index(ylen_));
    for (std::size_t i = 0; i < marginals_.size(); ++i) {
      auto proj = scheme_.projection(marginals_[i]);
      for (std::size_t v = 0; v < scheme_.cell_count(); ++v)
        y[Eigen::Index(yoff_[i] + proj[v])] += n[v];
    }
    return y;
  }

  /// Component values of stacked marginal frequencies (probability scale per
  /// marginal; contrasts of nonempty effects are scale invariant).
  Vec lambda_of_y(const Vec& y) const {
    Vec lam = Vec::Zero(Eigen::Index(ncomp_));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& blk = blocks_[b];
      std::size_t i = std::size_t(house_[b]);
      Vec v = y.segment(Eigen::Index(yoff_[i]), Eigen::Index(scheme_.category_count(marginals_[i])));
      for (Eigen::Index r = 0; r < v.size(); ++r)
        v[r] = detail::checked_log(v[r], "marginal cell");
      lam.segment(Eigen::Index(offset_[b]), blk.columns.cols()) = blk.columns.transpose() * v;
    }
    return lam;
  }

  /// Expected stacked marginal frequencies for the component values: each
  /// marginal is reconstructed in declaration order, matching the already
  /// fixed sub-marginals, so the reconstruction is consistent and every
  /// marginal totals N.
  Vec mu(const Vec& lambda, double N) const {
    if (std::size_t(lambda.size()) != ncomp_) throw SchemeError("component vector length mismatch");
    Vec out = Vec::Zero(Eigen::Index(ylen_));
    std::vector<Vec> q(marginals_.size());
    for (std::size_t i = 0; i < marginals_.size(); ++i) {
      const auto& mp = mini_[i];
      Vec lam_i = Vec::Zero(Eigen::Index(mp.n_components()));
      for (std::size_t b = 0; b < mp.blocks().size(); ++b) {
        if (!mp.block_included(b)) continue;
        const auto& blk = mp.blocks()[b];
        Eigen::Index nb = blk.columns.cols();
        // effects housed in the final (full) marginal take model values;
        // effects housed in an earlier one are read off the fixed reconstructions
        bool is_new = std::size_t(mp.housing(blk.effect)) + 1 == mp.sequence().marginals.size();
        if (is_new) {
          Mask ge = expand(blk.effect, marginals_[i]);
          lam_i.segment(Eigen::Index(mp.offset(b)), nb) =
              lambda.segment(Eigen::Index(offset_of_effect(ge)), nb);
        } else {
          Mask go = old_global_[i][std::size_t(mp.housing(blk.effect))];
          Vec qo = marginal_of(q, go);
          lam_i.segment(Eigen::Index(mp.offset(b)), nb) = mp.block_lambda(b, qo);
        }
      }
      q[i] = mp.invert(lam_i).cells();
      out.segment(Eigen::Index(yoff_[i]), q[i].size()) = N * q[i];
    }
    return out;
  }

  /// Working covariance of y under the pairwise conditional independence
  /// (M_i\M_j) ⊥ (M_j\M_i) | M_i∩M_j at the marginal probabilities mu/N.
  Mat working_cov_ci(const Vec& mu_vec, double N) const {
    Mat V = Mat::Zero(Eigen::Index(ylen_), Eigen::Index(ylen_));
    for (std::size_t i = 0; i < marginals_.size(); ++i) {
      VariableScheme si = scheme_.sub_scheme(marginals_[i]);
      Vec mi = mu_vec.segment(Eigen::Index(yoff_[i]), Eigen::Index(si.cell_count()));
      for (std::size_t a = 0; a < si.cell_count(); ++a)
        V(Eigen::Index(yoff_[i] + a), Eigen::Index(yoff_[i] + a)) = mi[Eigen::Index(a)];
      for (std::size_t j = 0; j < i; ++j) {
        VariableScheme sj = scheme_.sub_scheme(marginals_[j]);
        Vec mj = mu_vec.segment(Eigen::Index(yoff_[j]), Eigen::Index(sj.cell_count()));
        Mask shared = marginals_[i] & marginals_[j];
        Vec ms;
        std::vector<std::size_t> pi, pj;
        if (shared != 0) {
          pi = si.projection(compress(shared, marginals_[i], scheme_));
          pj = sj.projection(compress(shared, marginals_[j], scheme_));
          ms = Vec::Zero(Eigen::Index(scheme_.category_count(shared)));
          for (std::size_t a = 0; a < si.cell_count(); ++a) ms[Eigen::Index(pi[a])] += mi[Eigen::Index(a)];
        }
        for (std::size_t a = 0; a < si.cell_count(); ++a)
          for (std::size_t b = 0; b < sj.cell_count(); ++b) {
            double joint;
            if (shared == 0)
              joint = mi[Eigen::Index(a)] * mj[Eigen::Index(b)] / N;
            else if (pi[a] != pj[b])
              joint = 0.0;
            else
              joint = mi[Eigen::Index(a)] * mj[Eigen::Index(b)] / ms[Eigen::Index(pi[a])];
            double c = joint - mi[Eigen::Index(a)] * mj[Eigen::Index(b)] / N;
            V(Eigen::Index(yoff_[i] + a), Eigen::Index(yoff_[j] + b)) = c;
            V(Eigen::Index(yoff_[j] + b), Eigen::Index(yoff_[i] + a)) = c;
          }
      }
    }
    for (std::size_t i = 0; i < marginals_.size(); ++i) {
      std::size_t ci = scheme_.category_count(marginals_[i]);
      Vec mi = mu_vec.segment(Eigen::Index(yoff_[i]), Eigen::Index(ci));
      V.block(Eigen::Index(yoff_[i]), Eigen::Index(yoff_[i]), Eigen::Index(ci), Eigen::Index(ci)) -=
          mi * mi.transpose() / N;
    }
    return V;
  }

  /// Exact covariance of y at a joint frequency table: M'D_mM - mu mu'/N.
  Mat exact_cov(const Table& m_joint) const {
    double N = m_joint.sum();
    Mat MDM = Mat::Zero(Eigen::Index(ylen_), Eigen::Index(ylen_));
    std::vector<std::vector<std::size_t>> proj;
    for (Mask m : marginals_) proj.push_back(scheme_.projection(m));
    for (std::size_t v = 0; v < scheme_.cell_count(); ++v)
      for (std::size_t i = 0; i < marginals_.size(); ++i)
        for (std::size_t j = 0; j < marginals_.size(); ++j)
          MDM(Eigen::Index(yoff_[i] + proj[i][v]), Eigen::Index(yoff_[j] + proj[j][v])) += m_joint[v];
    Vec muv = stack(m_joint);
    return MDM - muv * muv.transpose() / N;
  }

  /// Stacked contrast matrix B (block per effect within its marginal's rows).
  Mat stacked_B() const {
    Mat B = Mat::Zero(Eigen::Index(ylen_), Eigen::Index(ncomp_));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      std::size_t i = std::size_t(house_[b]);
      B.block(Eigen::Index(yoff_[i]), Eigen::Index(offset_[b]), blocks_[b].columns.rows(),
              blocks_[b].columns.cols()) = blocks_[b].columns;
    }
    return B;
  }

  std::size_t offset_of_effect(Mask e) const {
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      if (blocks_[b].effect == e) return offset_[b];
    throw SchemeError("effect not in model");
  }

 private:
  static Mask compress(Mask m, Mask within, const VariableScheme& sc) {
    Mask out = 0;
    int pos = 0;
    for (int j = 0; j < sc.size(); ++j)
      if (within & (Mask(1u) << j)) {
        if (m & (Mask(1u) << j)) out |= Mask(1u) << pos;
        ++pos;
      }
    return out;
  }

  Mask expand(Mask local, Mask within) const {
    Mask out = 0;
    int pos = 0;
    for (int j = 0; j < scheme_.size(); ++j)
      if (within & (Mask(1u) << j)) {
        if (local & (Mask(1u) << pos)) out |= Mask(1u) << j;
        ++pos;
      }
    return out;
  }

  /// marginal of `go` from the earliest reconstructed table containing it.
  Vec marginal_of(const std::vector<Vec>& q, Mask go) const {
    for (std::size_t j = 0; j < marginals_.size(); ++j) {
      if (q[j].size() == 0) continue;
      if ((go & marginals_[j]) != go) continue;
      VariableScheme sj = scheme_.sub_scheme(marginals_[j]);
      auto p = sj.projection(compress(go, marginals_[j], scheme_));
      Vec out = Vec::Zero(Eigen::Index(scheme_.category_count(go)));
      for (std::size_t c = 0; c < sj.cell_count(); ++c) out[Eigen::Index(p[c])] += q[j][Eigen::Index(c)];
      return out;
    }
    throw SchemeError("no reconstructed marginal contains the requested sub-marginal");
  }

  VariableScheme scheme_;
  std::vector<Mask> marginals_;
  CodingKind coding_ = CodingKind::local;
  std::vector<ContrastBlock> blocks_;
  std::vector<int> house_;
  std::vector<std::size_t> offset_;
  std::vector<std::size_t> yoff_;
  std::size_t ylen_ = 0, ncomp_ = 0;
  std::vector<MLLParameterization> mini_;
  std::vector<std::vector<Mask>> old_global_;
};

struct GeeOptions {
  enum class Solver { ns2, ns1 };
  enum class Working { ci, user };
  Solver solver = Solver::ns2;
  Working working = Working::ci;
  Mat user_V;  // fixed working covariance when working == user
  double tol = 1e-8;
  int max_iter = 500;
  double epsilon = 1e-6;
};

struct GeeResult {
  Vec beta_tilde;
  Vec mu_tilde;
  Vec tau;
  Vec scale;  // fitted per-marginal log scales (zero under covariance-type working V)
  Mat sandwich_cov;
  Mat working_V;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> warnings;
};

namespace detail {

/// Mean with free per-marginal log scales s (nuisance directions of the mean
/// model; covariance-type working matrices drive them back to zero).
inline Vec gee_mu(const GeeModel& model, const Mat& X, const Vec& theta, double N) {
  Eigen::Index p = X.cols();
  Vec mu = model.mu(X * theta.head(p), N);
  for (std::size_t i = 0; i < model.marginals().size(); ++i) {
    Eigen::Index len = Eigen::Index(model.scheme().category_count(model.marginals()[i]));
    mu.segment(Eigen::Index(model.y_offset(i)), len) *= std::exp(theta[p + Eigen::Index(i)]);
  }
  return mu;
}

/// d mu / d theta: numeric in beta, analytic in the scales.
inline Mat gee_jacobian(const GeeModel& model, const Mat& X, const Vec& theta, double N) {
  Eigen::Index p = X.cols();
  Eigen::Index r = Eigen::Index(model.marginals().size());
  Mat J = Mat::Zero(Eigen::Index(model.y_length()), p + r);
  for (Eigen::Index k = 0; k < p; ++k) {
    double h = 1e-6 * std::max(1.0, std::abs(theta[k]));
    Vec tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    J.col(k) = (gee_mu(model, X, tp, N) - gee_mu(model, X, tm, N)) / (2.0 * h);
  }
  Vec mu = gee_mu(model, X, theta, N);
  for (Eigen::Index i = 0; i < r; ++i) {
    Eigen::Index len = Eigen::Index(model.scheme().category_count(model.marginals()[std::size_t(i)]));
    J.block(Eigen::Index(model.y_offset(std::size_t(i))), p + i, len, 1) =
        mu.segment(Eigen::Index(model.y_offset(std::size_t(i))), len);
  }
  return J;
}

inline Mat pinv(const Mat& A) { return Eigen::CompleteOrthogonalDecomposition<Mat>(A).pseudoInverse(); }

}  // namespace detail

/// Solve the GEE for beta in lambda = X beta over the model's components.
/// The mean is mu(beta, s) with one free log-scale per marginal; with a
/// covariance-type working matrix the fitted scales are zero and every fitted
/// marginal totals N.
inline GeeResult fit_gee(const Table& n, const GeeModel& model, const Mat& X,
                         const GeeOptions& opts = {}) {
  if (std::size_t(X.rows()) != model.n_components()) throw SchemeError("design row count mismatch");
  GeeResult res;
  double N = n.sum();
  Vec y = model.stack(n);
  Vec yadj = y;
  {
    bool warned = false;
    for (Eigen::Index i = 0; i < yadj.size(); ++i)
      if (yadj[i] == 0.0) {
        yadj[i] = opts.epsilon;
        if (!warned) res.warnings.push_back("zero observed marginal cell adjusted by epsilon");
        warned = true;
      }
  }

  Eigen::Index p = X.cols();
  Eigen::Index r = Eigen::Index(model.marginals().size());
  Vec lam0 = model.lambda_of_y(yadj);
  Vec theta = Vec::Zero(p + r);
  theta.head(p) = (X.transpose() * X).ldlt().solve(X.transpose() * lam0);
  Mat C = orthogonal_complement(X);
  Vec tau = Vec::Zero(C.cols());
  Mat B = model.stacked_B();

  auto working = [&](const Vec& mu_vec) {
    return opts.working == GeeOptions::Working::user ? opts.user_V
                                                     : model.working_cov_ci(mu_vec, N);
  };

  Vec mu_vec = detail::gee_mu(model, X, theta, N);
  int it = 0;
  bool converged = false;
  if (opts.solver == GeeOptions::Solver::ns1) {
    for (; it < opts.max_iter; ++it) {
      Mat V = working(mu_vec);
      Mat Vi = detail::pinv(V);
      Mat J = detail::gee_jacobian(model, X, theta, N);
      Vec score = J.transpose() * Vi * (y - mu_vec);
      if (score.cwiseAbs().maxCoeff() < opts.tol) {
        converged = true;
        break;
      }
      Mat I = J.transpose() * Vi * J;
      Eigen::LDLT<Mat> ldlt(I);
      Vec dir = ldlt.solve(score);
      if (!(ldlt.info() == Eigen::Success) || !dir.allFinite()) {
        dir = detail::pinv(I) * score;
        res.warnings.push_back("pseudoinverse applied to GEE information");
      }
      double sn = score.norm(), step = 1.0;
      bool ok = false;
      for (int h = 0; h < 30; ++h) {
        Vec tt = theta + step * dir;
        try {
          Vec mt = detail::gee_mu(model, X, tt, N);
          Vec st = J.transpose() * Vi * (y - mt);
          if (st.norm() < sn) {
            theta = tt;
            mu_vec = mt;
            ok = true;
            break;
          }
        } catch (const Error&) {
        }
        step *= 0.5;
      }
      if (!ok) {
        res.warnings.push_back("GEE step search stalled");
        break;
      }
    }
  } else {  // ns2: Gauss-Newton on (theta, tau) for y - mu + V D_mu^{-1} B C tau = 0
    Eigen::Index q = C.cols();
    auto resid = [&](const Vec& th, const Vec& t, Mat& V) {
      Vec m = detail::gee_mu(model, X, th, N);
      V = working(m);
      Vec g = y - m + V * (m.cwiseInverse().asDiagonal() * (B * (C * t)));
      return std::make_pair(m, g);
    };
    Mat V;
    auto [m0, g] = resid(theta, tau, V);
    mu_vec = m0;
    double gn = g.norm();
    for (; it < opts.max_iter; ++it) {
      if (g.cwiseAbs().maxCoeff() < opts.tol) {
        converged = true;
        break;
      }
      Mat JG(g.size(), p + r + q);
      for (Eigen::Index k = 0; k < p + r; ++k) {  // numeric, keeping the tau coupling
        double h = 1e-6 * std::max(1.0, std::abs(theta[k]));
        Vec tp = theta, tm = theta;
        tp[k] += h;
        tm[k] -= h;
        Mat Vt;
        JG.col(k) = (resid(tp, tau, Vt).second - resid(tm, tau, Vt).second) / (2.0 * h);
      }
      JG.rightCols(q) = V * (mu_vec.cwiseInverse().asDiagonal() * (B * C));
      Vec dz = JG.colPivHouseholderQr().solve(-g);
      double step = 1.0;
      bool ok = false;
      for (int h = 0; h < 40; ++h) {
        Vec tt = theta + step * dz.head(p + r);
        Vec ut = tau + step * dz.tail(q);
        try {
          Mat Vt;
          auto [mt, gt] = resid(tt, ut, Vt);
          if (gt.norm() < gn * (1.0 - 1e-4 * step) || gt.norm() < opts.tol) {
            theta = tt;
            tau = ut;
            mu_vec = mt;
            V = Vt;
            g = gt;
            gn = gt.norm();
            ok = true;
            break;
          }
        } catch (const Error&) {
        }
        step *= 0.5;
      }
      if (!ok) {
        res.warnings.push_back("GEE step search stalled");
        break;
      }
    }
  }
  res.beta_tilde = theta.head(p);
  res.scale = theta.tail(r);
  res.mu_tilde = mu_vec;
  res.tau = tau;
  res.converged = converged;
  res.iterations = it;
  res.working_V = working(mu_vec);
  return res;
}

/// Huber sandwich covariance of beta, with V* = M'D_nM.
inline Mat sandwich(const GeeModel& model, const Mat& X, const GeeResult& res, const Table& n) {
  double N = n.sum();
  Eigen::Index p = X.cols();
  Vec theta(p + Eigen::Index(model.marginals().size()));
  theta << res.beta_tilde, res.scale;
  Mat J = detail::gee_jacobian(model, X, theta, N);
  Mat Vi = detail::pinv(res.working_V);
  Mat Vstar = model.exact_cov(n);
  Mat I = J.transpose() * Vi * J;
  Mat Jt = J.transpose() * Vi * Vstar * Vi * J;
  Mat Ii = detail::pinv(I);
  Mat full = Ii * Jt * Ii;
  return full.topLeftCorner(p, p);
}

}  // namespace mml
