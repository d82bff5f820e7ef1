#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mml/contrasts.hpp"
#include "mml/table.hpp"

namespace mml {

struct InversionError : Error {
  InversionError(const std::string& msg, int step_, double residual_, int iterations_)
      : Error(msg), step(step_), residual(residual_), iterations(iterations_) {}
  int step = -1;
  double residual = 0.0;
  int iterations = 0;
};

struct InvertOptions {
  double ipf_tol = 1e-12;     // marginal-matching residual
  double lambda_tol = 1e-10;  // outer parameter residual
  int max_iter = 10000;
};

struct SmoothnessReport {
  bool variation_independent = true;
  bool hierarchical_complete = true;  // by construction
  DecomposabilityResult decomposability;
  std::vector<std::string> warnings;
};

/// Hierarchical and complete marginal log-linear parameterization over a
/// non-decreasing marginal sequence. Every effect is housed in the first
/// marginal containing it; components are ordered by housing marginal, then
/// by effect cardinality, then by effect bitmask, with the contrast block's
/// category order within an effect.
class MLLParameterization {
 public:
  MLLParameterization() = default;

  static MLLParameterization build(const VariableScheme& scheme, const MarginalSequence& seq,
                                   CodingKind coding = CodingKind::local, bool include_empty = true) {
    seq.validate(scheme);
    MLLParameterization p;
    p.scheme_ = scheme;
    p.seq_ = seq;
    p.coding_ = coding;
    p.include_empty_ = include_empty;
    p.housing_ = assign_effects(scheme, seq);
    p.decomp_ = is_ordered_decomposable(seq);

    std::vector<Mask> order;
    for (Mask e = 0; e < (Mask(1u) << scheme.size()); ++e) order.push_back(e);
    std::sort(order.begin(), order.end(), [&](Mask a, Mask b) {
      if (p.housing_[a] != p.housing_[b]) return p.housing_[a] < p.housing_[b];
      if (popcount(a) != popcount(b)) return popcount(a) < popcount(b);
      return a < b;
    });
    std::size_t off = 0;
    for (Mask e : order) {
      Mask m = seq.marginals[std::size_t(p.housing_[e])];
      p.blocks_.push_back(contrast_matrix(scheme, m, e, coding));
      p.offset_.push_back(off);
      if (e != 0 || include_empty) off += std::size_t(p.blocks_.back().columns.cols());
      p.proj_.push_back(scheme.projection(m));
    }
    p.n_components_ = off;
    return p;
  }

  const VariableScheme& scheme() const { return scheme_; }
  const MarginalSequence& sequence() const { return seq_; }
  CodingKind coding() const { return coding_; }
  bool include_empty() const { return include_empty_; }
  std::size_t n_components() const { return n_components_; }
  const std::vector<ContrastBlock>& blocks() const { return blocks_; }
  int housing(Mask effect) const { return housing_.at(effect); }
  const DecomposabilityResult& decomposability() const { return decomp_; }

  /// component offset of a block; blocks with the empty effect excluded on
  /// the probability scale share the offset of the following block.
  std::size_t offset(std::size_t b) const { return offset_.at(b); }

  bool block_included(std::size_t b) const { return blocks_[b].effect != 0 || include_empty_; }

  /// Human-readable label per component: M(effect) ; effect ; categories.
  std::vector<std::string> component_labels() const {
    std::vector<std::string> out(n_components_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (!block_included(b)) continue;
      const auto& blk = blocks_[b];
      std::string mnames, enames;
      for (const auto& s : scheme_.names_of(blk.marginal)) mnames += s;
      for (const auto& s : scheme_.names_of(blk.effect)) enames += s;
      if (enames.empty()) enames = "0";
      if (mnames.empty()) mnames = "0";
      for (std::size_t c = 0; c < blk.cats.size(); ++c) {
        std::string cat;
        for (int v : blk.cats[c]) cat += (cat.empty() ? "" : ",") + std::to_string(v + 1);
        out[offset_[b] + c] = mnames + ";" + enames + (cat.empty() ? "" : ";" + cat);
      }
    }
    return out;
  }

  /// lambda = B' log(M' p) with p the probability table.
  Vec compute_lambda(const Table& table) const {
    Table p = table.normalized();
    return lambda_of(p.cells());
  }

  /// Same contrasts applied to raw frequencies (no normalization); only the
  /// empty-effect component differs from compute_lambda.
  Vec compute_lambda_freq(const Table& table) const { return lambda_of(table.cells()); }

  /// Jacobian Lambda = M diag(M'm)^{-1} B of lambda w.r.t. the frequency
  /// vector m, cells x components.
  Mat jacobian(const Table& m) const {
    Mat J = Mat::Zero(Eigen::Index(scheme_.cell_count()), Eigen::Index(n_components_));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (!block_included(b)) continue;
      const auto& blk = blocks_[b];
      Vec vals = lump_marginal(b, m.cells());
      for (Eigen::Index r = 0; r < vals.size(); ++r)
        if (!(vals[r] >= detail::kPositivityFloor))
          throw PositivityError("nonpositive marginal sum in Jacobian");
      for (Eigen::Index col = 0; col < blk.columns.cols(); ++col) {
        const auto& rows = blk.cell_row[blk.shared_rows ? 0 : std::size_t(col)];
        for (std::size_t v = 0; v < scheme_.cell_count(); ++v) {
          long r = rows[proj_[b][v]];
          if (r >= 0)
            J(Eigen::Index(v), Eigen::Index(offset_[b]) + col) += blk.columns(r, col) / vals[r];
        }
      }
    }
    return J;
  }

  /// Reconstruct the unique positive probability table with the given
  /// parameter values, marginal by marginal via the mixed parameterization:
  /// at step i, IPF (or damped Gauss-Newton for lumped codings) matches the
  /// previously fixed sub-marginals while holding the step-i components.
  /// Non-convergence raises InversionError — for incompatible values of a
  /// non-ordered-decomposable sequence no joint table exists.
  Table invert(const Vec& lambda, const InvertOptions& opts = {}) const {
    if (std::size_t(lambda.size()) != n_components_)
      throw SchemeError("parameter vector length mismatch");
    std::size_t k = seq_.marginals.size();
    std::vector<Vec> recon(k);  // reconstructed marginal tables, probability scale
    for (std::size_t i = 0; i < k; ++i) {
      Mask Mi = seq_.marginals[i];
      VariableScheme sub = scheme_.sub_scheme(Mi);

      // old marginals to match: maximal elements of {M_j ∩ M_i : j < i}
      std::vector<Mask> inters;
      for (std::size_t j = 0; j < i; ++j) {
        Mask o = seq_.marginals[j] & Mi;
        if (o != 0) inters.push_back(o);
      }
      std::vector<Mask> olds = inters.empty() ? inters : detail::maximal_elements(inters);
      std::sort(olds.begin(), olds.end());
      olds.erase(std::unique(olds.begin(), olds.end()), olds.end());
      std::vector<Vec> targets;
      std::vector<std::vector<std::size_t>> oproj;
      for (Mask o : olds) {
        std::size_t j = 0;
        while ((o & seq_.marginals[j]) != o) ++j;  // earliest container, j < i
        VariableScheme subj = scheme_.sub_scheme(seq_.marginals[j]);
        auto pj = subj.projection(compress_mask(o, seq_.marginals[j]));
        Vec t = Vec::Zero(Eigen::Index(scheme_.category_count(o)));
        for (std::size_t c = 0; c < subj.cell_count(); ++c) t[Eigen::Index(pj[c])] += recon[j][Eigen::Index(c)];
        targets.push_back(std::move(t));
        oproj.push_back(sub.projection(compress_mask(o, Mi)));
      }

      // blocks housed at step i (non-empty effects)
      std::vector<std::size_t> new_blocks;
      for (std::size_t b = 0; b < blocks_.size(); ++b)
        if (housing_[blocks_[b].effect] == int(i) && blocks_[b].effect != 0) new_blocks.push_back(b);

      Vec q;
      if (coding_ == CodingKind::local || coding_ == CodingKind::spanning)
        q = step_ipf(int(i), sub, new_blocks, lambda, olds, targets, oproj, opts);
      else
        q = step_newton(int(i), sub, new_blocks, lambda, targets, oproj, opts);

      // verify the held components
      for (std::size_t b : new_blocks) {
        Vec got = block_lambda(b, q);
        Vec want = lambda.segment(Eigen::Index(offset_[b]), got.size());
        double r = (got - want).cwiseAbs().maxCoeff();
        if (r > opts.lambda_tol * 100)
          throw InversionError("reconstructed marginal does not reproduce its parameters", int(i), r, 0);
      }
      recon[i] = std::move(q);
    }
    Vec full = recon.back();
    full /= full.sum();
    return Table(scheme_, std::move(full), TableKind::probabilities);
  }

  SmoothnessReport check_smoothness() const {
    SmoothnessReport r;
    r.decomposability = decomp_;
    r.variation_independent = decomp_.ordered_decomposable;
    if (!r.variation_independent)
      r.warnings.push_back("sequence is not ordered decomposable: components are not variation "
                           "independent and some value combinations admit no distribution");
    return r;
  }

  /// sub-scheme bitmask of `m` relative to the variables of `within`.
  Mask compress_mask(Mask m, Mask within) const {
    Mask out = 0;
    int pos = 0;
    for (int j = 0; j < scheme_.size(); ++j)
      if (within & (Mask(1u) << j)) {
        if (m & (Mask(1u) << j)) out |= Mask(1u) << pos;
        ++pos;
      }
    return out;
  }

  /// lambda of one block evaluated on a marginal-cell vector of its marginal.
  Vec block_lambda(std::size_t b, const Vec& q) const {
    Vec v = lump_block(blocks_[b], q);
    for (Eigen::Index r = 0; r < v.size(); ++r)
      v[r] = detail::checked_log(v[r], "lumped cell");
    return blocks_[b].columns.transpose() * v;
  }

 private:
  static Vec lump_block(const ContrastBlock& blk, const Vec& q) {
    if (blk.shared_rows) return q;
    Vec v = Vec::Zero(Eigen::Index(blk.rows));
    for (std::size_t g = 0; g < blk.cell_row.size(); ++g)
      for (std::size_t c = 0; c < blk.cell_row[g].size(); ++c)
        if (blk.cell_row[g][c] >= 0) v[blk.cell_row[g][c]] += q[Eigen::Index(c)];
    return v;
  }

  Vec lump_marginal(std::size_t b, const Vec& full_cells) const {
    Vec pm = Vec::Zero(Eigen::Index(scheme_.category_count(blocks_[b].marginal)));
    for (std::size_t v = 0; v < scheme_.cell_count(); ++v)
      pm[Eigen::Index(proj_[b][v])] += full_cells[Eigen::Index(v)];
    return lump_block(blocks_[b], pm);
  }

  Vec lambda_of(const Vec& cells) const {
    Vec out = Vec::Zero(Eigen::Index(n_components_));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (!block_included(b)) continue;
      Vec v = lump_marginal(b, cells);
      for (Eigen::Index r = 0; r < v.size(); ++r)
        v[r] = detail::checked_log(v[r], "marginal cell");
      out.segment(Eigen::Index(offset_[b]), blocks_[b].columns.cols()) =
          blocks_[b].columns.transpose() * v;
    }
    return out;
  }

  /// initial log q carrying the step's components: sum over new effects of a
  /// pure-effect function B_loc·alpha with the block contrasts hitting the
  /// targets (solved through the local companion basis).
  Vec init_log_q(const VariableScheme& sub, const std::vector<std::size_t>& new_blocks,
                 const Vec& lambda) const {
    Vec x = Vec::Zero(Eigen::Index(sub.cell_count()));
    Vec u = Vec::Constant(x.size(), 1.0 / double(sub.cell_count()));
    for (std::size_t b : new_blocks) {
      const auto& blk = blocks_[b];
      ContrastBlock loc = (coding_ == CodingKind::local)
                              ? blk
                              : contrast_matrix(scheme_, blk.marginal, blk.effect, CodingKind::local);
      Vec tgt = lambda.segment(Eigen::Index(offset_[b]), blk.columns.cols());
      Mat J0;
      if (blk.shared_rows) {
        J0 = blk.columns.transpose() * loc.columns;
      } else {
        // linearization of the lumped contrasts at the uniform distribution
        Vec lu = lump_block(blk, u);
        Mat L = Mat::Zero(Eigen::Index(blk.rows), loc.columns.cols());
        for (std::size_t g = 0; g < blk.cell_row.size(); ++g)
          for (std::size_t c = 0; c < blk.cell_row[g].size(); ++c)
            if (blk.cell_row[g][c] >= 0)
              L.row(blk.cell_row[g][c]) += u[Eigen::Index(c)] * loc.columns.row(Eigen::Index(c));
        for (Eigen::Index r = 0; r < L.rows(); ++r) L.row(r) /= lu[r];
        J0 = blk.columns.transpose() * L;
      }
      Vec alpha = J0.colPivHouseholderQr().solve(tgt);
      x += loc.columns * alpha;
    }
    return x;
  }

  Vec step_ipf(int step, const VariableScheme& sub, const std::vector<std::size_t>& new_blocks,
               const Vec& lambda, const std::vector<Mask>& olds, const std::vector<Vec>& targets,
               const std::vector<std::vector<std::size_t>>& oproj, const InvertOptions& opts) const {
    Vec q = init_log_q(sub, new_blocks, lambda).array().exp();
    if (olds.empty()) {
      q /= q.sum();
      return q;
    }
    double resid = 0;
    for (int it = 0; it < opts.max_iter; ++it) {
      resid = 0;
      for (std::size_t o = 0; o < olds.size(); ++o) {
        Vec cur = Vec::Zero(targets[o].size());
        for (std::size_t c = 0; c < sub.cell_count(); ++c) cur[Eigen::Index(oproj[o][c])] += q[Eigen::Index(c)];
        resid = std::max(resid, (cur - targets[o]).cwiseAbs().maxCoeff());
        for (std::size_t c = 0; c < sub.cell_count(); ++c) {
          double cv = cur[Eigen::Index(oproj[o][c])];
          if (cv < detail::kPositivityFloor)
            throw InversionError("IPF collapsed a marginal cell to zero", step, resid, it);
          q[Eigen::Index(c)] *= targets[o][Eigen::Index(oproj[o][c])] / cv;
        }
      }
      if (resid < opts.ipf_tol) return q;
    }
    throw InversionError(
        "IPF did not converge: the supplied marginal parameters appear to be incompatible "
        "(no joint distribution with these marginals exists or the iteration budget is too small)",
        step, resid, opts.max_iter);
  }

  /// lumped codings: damped Gauss-Newton on log q for the system
  /// {block lambdas = targets, old marginals = targets, sum q = 1}.
  Vec step_newton(int step, const VariableScheme& sub, const std::vector<std::size_t>& new_blocks,
                  const Vec& lambda, const std::vector<Vec>& targets,
                  const std::vector<std::vector<std::size_t>>& oproj, const InvertOptions& opts) const {
    std::size_t nc = sub.cell_count();
    Eigen::Index neq = 1;
    for (std::size_t b : new_blocks) neq += blocks_[b].columns.cols();
    for (const auto& t : targets) neq += t.size();

    Vec x = init_log_q(sub, new_blocks, lambda);
    auto residual = [&](const Vec& lx, Vec& F, Mat* J) {
      Vec q = lx.array().exp();
      F = Vec::Zero(neq);
      if (J) *J = Mat::Zero(neq, Eigen::Index(nc));
      Eigen::Index row = 0;
      for (std::size_t b : new_blocks) {
        const auto& blk = blocks_[b];
        Vec v = lump_block(blk, q);
        for (Eigen::Index r = 0; r < v.size(); ++r)
          if (!(v[r] >= detail::kPositivityFloor)) return false;
        Eigen::Index nb = blk.columns.cols();
        F.segment(row, nb) = blk.columns.transpose() * v.array().log().matrix() -
                             lambda.segment(Eigen::Index(offset_[b]), nb);
        if (J)
          for (Eigen::Index col = 0; col < nb; ++col) {
            const auto& rows = blk.cell_row[blk.shared_rows ? 0 : std::size_t(col)];
            for (std::size_t c = 0; c < nc; ++c)
              if (rows[c] >= 0)
                (*J)(row + col, Eigen::Index(c)) += blk.columns(rows[c], col) / v[rows[c]] * q[Eigen::Index(c)];
          }
        row += nb;
      }
      for (std::size_t o = 0; o < targets.size(); ++o) {
        for (std::size_t c = 0; c < nc; ++c) {
          F[row + Eigen::Index(oproj[o][c])] += q[Eigen::Index(c)];
          if (J) (*J)(row + Eigen::Index(oproj[o][c]), Eigen::Index(c)) = q[Eigen::Index(c)];
        }
        F.segment(row, targets[o].size()) -= targets[o];
        row += targets[o].size();
      }
      F[row] = q.sum() - 1.0;
      if (J) J->row(row) = q.transpose();
      return true;
    };

    Vec F;
    Mat J;
    if (!residual(x, F, &J)) throw InversionError("nonpositive lumped cell at start", step, 0, 0);
    double fn = F.norm();
    for (int it = 0; it < 200; ++it) {
      if (F.cwiseAbs().maxCoeff() < opts.lambda_tol) {
        Vec q = x.array().exp();
        return q / q.sum();
      }
      Vec dx = J.colPivHouseholderQr().solve(-F);
      double stepsz = 1.0;
      bool ok = false;
      for (int h = 0; h < 40; ++h) {
        Vec xn = x + stepsz * dx;
        Vec Fn;
        if (residual(xn, Fn, nullptr) && Fn.norm() < fn * (1.0 - 1e-4 * stepsz)) {
          x = xn;
          ok = true;
          break;
        }
        stepsz *= 0.5;
      }
      if (!ok) throw InversionError("Newton stalled while reconstructing a marginal", step, fn, it);
      residual(x, F, &J);
      fn = F.norm();
    }
    throw InversionError("Newton did not converge while reconstructing a marginal", step, fn, 200);
  }

  VariableScheme scheme_;
  MarginalSequence seq_;
  CodingKind coding_ = CodingKind::local;
  bool include_empty_ = true;
  std::vector<int> housing_;
  std::vector<ContrastBlock> blocks_;
  std::vector<std::size_t> offset_;
  std::vector<std::vector<std::size_t>> proj_;
  std::size_t n_components_ = 0;
  DecomposabilityResult decomp_;
};

struct CollapsibilityResult {
  bool collapsible = false;        // authoritative verdict (direct comparison)
  bool criterion_verdict = false;  // signed-sum formula
  bool direct_verdict = false;     // lambda^M_F == lambda^N_F for all F subset of effect
  bool disagreement = false;
};

/// Binary-scheme collapsibility of effect parameters between marginals M and N.
inline CollapsibilityResult collapsibility_check(const Table& table, Mask effect, Mask M, Mask N,
                                                 double tol = 1e-9) {
  const auto& sc = table.scheme();
  for (int j = 0; j < sc.size(); ++j)
    if (sc.levels(j) != 2) throw SchemeError("collapsibility check requires a binary scheme");
  if (effect == 0 || (effect & M) != effect || (M & N) != M || M == N)
    throw SchemeError("need nonempty effect within M strictly within N");
  sc.check_mask(N);

  Table p = table.normalized();
  Table pM = marginalize(p, M);
  Table pN = marginalize(p, N);

  auto compress = [&](Mask m, Mask within) {
    Mask out = 0;
    int pos = 0;
    for (int j = 0; j < sc.size(); ++j)
      if (within & (Mask(1u) << j)) {
        if (m & (Mask(1u) << j)) out |= Mask(1u) << pos;
        ++pos;
      }
    return out;
  };

  CollapsibilityResult r;
  // direct test
  double dmax = 0.0;
  for (Mask F = effect;; F = (F - 1) & effect) {
    Vec a = loglinear_recursion(pM, compress(F, M));
    Vec b = loglinear_recursion(pN, compress(F, N));
    dmax = std::max(dmax, (a - b).cwiseAbs().maxCoeff());
    if (F == 0) break;
  }
  r.direct_verdict = dmax < tol;

  // signed-sum criterion
  const VariableScheme& sM = pM.scheme();
  const VariableScheme& sN = pN.scheme();
  Vec d = Vec::Zero(Eigen::Index(sM.cell_count()));
  auto projNM = sN.projection(compress(M, N));
  for (std::size_t nidx = 0; nidx < sN.cell_count(); ++nidx)
    d[Eigen::Index(projNM[nidx])] += std::log(pN[nidx]);
  double scaleN = 1.0 / double(std::size_t(1) << popcount(N & ~M));
  for (std::size_t midx = 0; midx < sM.cell_count(); ++midx)
    d[Eigen::Index(midx)] = std::log(pM[midx]) - scaleN * d[Eigen::Index(midx)];

  Mask eM = compress(effect, M);
  auto projF = [&](Mask f) { return sM.projection(f); };
  double cmax = 0.0;
  for (std::size_t mstar = 0; mstar < sM.cell_count(); ++mstar) {
    double s = 0.0;
    for (Mask F = eM;; F = (F - 1) & eM) {
      double sign = (popcount(eM & ~F) % 2 == 0) ? 1.0 : -1.0;
      double scale = 1.0 / double(std::size_t(1) << (sM.size() - popcount(F)));
      auto pf = projF(F);
      double acc = 0.0;
      for (std::size_t m = 0; m < sM.cell_count(); ++m)
        if (pf[m] == pf[mstar]) acc += d[Eigen::Index(m)];
      s += sign * scale * acc;
      if (F == 0) break;
    }
    cmax = std::max(cmax, std::abs(s));
  }
  r.criterion_verdict = cmax < tol;
  r.collapsible = r.direct_verdict;
  r.disagreement = r.criterion_verdict != r.direct_verdict;
  return r;
}

}  // namespace mml
