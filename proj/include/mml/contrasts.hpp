#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "mml/table.hpp"

namespace mml {

enum class CodingKind { local, spanning, global, continuation };

inline const char* to_string(CodingKind c) {
  switch (c) {
    case CodingKind::local: return "local";
    case CodingKind::spanning: return "spanning";
    case CodingKind::global: return "global";
    case CodingKind::continuation: return "continuation";
  }
  return "?";
}

namespace detail {

constexpr double kPositivityFloor = 1e-300;

inline double checked_log(double x, const char* what) {
  if (!(x >= kPositivityFloor)) throw PositivityError(std::string("nonpositive ") + what);
  return std::log(x);
}

/// Enumerate the variables of a mask in scheme order.
inline std::vector<int> mask_vars(const VariableScheme& sc, Mask m) {
  std::vector<int> out;
  for (int j = 0; j < sc.size(); ++j)
    if (m & (Mask(1u) << j)) out.push_back(j);
  return out;
}

/// Non-redundant category combinations of an effect: per variable 0-based
/// category in 1..c-1, ordered lexicographically with the last effect
/// variable fastest. Empty effect yields the single empty combination.
inline std::vector<std::vector<int>> nonredundant_cats(const VariableScheme& sc, Mask effect) {
  auto vars = mask_vars(sc, effect);
  std::vector<std::vector<int>> out;
  std::vector<int> cur(vars.size(), 1);
  while (true) {
    out.push_back(cur);
    int j = int(vars.size()) - 1;
    while (j >= 0) {
      if (++cur[j] < sc.levels(vars[j])) break;
      cur[j] = 1;
      --j;
    }
    if (j < 0) break;
  }
  if (vars.empty()) out.assign(1, {});
  return out;
}

}  // namespace detail

/// Classical log-linear parameter array for one effect, computed in the
/// table's own scheme. Returns the full (redundant) array indexed by effect
/// categories in sub-scheme cell order. Counts are normalized first.
inline Vec loglinear_recursion(const Table& table, Mask effect) {
  Table p = table.normalized();
  const auto& sc = p.scheme();
  sc.check_mask(effect);
  if (!p.strictly_positive()) throw PositivityError("log-linear recursion requires a positive table");

  // mean of log P over cells matching each category combination of F
  auto mean_log = [&](Mask f) {
    std::size_t nf = sc.category_count(f);
    Vec acc = Vec::Zero(Eigen::Index(nf));
    auto proj = sc.projection(f);
    for (std::size_t v = 0; v < sc.cell_count(); ++v)
      acc[Eigen::Index(proj[v])] += std::log(p[v]);
    acc *= double(nf) / double(sc.cell_count());
    return acc;
  };

  std::map<Mask, Vec> lambda;
  // iterate sub-effects by increasing cardinality
  std::vector<Mask> subs;
  for (Mask f = effect;; f = (f - 1) & effect) {
    subs.push_back(f);
    if (f == 0) break;
  }
  std::sort(subs.begin(), subs.end(), [](Mask a, Mask b) {
    return popcount(a) != popcount(b) ? popcount(a) < popcount(b) : a < b;
  });
  for (Mask f : subs) {
    Vec lf = mean_log(f);
    VariableScheme fs = sc.sub_scheme(f);
    auto fvars = detail::mask_vars(sc, f);
    std::vector<int> fidx;
    for (std::size_t c = 0; c < fs.cell_count(); ++c) {
      fs.cell_coords(c, fidx);
      double sub_sum = 0.0;
      for (Mask g = (f - 1) & f;; g = (g - 1) & f) {
        // category combination of g restricted from fidx
        std::size_t gi = 0, s = 1;
        for (int j = int(fvars.size()) - 1; j >= 0; --j)
          if (g & (Mask(1u) << fvars[j])) {
            gi += s * std::size_t(fidx[j]);
            s *= std::size_t(sc.levels(fvars[j]));
          }
        sub_sum += lambda.at(g)[Eigen::Index(gi)];
        if (g == 0) break;
      }
      lf[Eigen::Index(c)] -= sub_sum;
    }
    lambda[f] = std::move(lf);
  }
  return lambda.at(effect);
}

/// One block of the contrast matrix B: the columns belonging to one effect
/// within its housing marginal, together with the lumping that maps marginal
/// cells into block cells. For local/spanning codings the block cells are the
/// marginal cells themselves and all columns share that row space; global and
/// continuation codings get a private lumped row group per column.
struct ContrastBlock {
  Mask effect = 0;
  Mask marginal = 0;
  CodingKind coding = CodingKind::local;
  std::size_t rows = 0;  // total block cells
  Mat columns;           // rows x n_components
  bool shared_rows = true;
  // cell_row[g][marginal cell] -> block row, or -1 when the cell is dropped.
  // One group (g=0) when shared_rows, else one group per column.
  std::vector<std::vector<long>> cell_row;
  std::vector<std::vector<int>> cats;  // component category labels (0-based, non-first)
};

/// Build the contrast block of `effect` within `marginal`.
inline ContrastBlock contrast_matrix(const VariableScheme& scheme, Mask marginal, Mask effect,
                                     CodingKind coding) {
  scheme.check_mask(marginal);
  if ((effect & marginal) != effect) throw SchemeError("effect not contained in marginal");

  ContrastBlock blk;
  blk.effect = effect;
  blk.marginal = marginal;
  blk.coding = coding;
  blk.cats = detail::nonredundant_cats(scheme, effect);

  VariableScheme msub = scheme.sub_scheme(marginal);
  auto mvars = detail::mask_vars(scheme, marginal);
  auto evars = detail::mask_vars(scheme, effect);
  std::size_t mc = msub.cell_count();
  std::size_t ncomp = blk.cats.size();
  Mask cond = marginal & ~effect;
  std::size_t ncond = scheme.category_count(cond);

  if (effect == 0 || coding == CodingKind::local || coding == CodingKind::spanning) {
    blk.rows = mc;
    blk.shared_rows = true;
    blk.cell_row.assign(1, std::vector<long>(mc));
    for (std::size_t c = 0; c < mc; ++c) blk.cell_row[0][c] = long(c);
    blk.columns = Mat::Zero(Eigen::Index(mc), Eigen::Index(ncomp));
    std::vector<int> idx;
    for (std::size_t c = 0; c < mc; ++c) {
      msub.cell_coords(c, idx);
      for (std::size_t col = 0; col < ncomp; ++col) {
        double w = 1.0;
        std::size_t epos = 0;
        for (std::size_t j = 0; j < mvars.size(); ++j) {
          int var = mvars[j];
          int cat = idx[j];
          double cj = double(scheme.levels(var));
          if (effect & (Mask(1u) << var)) {
            int e = blk.cats[col][epos++];
            if (coding == CodingKind::spanning)
              w *= (cat == e ? 1.0 : 0.0) - (cat == 0 ? 1.0 : 0.0);
            else
              w *= (cat == e ? 1.0 : 0.0) - 1.0 / cj;
          } else {
            w *= 1.0 / cj;
          }
        }
        blk.columns(Eigen::Index(c), Eigen::Index(col)) = w;
      }
    }
    return blk;
  }

  // global / continuation: one lumped row group per component
  blk.shared_rows = false;
  blk.cell_row.assign(ncomp, std::vector<long>(mc, -1));
  std::size_t nbits = std::size_t(1) << evars.size();
  blk.rows = ncomp * nbits * ncond;
  blk.columns = Mat::Zero(Eigen::Index(blk.rows), Eigen::Index(ncomp));
  int response = evars.empty() ? -1 : evars.back();

  std::vector<int> idx;
  for (std::size_t col = 0; col < ncomp; ++col) {
    std::size_t base = col * nbits * ncond;
    for (std::size_t c = 0; c < mc; ++c) {
      msub.cell_coords(c, idx);
      std::size_t bits = 0;
      bool keep = true;
      std::size_t epos = 0, condcell = 0, conds = 1;
      // conditioning sub-index, last variable fastest
      for (int j = int(mvars.size()) - 1; j >= 0; --j) {
        int var = mvars[j];
        if (!(effect & (Mask(1u) << var))) {
          condcell += conds * std::size_t(idx[j]);
          conds *= std::size_t(scheme.levels(var));
        }
      }
      for (std::size_t j = 0; j < mvars.size(); ++j) {
        int var = mvars[j];
        if (!(effect & (Mask(1u) << var))) continue;
        int cut = blk.cats[col][epos];  // 0-based cut in 1..c-1
        int cat = idx[j];
        if (coding == CodingKind::global) {
          bits = bits * 2 + std::size_t(cat >= cut ? 1 : 0);
        } else {  // continuation
          if (var == response) {
            if (cat < cut - 1) { keep = false; break; }
            bits = bits * 2 + std::size_t(cat == cut - 1 ? 0 : 1);
          } else {
            if (cat != cut - 1 && cat != cut) { keep = false; break; }
            bits = bits * 2 + std::size_t(cat == cut ? 1 : 0);
          }
        }
        ++epos;
      }
      if (!keep) continue;
      blk.cell_row[col][c] = long(base + bits * ncond + condcell);
    }
    for (std::size_t b = 0; b < nbits; ++b) {
      double sign;
      if (coding == CodingKind::global)
        sign = (popcount(Mask(~b) & Mask(nbits - 1)) % 2 == 0) ? 1.0 : -1.0;  // (-1)^{#lows}
      else
        sign = (popcount(Mask(b)) % 2 == 0) ? 1.0 : -1.0;  // (-1)^{#continuations}
      for (std::size_t cc = 0; cc < ncond; ++cc)
        blk.columns(Eigen::Index(base + b * ncond + cc), Eigen::Index(col)) = sign / double(ncond);
    }
  }
  return blk;
}

/// Generalized odds ratios of `effect` within `marginal`, one row per
/// non-redundant component and one column per conditioning category
/// combination of marginal \ effect. Ratios are scale invariant, so counts
/// and probabilities are both accepted.
inline Mat odds_ratios(const Table& table, Mask marginal, Mask effect, CodingKind coding) {
  const auto& sc = table.scheme();
  Table mt = marginalize(table, marginal);
  const VariableScheme& msub = mt.scheme();
  auto evars_full = detail::mask_vars(sc, effect);
  Mask cond = marginal & ~effect;
  std::size_t ncond = sc.category_count(cond);
  auto combos = detail::nonredundant_cats(sc, effect);

  // positions of effect / conditioning vars inside the marginal sub-scheme
  auto mvars = detail::mask_vars(sc, marginal);
  std::vector<int> epos_in_m, cpos_in_m;
  for (std::size_t j = 0; j < mvars.size(); ++j)
    ((effect >> mvars[j]) & 1u ? epos_in_m : cpos_in_m).push_back(int(j));

  Mat out = Mat::Zero(Eigen::Index(combos.size()), Eigen::Index(ncond));
  std::vector<int> idx(mvars.size(), 0);

  // enumerate conditioning cells (last conditioning var fastest)
  std::vector<int> cidx(cpos_in_m.size(), 0);
  for (std::size_t cc = 0; cc < ncond; ++cc) {
    for (std::size_t j = 0; j < cpos_in_m.size(); ++j) idx[std::size_t(cpos_in_m[j])] = cidx[j];
    for (std::size_t comp = 0; comp < combos.size(); ++comp) {
      const auto& e = combos[comp];
      double logr = 0.0;
      std::size_t l = epos_in_m.size();
      if (coding == CodingKind::local || coding == CodingKind::spanning) {
        for (std::size_t m = 0; m < (std::size_t(1) << l); ++m) {
          double sign = (popcount(Mask(m)) % 2 == 0) ? 1.0 : -1.0;
          for (std::size_t j = 0; j < l; ++j) {
            int cat = e[j];
            if (m & (std::size_t(1) << j)) cat = (coding == CodingKind::local) ? cat - 1 : 0;
            idx[std::size_t(epos_in_m[j])] = cat;
          }
          logr += sign * detail::checked_log(mt.at(idx), "marginal cell");
        }
      } else if (coding == CodingKind::global) {
        for (std::size_t b = 0; b < (std::size_t(1) << l); ++b) {
          double q = 0.0;
          // sum marginal cells whose effect categories fall in the quadrant b
          std::vector<int> full(mvars.size());
          std::size_t nmc = msub.cell_count();
          for (std::size_t c = 0; c < nmc; ++c) {
            msub.cell_coords(c, full);
            bool match = true;
            for (std::size_t j = 0; j < cpos_in_m.size(); ++j)
              if (full[std::size_t(cpos_in_m[j])] != cidx[j]) { match = false; break; }
            for (std::size_t j = 0; match && j < l; ++j) {
              bool high = (b >> (l - 1 - j)) & 1u;
              int cat = full[std::size_t(epos_in_m[j])];
              if (high != (cat >= e[j])) match = false;
            }
            if (match) q += mt[c];
          }
          double sign = (popcount(Mask(~b) & Mask((1u << l) - 1)) % 2 == 0) ? 1.0 : -1.0;
          logr += sign * detail::checked_log(q, "lumped cell");
        }
      } else {  // continuation
        int resp_j = int(l) - 1;
        for (std::size_t b = 0; b < (std::size_t(1) << l); ++b) {
          double q = 0.0;
          std::vector<int> full(mvars.size());
          std::size_t nmc = msub.cell_count();
          for (std::size_t c = 0; c < nmc; ++c) {
            msub.cell_coords(c, full);
            bool match = true;
            for (std::size_t j = 0; j < cpos_in_m.size(); ++j)
              if (full[std::size_t(cpos_in_m[j])] != cidx[j]) { match = false; break; }
            for (std::size_t j = 0; match && j < l; ++j) {
              bool second = (b >> (l - 1 - j)) & 1u;
              int cat = full[std::size_t(epos_in_m[j])];
              if (int(j) == resp_j) {
                if (second ? !(cat > e[j] - 1) : cat != e[j] - 1) match = false;
              } else {
                if (second ? cat != e[j] : cat != e[j] - 1) match = false;
              }
            }
            if (match) q += mt[c];
          }
          double sign = (popcount(Mask(b)) % 2 == 0) ? 1.0 : -1.0;
          logr += sign * detail::checked_log(q, "lumped cell");
        }
      }
      out(Eigen::Index(comp), Eigen::Index(cc)) = std::exp(logr);
    }
    // advance conditioning index
    int j = int(cidx.size()) - 1;
    while (j >= 0) {
      int var = mvars[std::size_t(cpos_in_m[std::size_t(j)])];
      if (++cidx[std::size_t(j)] < sc.levels(var)) break;
      cidx[std::size_t(j)] = 0;
      --j;
    }
  }
  return out;
}

}  // namespace mml
