#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mml {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Effects and marginals are bitmasks over scheme variable positions.
using Mask = std::uint32_t;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemeError : Error {
  using Error::Error;
};
struct PositivityError : Error {
  using Error::Error;
};

inline int popcount(Mask m) { return __builtin_popcount(m); }

struct Variable {
  std::string name;
  int levels = 2;
};

/// Ordered list of categorical variables. Cell order is lexicographic with
/// the LAST variable varying fastest; every matrix construction in the
/// library relies on this convention.
class VariableScheme {
 public:
  VariableScheme() = default;

  explicit VariableScheme(std::vector<Variable> vars) : vars_(std::move(vars)) {
    if (vars_.size() > 20)
      throw SchemeError("variable scheme limited to 20 variables");
    std::size_t cells = 1;
    for (std::size_t j = 0; j < vars_.size(); ++j) {
      const auto& v = vars_[j];
      if (v.name.empty()) throw SchemeError("empty variable name");
      if (v.levels < 2) throw SchemeError("variable '" + v.name + "' needs >= 2 levels");
      for (std::size_t i = 0; i < j; ++i)
        if (vars_[i].name == v.name)
          throw SchemeError("duplicate variable name '" + v.name + "'");
      if (cells > (std::size_t(1) << 40) / std::size_t(v.levels))
        throw SchemeError("cell count exceeds addressable range");
      cells *= std::size_t(v.levels);
    }
    strides_.resize(vars_.size());
    std::size_t s = 1;
    for (int j = int(vars_.size()) - 1; j >= 0; --j) {
      strides_[j] = s;
      s *= std::size_t(vars_[j].levels);
    }
    cell_count_ = cells;
  }

  int size() const { return int(vars_.size()); }
  const Variable& var(int j) const { return vars_.at(j); }
  int levels(int j) const { return vars_.at(j).levels; }
  std::size_t cell_count() const { return cell_count_; }
  std::size_t stride(int j) const { return strides_.at(j); }

  int index_of(const std::string& name) const {
    for (std::size_t j = 0; j < vars_.size(); ++j)
      if (vars_[j].name == name) return int(j);
    return -1;
  }

  Mask full_mask() const { return size() == 0 ? 0 : Mask((1u << size()) - 1u); }

  Mask mask_of(const std::vector<std::string>& names) const {
    Mask m = 0;
    for (const auto& n : names) {
      int j = index_of(n);
      if (j < 0) throw SchemeError("unknown variable '" + n + "'");
      m |= Mask(1u) << j;
    }
    return m;
  }

  std::vector<std::string> names_of(Mask m) const {
    std::vector<std::string> out;
    for (int j = 0; j < size(); ++j)
      if (m & (Mask(1u) << j)) out.push_back(vars_[j].name);
    return out;
  }

  std::size_t cell_index(const std::vector<int>& idx) const {
    std::size_t c = 0;
    for (int j = 0; j < size(); ++j) c += std::size_t(idx[j]) * strides_[j];
    return c;
  }

  void cell_coords(std::size_t cell, std::vector<int>& idx) const {
    idx.resize(vars_.size());
    for (int j = 0; j < size(); ++j) {
      idx[j] = int(cell / strides_[j]);
      cell %= strides_[j];
    }
  }

  /// Sub-scheme over the variables of `m`, keeping scheme order.
  VariableScheme sub_scheme(Mask m) const {
    check_mask(m);
    std::vector<Variable> vs;
    for (int j = 0; j < size(); ++j)
      if (m & (Mask(1u) << j)) vs.push_back(vars_[j]);
    return VariableScheme(std::move(vs));
  }

  /// Number of joint categories of the variables in `m`.
  std::size_t category_count(Mask m) const {
    check_mask(m);
    std::size_t c = 1;
    for (int j = 0; j < size(); ++j)
      if (m & (Mask(1u) << j)) c *= std::size_t(vars_[j].levels);
    return c;
  }

  /// Index of a full-table cell within the sub-table of `m` (same cell-order
  /// convention restricted to the variables of `m`).
  std::size_t project_cell(std::size_t cell, Mask m) const {
    std::size_t s = 1, acc = 0;
    for (int j = size() - 1; j >= 0; --j) {
      if (m & (Mask(1u) << j)) {
        acc += s * (cell / strides_[j] % std::size_t(vars_[j].levels));
        s *= std::size_t(vars_[j].levels);
      }
    }
    return acc;
  }

  /// Precomputed cell -> sub-cell map for a marginal; the workhorse for
  /// marginalization and scatter/gather in the fitters.
  std::vector<std::size_t> projection(Mask m) const {
    check_mask(m);
    std::vector<std::size_t> map(cell_count_);
    std::vector<int> idx(vars_.size(), 0);
    std::vector<std::size_t> sub_stride(vars_.size(), 0);
    std::size_t s = 1;
    for (int j = size() - 1; j >= 0; --j) {
      if (m & (Mask(1u) << j)) {
        sub_stride[j] = s;
        s *= std::size_t(vars_[j].levels);
      }
    }
    for (std::size_t cell = 0; cell < cell_count_; ++cell) {
      std::size_t acc = 0;
      for (int j = 0; j < size(); ++j)
        if (m & (Mask(1u) << j)) acc += sub_stride[j] * (cell / strides_[j] % std::size_t(vars_[j].levels));
      map[cell] = acc;
    }
    return map;
  }

  void check_mask(Mask m) const {
    if (m & ~full_mask()) throw SchemeError("mask refers to variables outside the scheme");
  }

 private:
  std::vector<Variable> vars_;
  std::vector<std::size_t> strides_;
  std::size_t cell_count_ = 1;
};

enum class TableKind { counts, probabilities };

/// Dense nonnegative cell array over a scheme; immutable after construction.
class Table {
 public:
  Table() = default;

  Table(VariableScheme scheme, Vec cells, TableKind kind)
      : scheme_(std::move(scheme)), cells_(std::move(cells)), kind_(kind) {
    if (std::size_t(cells_.size()) != scheme_.cell_count())
      throw SchemeError("cell vector length does not match scheme");
    for (Eigen::Index i = 0; i < cells_.size(); ++i)
      if (!(cells_[i] >= 0.0)) throw SchemeError("negative or NaN cell value");
    if (kind_ == TableKind::probabilities && std::abs(cells_.sum() - 1.0) > 1e-12)
      throw SchemeError("probability table does not sum to 1");
  }

  static Table uniform(const VariableScheme& scheme) {
    Vec c = Vec::Constant(Eigen::Index(scheme.cell_count()), 1.0 / double(scheme.cell_count()));
    return Table(scheme, std::move(c), TableKind::probabilities);
  }

  const VariableScheme& scheme() const { return scheme_; }
  const Vec& cells() const { return cells_; }
  TableKind kind() const { return kind_; }
  double sum() const { return cells_.sum(); }
  double operator[](std::size_t i) const { return cells_[Eigen::Index(i)]; }

  double at(const std::vector<int>& idx) const { return cells_[Eigen::Index(scheme_.cell_index(idx))]; }

  Table normalized() const {
    if (kind_ == TableKind::probabilities) return *this;
    double s = cells_.sum();
    if (s <= 0.0) throw PositivityError("cannot normalize a table with zero total");
    Vec c = cells_ / s;
    c /= c.sum();  // guard rounding so the invariant check passes
    return Table(scheme_, std::move(c), TableKind::probabilities);
  }

  bool strictly_positive(double eps = 1e-300) const { return cells_.minCoeff() >= eps; }

 private:
  VariableScheme scheme_;
  Vec cells_;
  TableKind kind_ = TableKind::counts;
};

/// Sum out all variables not in `marginal`; kind is preserved.
inline Table marginalize(const Table& t, Mask marginal) {
  const auto& sc = t.scheme();
  sc.check_mask(marginal);
  VariableScheme sub = sc.sub_scheme(marginal);
  Vec out = Vec::Zero(Eigen::Index(sub.cell_count()));
  auto proj = sc.projection(marginal);
  for (std::size_t v = 0; v < sc.cell_count(); ++v) out[Eigen::Index(proj[v])] += t[v];
  if (t.kind() == TableKind::probabilities) {
    double s = out.sum();
    if (s > 0) out /= s;
  }
  return Table(std::move(sub), std::move(out), t.kind());
}

/// Non-decreasing sequence of marginals: no later marginal is contained in an
/// earlier one, and the last equals the full variable set.
struct MarginalSequence {
  std::vector<Mask> marginals;

  void validate(const VariableScheme& scheme) const {
    if (marginals.empty()) throw SchemeError("empty marginal sequence");
    for (Mask m : marginals) scheme.check_mask(m);
    if (marginals.back() != scheme.full_mask())
      throw SchemeError("last marginal must be the full variable set");
    for (std::size_t j = 1; j < marginals.size(); ++j)
      for (std::size_t i = 0; i < j; ++i)
        if ((marginals[j] & marginals[i]) == marginals[j])
          throw SchemeError("marginal sequence is not non-decreasing");
  }
};

/// index of the first marginal containing each effect; the returned vector is
/// indexed by effect bitmask (size 2^d).
inline std::vector<int> assign_effects(const VariableScheme& scheme, const MarginalSequence& seq) {
  seq.validate(scheme);
  std::size_t n = std::size_t(1) << scheme.size();
  std::vector<int> housing(n, -1);
  for (Mask e = 0; e < n; ++e)
    for (std::size_t i = 0; i < seq.marginals.size(); ++i)
      if ((e & seq.marginals[i]) == e) {
        housing[e] = int(i);
        break;
      }
  return housing;
}

/// number of non-redundant components of an effect's log-linear parameter.
inline std::size_t effect_dimension(Mask effect, const VariableScheme& scheme) {
  scheme.check_mask(effect);
  std::size_t d = 1;
  for (int j = 0; j < scheme.size(); ++j)
    if (effect & (Mask(1u) << j)) d *= std::size_t(scheme.levels(j) - 1);
  return d;
}

struct DecomposabilityResult {
  bool ordered_decomposable = true;
  int failing_prefix = -1;                 // 1-based prefix length j on failure
  std::vector<Mask> maximal_at_failure;    // maximal elements of the failing prefix
};

namespace detail {

/// Does an ordering of `sets` with the running intersection property exist?
/// Greedy reverse elimination: repeatedly remove an element whose intersection
/// with the union of the rest is covered by a single remaining element.
inline bool has_rip_ordering(std::vector<Mask> sets) {
  while (sets.size() > 2) {
    bool removed = false;
    for (std::size_t h = 0; h < sets.size(); ++h) {
      Mask rest = 0;
      for (std::size_t g = 0; g < sets.size(); ++g)
        if (g != h) rest |= sets[g];
      Mask inter = sets[h] & rest;
      for (std::size_t g = 0; g < sets.size(); ++g) {
        if (g == h) continue;
        if ((inter & sets[g]) == inter) {
          sets.erase(sets.begin() + long(h));
          removed = true;
          break;
        }
      }
      if (removed) break;
    }
    if (!removed) return false;
  }
  return true;
}

inline std::vector<Mask> maximal_elements(const std::vector<Mask>& sets) {
  std::vector<Mask> out;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    bool maximal = true;
    for (std::size_t j = 0; j < sets.size(); ++j) {
      if (i == j) continue;
      bool subset = (sets[i] & sets[j]) == sets[i];
      if (subset && (sets[i] != sets[j] || j < i)) {
        maximal = false;
        break;
      }
    }
    if (maximal) out.push_back(sets[i]);
  }
  return out;
}

}  // namespace detail

/// Ordered decomposability of a non-decreasing sequence: true iff k <= 2 or
/// every prefix's maximal elements admit a running-intersection ordering.
inline DecomposabilityResult is_ordered_decomposable(const MarginalSequence& seq) {
  DecomposabilityResult r;
  std::size_t k = seq.marginals.size();
  if (k <= 2) return r;
  for (std::size_t j = 3; j <= k; ++j) {
    std::vector<Mask> prefix(seq.marginals.begin(), seq.marginals.begin() + long(j));
    auto maximal = detail::maximal_elements(prefix);
    if (!detail::has_rip_ordering(maximal)) {
      r.ordered_decomposable = false;
      r.failing_prefix = int(j);
      r.maximal_at_failure = maximal;
      return r;
    }
  }
  return r;
}

/// 0/1 matrix M (cells x stacked marginal cells); M'm stacks the marginal
/// frequency vectors of `marginals` in order.
inline Mat marginalization_matrix(const VariableScheme& scheme, const std::vector<Mask>& marginals) {
  std::size_t q = 0;
  for (Mask m : marginals) q += scheme.category_count(m);
  Mat M = Mat::Zero(Eigen::Index(scheme.cell_count()), Eigen::Index(q));
  std::size_t off = 0;
  for (Mask m : marginals) {
    auto proj = scheme.projection(m);
    for (std::size_t v = 0; v < scheme.cell_count(); ++v)
      M(Eigen::Index(v), Eigen::Index(off + proj[v])) = 1.0;
    off += scheme.category_count(m);
  }
  return M;
}

}  // namespace mml
