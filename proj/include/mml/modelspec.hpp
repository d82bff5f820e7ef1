#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mml/parameterization.hpp"

namespace mml {

/// Conditional independence statement A ⊥ B | C over scheme variables.
struct CIStatement {
  Mask a = 0, b = 0, given = 0;

  void validate(const VariableScheme& sc) const {
    sc.check_mask(a);
    sc.check_mask(b);
    sc.check_mask(given);
    if (a == 0 || b == 0) throw SchemeError("conditional independence needs nonempty sides");
    if ((a & b) || (a & given) || (b & given))
      throw SchemeError("conditional independence sets must be disjoint");
  }

  /// Effects touching both sides: P(A∪B∪C) \ [P(A∪C) ∪ P(B∪C)].
  std::vector<Mask> d_set() const {
    std::vector<Mask> out;
    Mask u = a | b | given;
    for (Mask e = u;; e = (e - 1) & u) {
      if ((e & a) && (e & b)) out.push_back(e);
      if (e == 0) break;
    }
    return out;
  }
};

struct CompileError : Error {
  struct Violation {
    Mask effect = 0;
    Mask housing = 0;  // first containing marginal
    int ci_index = -1;
  };
  CompileError(const std::string& msg, std::vector<Violation> v = {}, bool no_seq = false)
      : Error(msg), violations(std::move(v)), no_admissible_sequence(no_seq) {}
  std::vector<Violation> violations;
  bool no_admissible_sequence = false;
};

/// A marginal log-linear model: constraint form C'λ = 0 and freedom form
/// λ = Xβ over a parameterization's component vector.
struct ModelSpec {
  MLLParameterization param;
  Mat C;  // components x #constraints
  Mat X;  // components x #free
  std::vector<Mask> zeroed_effects;
  std::string provenance = "manual";

  int df() const {
    if (C.cols() == 0) return 0;
    return int(C.colPivHouseholderQr().rank());
  }
};

/// Basis of the orthogonal complement of the column space of X.
inline Mat orthogonal_complement(const Mat& X) {
  if (X.cols() == 0) return Mat::Identity(X.rows(), X.rows());
  Eigen::ColPivHouseholderQR<Mat> qr(X);
  if (qr.rank() != X.cols()) throw SchemeError("matrix is rank deficient");
  Eigen::HouseholderQR<Mat> full(X);
  Mat Q = full.householderQ();
  return Q.rightCols(X.rows() - X.cols());
}

/// Saturated model (no constraints).
inline ModelSpec saturated_model(const MLLParameterization& param) {
  ModelSpec s;
  s.param = param;
  Eigen::Index n = Eigen::Index(param.n_components());
  s.C = Mat::Zero(n, 0);
  s.X = Mat::Identity(n, n);
  return s;
}

/// Model setting the listed effects' components to zero. C picks the
/// constrained components, X the remaining ones.
inline ModelSpec zero_effect_model(const MLLParameterization& param, const std::vector<Mask>& effects) {
  std::set<Mask> uniq(effects.begin(), effects.end());
  ModelSpec s;
  s.param = param;
  s.zeroed_effects.assign(uniq.begin(), uniq.end());
  Eigen::Index n = Eigen::Index(param.n_components());
  std::vector<bool> zero(std::size_t(n), false);
  for (Mask e : uniq) {
    param.scheme().check_mask(e);
    int b = -1;
    for (std::size_t i = 0; i < param.blocks().size(); ++i)
      if (param.blocks()[i].effect == e) b = int(i);
    if (b < 0 || !param.block_included(std::size_t(b)))
      throw SchemeError("effect not present in the parameterization");
    std::size_t off = param.offset(std::size_t(b));
    for (Eigen::Index c = 0; c < param.blocks()[std::size_t(b)].columns.cols(); ++c)
      zero[off + std::size_t(c)] = true;
  }
  Eigen::Index q = Eigen::Index(std::count(zero.begin(), zero.end(), true));
  s.C = Mat::Zero(n, q);
  s.X = Mat::Zero(n, n - q);
  Eigen::Index ci = 0, xi = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (zero[std::size_t(i)])
      s.C(i, ci++) = 1.0;
    else
      s.X(i, xi++) = 1.0;
  }
  return s;
}

/// Model from a general constraint matrix (columns = constraints).
inline ModelSpec constraint_model(const MLLParameterization& param, const Mat& C) {
  if (std::size_t(C.rows()) != param.n_components())
    throw SchemeError("constraint matrix row count mismatch");
  ModelSpec s;
  s.param = param;
  s.C = C;
  s.X = orthogonal_complement(C);
  return s;
}

namespace detail {

inline std::vector<CompileError::Violation> dcond_violations(const std::vector<CIStatement>& cis,
                                                             const MarginalSequence& seq,
                                                             const VariableScheme& sc) {
  auto housing = assign_effects(sc, seq);
  std::vector<CompileError::Violation> out;
  for (std::size_t i = 0; i < cis.size(); ++i) {
    Mask ubc = cis[i].a | cis[i].b | cis[i].given;
    for (Mask e : cis[i].d_set()) {
      Mask m = seq.marginals[std::size_t(housing[e])];
      bool ok = ((cis[i].given & m) == cis[i].given) && ((m & ubc) == m);
      if (!ok) out.push_back({e, m, int(i)});
    }
  }
  return out;
}

}  // namespace detail

/// Compile conditional independences into a zero-effect model on `seq`,
/// verifying C_i ⊆ M(E) ⊆ A_i∪B_i∪C_i for every effect E meeting both sides.
inline ModelSpec compile_ci(const std::vector<CIStatement>& cis, const MarginalSequence& seq,
                            const VariableScheme& scheme, CodingKind coding = CodingKind::local) {
  for (const auto& ci : cis) ci.validate(scheme);
  seq.validate(scheme);
  auto viol = detail::dcond_violations(cis, seq, scheme);
  if (!viol.empty()) {
    std::string msg = "sequence violates the housing condition for " +
                      std::to_string(viol.size()) + " effect(s); first: effect {";
    for (const auto& n : scheme.names_of(viol[0].effect)) msg += n;
    msg += "} housed in {";
    for (const auto& n : scheme.names_of(viol[0].housing)) msg += n;
    msg += "} for independence #" + std::to_string(viol[0].ci_index + 1);
    throw CompileError(msg, std::move(viol));
  }
  std::set<Mask> zeros;
  for (const auto& ci : cis)
    for (Mask e : ci.d_set()) zeros.insert(e);
  auto param = MLLParameterization::build(scheme, seq, coding);
  auto spec = zero_effect_model(param, {zeros.begin(), zeros.end()});
  spec.provenance = "CI";
  return spec;
}

/// Search a marginal sequence for the independences when none is supplied:
/// candidates are the statement homes A_i∪B_i∪C_i plus the full set; every
/// admissible non-decreasing ordering is tried. Reports the necessary-
/// condition witness or "no admissible ordering" on failure.
inline std::pair<ModelSpec, MarginalSequence> compile_ci(const std::vector<CIStatement>& cis,
                                                         const VariableScheme& scheme,
                                                         CodingKind coding = CodingKind::local) {
  for (const auto& ci : cis) ci.validate(scheme);
  // necessary condition: ∪C_i ⊆ ∩(A∪B∪C) over the statements sharing an effect
  std::set<Mask> all;
  for (const auto& ci : cis)
    for (Mask e : ci.d_set()) all.insert(e);
  for (Mask e : all) {
    Mask cu = 0, inter = scheme.full_mask();
    for (const auto& ci : cis) {
      Mask u = ci.a | ci.b | ci.given;
      if ((e & ci.a) && (e & ci.b) && (e & u) == e) {
        cu |= ci.given;
        inter &= u;
      }
    }
    if ((cu & inter) != cu) {
      std::string msg = "no admissible sequence of marginals exists: effect {";
      for (const auto& n : scheme.names_of(e)) msg += n;
      msg += "} requires conditioning variables outside every usable marginal";
      throw CompileError(msg, {{e, 0, -1}}, true);
    }
  }

  std::vector<Mask> cand;
  for (const auto& ci : cis) cand.push_back(ci.a | ci.b | ci.given);
  cand.push_back(scheme.full_mask());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  // full set always last; permute the rest
  cand.erase(std::remove(cand.begin(), cand.end(), scheme.full_mask()), cand.end());
  std::sort(cand.begin(), cand.end());
  do {
    MarginalSequence seq;
    seq.marginals = cand;
    seq.marginals.push_back(scheme.full_mask());
    bool nondecr = true;
    for (std::size_t j = 1; nondecr && j < seq.marginals.size(); ++j)
      for (std::size_t i = 0; i < j; ++i)
        if ((seq.marginals[j] & seq.marginals[i]) == seq.marginals[j]) { nondecr = false; break; }
    if (!nondecr) continue;
    if (detail::dcond_violations(cis, seq, scheme).empty())
      return {compile_ci(cis, seq, scheme, coding), seq};
  } while (std::next_permutation(cand.begin(), cand.end()));
  throw CompileError("no admissible ordering: every non-decreasing ordering of the candidate "
                     "marginals violates the housing condition",
                     {}, true);
}

struct DirectedGraph {
  std::vector<std::pair<int, int>> edges;  // tail -> head, scheme variable indices
};

struct ChainGraph {
  std::vector<std::vector<int>> components;  // well-numbered chain components
  std::vector<std::pair<int, int>> edges;    // within a component: undirected; across: directed
};

struct CompiledModel {
  MarginalSequence seq;
  std::vector<CIStatement> cis;
  ModelSpec spec;
};

namespace detail {

/// Stable topological order (by scheme position among available nodes).
inline std::vector<int> topo_order(int n, const std::vector<std::pair<int, int>>& edges) {
  std::vector<int> indeg(std::size_t(n), 0);
  for (auto [u, v] : edges) {
    if (u < 0 || v < 0 || u >= n || v >= n || u == v) throw SchemeError("bad edge");
    ++indeg[std::size_t(v)];
  }
  std::vector<int> order;
  std::vector<bool> done(std::size_t(n), false);
  for (int step = 0; step < n; ++step) {
    int pick = -1;
    for (int j = 0; j < n; ++j)
      if (!done[std::size_t(j)] && indeg[std::size_t(j)] == 0) { pick = j; break; }
    if (pick < 0) throw CompileError("graph contains a directed cycle");
    done[std::size_t(pick)] = true;
    order.push_back(pick);
    for (auto [u, v] : edges)
      if (u == pick && !done[std::size_t(v)]) --indeg[std::size_t(v)];
  }
  return order;
}

}  // namespace detail

/// DAG Markov model: well-number the nodes, emit V_i ⊥ pre\pa | pa per node,
/// parameterize over the prefix marginals, and zero the implied effects.
inline CompiledModel compile_dag(const DirectedGraph& g, const VariableScheme& scheme,
                                 CodingKind coding = CodingKind::local) {
  int n = scheme.size();
  auto order = detail::topo_order(n, g.edges);
  CompiledModel out;
  Mask pre = 0;
  for (int v : order) {
    Mask pa = 0;
    for (auto [s, t] : g.edges)
      if (t == v) pa |= Mask(1u) << s;
    Mask rest = pre & ~pa;
    if (rest != 0) out.cis.push_back({Mask(1u) << v, rest, pa});
    pre |= Mask(1u) << v;
    out.seq.marginals.push_back(pre);
  }
  out.spec = compile_ci(out.cis, out.seq, scheme, coding);
  out.spec.provenance = "DAG";
  return out;
}

/// Type IV chain-graph model. Within-component edges are read as undirected,
/// cross-component edges as directed and must point forward in the given
/// component order.
inline CompiledModel compile_chain_type4(const ChainGraph& g, const VariableScheme& scheme,
                                         CodingKind coding = CodingKind::local) {
  int n = scheme.size();
  std::vector<int> comp_of(std::size_t(n), -1);
  for (std::size_t t = 0; t < g.components.size(); ++t)
    for (int v : g.components[t]) {
      if (v < 0 || v >= n || comp_of[std::size_t(v)] != -1)
        throw CompileError("components must partition the variables");
      comp_of[std::size_t(v)] = int(t);
    }
  for (int j = 0; j < n; ++j)
    if (comp_of[std::size_t(j)] < 0) throw CompileError("components must partition the variables");

  std::size_t T = g.components.size();
  std::vector<Mask> K(T, 0), PA(T, 0);
  for (std::size_t t = 0; t < T; ++t)
    for (int v : g.components[t]) K[t] |= Mask(1u) << v;
  // nb within components, pa across
  std::vector<Mask> nb(std::size_t(n), 0), pa(std::size_t(n), 0);
  std::vector<bool> has_parent_comp(T, false);
  std::vector<Mask> parent_comps(T, 0);
  for (auto [u, v] : g.edges) {
    if (u < 0 || v < 0 || u >= n || v >= n || u == v) throw SchemeError("bad edge");
    int cu = comp_of[std::size_t(u)], cv = comp_of[std::size_t(v)];
    if (cu == cv) {
      nb[std::size_t(u)] |= Mask(1u) << v;
      nb[std::size_t(v)] |= Mask(1u) << u;
    } else if (cu < cv) {
      pa[std::size_t(v)] |= Mask(1u) << u;
      parent_comps[std::size_t(cv)] |= Mask(1u) << cu;
    } else {
      throw CompileError("directed edge points against the component ordering");
    }
  }
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < T; ++s)
      if (parent_comps[t] & (Mask(1u) << s)) PA[t] |= K[s];

  auto id_set = [](Mask X, Mask Y, Mask Z, std::set<Mask>& zeros) {
    if (X == 0 || Y == 0) return;
    Mask u = X | Y | Z;
    for (Mask e = u;; e = (e - 1) & u) {
      if ((e & X) && (e & Y)) zeros.insert(e);
      if (e == 0) break;
    }
  };

  MarginalSequence seq;
  std::set<Mask> zeros;
  Mask cum = 0;
  auto append = [&seq](Mask m) {
    if (m == 0) return;
    for (Mask prev : seq.marginals)
      if ((m & prev) == m) return;
    seq.marginals.push_back(m);
  };
  for (std::size_t t = 0; t < T; ++t) {
    // {PA(K_t) ∪ X : X ⊆ K_t} in a non-decreasing order (size, then mask)
    std::vector<Mask> ms;
    for (Mask X = K[t];; X = (X - 1) & K[t]) {
      ms.push_back(PA[t] | X);
      if (X == 0) break;
    }
    std::sort(ms.begin(), ms.end(), [](Mask a, Mask b) {
      return popcount(a) != popcount(b) ? popcount(a) < popcount(b) : a < b;
    });
    for (Mask m : ms) append(m);
    cum |= K[t];
    append(cum);

    Mask PRE = 0;
    for (std::size_t s = 0; s < t; ++s) PRE |= K[s];
    for (Mask X = K[t];; X = (X - 1) & K[t]) {
      if (X != 0) {
        Mask nbX = 0, paX = 0;
        for (int v = 0; v < n; ++v)
          if (X & (Mask(1u) << v)) {
            nbX |= nb[std::size_t(v)];
            paX |= pa[std::size_t(v)];
          }
        nbX &= ~X;
        id_set(X, K[t] & ~X & ~nbX, PA[t], zeros);        // P2b
        id_set(X, PA[t] & ~paX, paX, zeros);              // P3b
      }
      if (X == 0) break;
    }
    id_set(K[t], PRE & ~PA[t], PA[t], zeros);             // P1
  }
  if (seq.marginals.empty() || seq.marginals.back() != scheme.full_mask())
    append(scheme.full_mask());

  CompiledModel out;
  out.seq = seq;
  auto param = MLLParameterization::build(scheme, seq, coding);
  out.spec = zero_effect_model(param, {zeros.begin(), zeros.end()});
  out.spec.provenance = "chain";
  return out;
}

/// Path model: DAG zero set plus every surviving effect of more than two
/// variables.
inline CompiledModel compile_path(const DirectedGraph& g, const VariableScheme& scheme,
                                  CodingKind coding = CodingKind::local) {
  CompiledModel out = compile_dag(g, scheme, coding);
  std::set<Mask> zeros(out.spec.zeroed_effects.begin(), out.spec.zeroed_effects.end());
  for (Mask e = 0; e < (Mask(1u) << scheme.size()); ++e)
    if (popcount(e) > 2) zeros.insert(e);
  out.spec = zero_effect_model(out.spec.param, {zeros.begin(), zeros.end()});
  out.spec.provenance = "path";
  return out;
}

}  // namespace mml
