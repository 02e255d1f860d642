#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gridrate/factor_graph.hpp"
#include "gridrate/logdomain.hpp"
#include "gridrate/region_graph.hpp"

// The sweep spends nearly all its time exponentiating, so the log-sum-exp
// gets 8-wide exp/log kernels (~1e-14 relative, see detail::vexp_nonpos)
// instead of libm calls. Scalar fallback keeps other targets correct.
#if defined(__AVX512F__)
#define GRIDRATE_VEC_LSE 1
#include <immintrin.h>
#endif

namespace gridrate {

struct GbpConfig {
  double damping = 0.5;     // new = damping*old + (1-damping)*update, log domain
  int max_iters = 2000;
  double tolerance = 1e-8;  // max absolute log-message change
  std::ostream* trace = nullptr;  // per-sweep "iteration,max_residual,f_kikuchi"
};

// One log table per Hasse edge, aligned with RegionGraph::edges order.
// Every table is normalized to log-sum-exp zero.
struct MessageSet {
  std::vector<std::vector<double>> tables;
};

// Normalized probability table per region, over its var_set assignments.
struct RegionBeliefs {
  std::vector<std::vector<double>> tables;
};

struct FreeEnergyEstimate {
  double minus_log_z = 0.0;  // approximation of -ln Z~, ledger folded in
  double per_symbol = 0.0;   // minus_log_z / n_vars
  bool converged = false;
  int iterations = 0;
  double max_residual = 0.0;  // of the final sweep
};

namespace detail {

// For joint states of `ctx` (sorted vars, first var = least significant base-q
// digit), the corresponding state of `target` under the same convention.
// Target order need not be sorted; its first var is its least significant
// digit, which also makes this reusable for factor-table lookups.
inline std::vector<std::uint32_t> state_index_map(const std::vector<std::uint32_t>& ctx,
                                                  const std::vector<std::uint32_t>& target,
                                                  std::uint32_t q) {
  std::vector<std::uint64_t> stride(ctx.size(), 0);
  std::uint64_t tstride = 1;
  for (std::uint32_t tv : target) {
    const auto it = std::lower_bound(ctx.begin(), ctx.end(), tv);
    if (it == ctx.end() || *it != tv)
      throw std::logic_error("state_index_map: target var not in context");
    stride[static_cast<std::size_t>(it - ctx.begin())] = tstride;
    tstride *= q;
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < ctx.size(); ++i) n *= q;
  std::vector<std::uint32_t> out(n);
  std::vector<std::uint32_t> digits(ctx.size(), 0);
  std::uint64_t idx = 0;
  for (std::size_t s = 0; s < n; ++s) {
    out[s] = static_cast<std::uint32_t>(idx);
    for (std::size_t d = 0; d < digits.size(); ++d) {
      if (++digits[d] < q) {
        idx += stride[d];
        break;
      }
      digits[d] = 0;
      idx -= stride[d] * (q - 1);
    }
  }
  return out;
}

// Region-id bitset keyed by word blocks; used for subtree membership.
struct IdSet {
  std::vector<std::uint64_t> bits;
  explicit IdSet(std::size_t n = 0) : bits((n + 63) / 64, 0) {}
  void set(std::uint32_t i) { bits[i >> 6] |= std::uint64_t{1} << (i & 63); }
  bool test(std::uint32_t i) const { return (bits[i >> 6] >> (i & 63)) & 1; }
  void unite(const IdSet& o) {
    for (std::size_t w = 0; w < bits.size(); ++w) bits[w] |= o.bits[w];
  }
  void intersect(const IdSet& o) {
    for (std::size_t w = 0; w < bits.size(); ++w) bits[w] &= o.bits[w];
  }
};

}  // namespace detail

// Everything about a (region graph, factor structure) pair that survives
// across trials: subtree-derived message sets per edge and belief rule per
// region, plus integer state-projection maps so the sweep itself is pure
// table arithmetic. Tables (factor values) are per-trial and live outside.
struct GbpPlan {
  const RegionGraph* graph = nullptr;
  std::uint32_t q = 0;
  std::uint32_t n_vars = 0;

  std::vector<std::size_t> region_states;                    // q^|var_set|
  std::vector<std::vector<std::uint32_t>> region_factors;    // indices into fg.factors
  std::vector<std::vector<std::uint32_t>> region_factor_map; // pool ids, aligned with region_factors

  std::vector<std::vector<std::uint32_t>> proj_pool;  // shared projection maps

  struct Term {
    std::uint32_t edge;  // message index
    std::uint32_t proj;  // pool id: context state -> that message's child state
  };
  struct GroupRef {
    std::uint32_t group;  // index into the owning parent's groups
    std::uint32_t proj;   // pool id: child state -> that group's head state
  };
  struct EdgeInfo {
    std::uint32_t parent = 0, child = 0;
    std::uint32_t proj_pc = 0;  // parent state -> child state
    std::vector<Term> denom;    // evaluated over child states
    // Sweep layout: parent states permuted so each child's preimage is one
    // contiguous run. Projections onto a variable subset have equal-sized
    // fibers, so run c occupies [c*L, (c+1)*L) with L = np/nc; child digits
    // sit above the free digits, making the run index the child state.
    std::uint32_t perm = UINT32_MAX;  // pool id, active edges only
    std::vector<GroupRef> pulled;     // subtracted on the child scope, see ParentPlan
  };
  // The numerator product for edge P->C collects the messages entering
  // subtree(P) whose head lies outside subtree(C). A head inside subtree(C)
  // has its scope inside C's variables, so that message is constant on each
  // child fiber and commutes with the log-sum-exp. What the sum then needs is
  // the same table for every child of P: local(P) plus all messages entering
  // subtree(P). The sweep builds it once per parent -- messages sharing a head
  // are pre-summed on the head's scope (groups), groups whose scope another
  // group contains are folded into it, and only the maximal scopes are swept
  // across the parent table -- and each edge subtracts its own inside-
  // subtree(C) groups back out on the child scope (EdgeInfo::pulled).
  struct ParentPlan {
    std::uint32_t region = 0;
    struct Group {
      std::uint32_t dst = 0;     // head region; the table's scope
      std::uint32_t off = 0;     // offset into the group scratch buffer
      std::uint32_t states = 0;
      std::vector<std::uint32_t> msgs;  // message ids, summed pointwise
    };
    struct Table {
      std::uint32_t group = 0;  // the maximal group this table starts from
      std::uint32_t off = 0;    // offset into the table scratch buffer
      std::uint32_t states = 0;
      std::uint32_t proj = 0;   // pool id: parent state -> table scope state
    };
    struct Fold {
      std::uint32_t table;  // index into tables
      std::uint32_t group;  // index into groups
      std::uint32_t proj;   // pool id: table scope state -> group scope state
    };
    std::vector<Group> groups;
    std::vector<Table> tables;
    std::vector<Fold> folds;
    std::vector<std::uint32_t> edges;  // this parent's active out-edges
  };
  std::vector<EdgeInfo> edges;                  // same order as graph->edges
  std::vector<std::uint32_t> active_edges;      // edges iterated by the sweep
  std::vector<ParentPlan> parents;              // partitions active_edges
  std::vector<std::vector<Term>> belief_terms;  // per region, over region states
  std::size_t max_states = 1;
  std::size_t group_scratch = 0, table_scratch = 0;  // per-parent buffer high-water marks
};

// Derives the parent-to-child structure from the Hasse diagram. With
// subtree(R) = R plus its descendants, edge P->C uses
//   numerator:   messages (I->J), J in subtree(P)\subtree(C), I outside subtree(P)
//   denominator: messages (I->J), J in subtree(C), I in subtree(P)\subtree(C), except P->C
// and region R's belief collects messages (I->J) with J in subtree(R), I outside.
// These are exactly the sets that make every fixed point satisfy
// b_C = sum over x_{P\C} of b_P.
//
// The sweep runs on the sub-poset of regions with nonzero counting number.
// Regions with counting number zero contribute nothing to the Kikuchi
// functional, and their message loops only add redundant directions with
// unit-or-greater gain to the update map (they diverge even at zero
// coupling). Excluded edges keep their uniform initialization; a uniform
// table shifts every belief by a constant that normalization removes, so
// beliefs and the free energy are those of the reduced fixed point.
inline GbpPlan make_gbp_plan(const RegionGraph& g, const FactorGraph& fg) {
  GbpPlan plan;
  plan.graph = &g;
  plan.q = fg.domain_size();
  plan.n_vars = fg.n_vars;
  const std::size_t nr = g.regions.size();
  const std::size_t ne = g.edges.size();

  std::uint32_t max_id = 0;
  for (const auto& f : fg.factors) max_id = std::max(max_id, f.id);
  std::vector<std::uint32_t> index_of_id(max_id + 1, UINT32_MAX);
  for (std::uint32_t i = 0; i < fg.factors.size(); ++i) index_of_id[fg.factors[i].id] = i;

  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> pool_key;  // (ctx region, target region)
  auto region_proj = [&](std::uint32_t ctx, std::uint32_t target) {
    const auto it = pool_key.find({ctx, target});
    if (it != pool_key.end()) return it->second;
    plan.proj_pool.push_back(detail::state_index_map(g.regions[ctx].var_set,
                                                     g.regions[target].var_set, plan.q));
    const auto id = static_cast<std::uint32_t>(plan.proj_pool.size() - 1);
    pool_key.emplace(std::make_pair(ctx, target), id);
    return id;
  };

  plan.region_states.resize(nr);
  plan.region_factors.resize(nr);
  plan.region_factor_map.resize(nr);
  for (std::uint32_t r = 0; r < nr; ++r) {
    std::size_t st = 1;
    for (std::size_t i = 0; i < g.regions[r].var_set.size(); ++i) st *= plan.q;
    plan.region_states[r] = st;
    plan.max_states = std::max(plan.max_states, st);
    for (std::uint32_t fid : g.regions[r].factor_ids) {
      const std::uint32_t fi = index_of_id[fid];
      if (fi == UINT32_MAX) throw std::logic_error("make_gbp_plan: region names unknown factor");
      plan.region_factors[r].push_back(fi);
      plan.proj_pool.push_back(
          detail::state_index_map(g.regions[r].var_set, fg.factors[fi].scope, plan.q));
      plan.region_factor_map[r].push_back(static_cast<std::uint32_t>(plan.proj_pool.size() - 1));
    }
  }

  // Subtrees bottom-up; region ids increase downward, so a reverse pass works.
  // `subtree` spans the whole graph (belief rule); `reduced` spans only the
  // counting-relevant sub-poset (message sets). Because the region set is
  // closed under intersection, Hasse reachability coincides with containment
  // in both posets, so the two agree on counting-relevant members.
  std::vector<char> active(nr);
  detail::IdSet active_mask(nr);
  for (std::uint32_t r = 0; r < nr; ++r)
    if ((active[r] = g.regions[r].counting_number != 0)) active_mask.set(r);
  std::vector<detail::IdSet> subtree(nr, detail::IdSet(nr));
  for (std::uint32_t r = static_cast<std::uint32_t>(nr); r-- > 0;) {
    subtree[r].set(r);
    for (std::uint32_t c : g.regions[r].children) subtree[r].unite(subtree[c]);
  }
  std::vector<detail::IdSet> reduced = subtree;
  for (auto& s : reduced) s.intersect(active_mask);

  plan.edges.resize(ne);
  for (std::uint32_t ei = 0; ei < ne; ++ei) {
    auto& e = plan.edges[ei];
    e.parent = g.edges[ei].first;
    e.child = g.edges[ei].second;
    e.proj_pc = region_proj(e.parent, e.child);
    if (!active[e.parent] || !active[e.child]) continue;
    plan.active_edges.push_back(ei);
    for (std::uint32_t mj = 0; mj < ne; ++mj) {
      const std::uint32_t src = g.edges[mj].first;
      const std::uint32_t dst = g.edges[mj].second;
      if (!active[src] || !active[dst]) continue;
      if (mj != ei && reduced[e.child].test(dst) && reduced[e.parent].test(src) &&
          !reduced[e.child].test(src))
        e.denom.push_back({mj, region_proj(e.child, dst)});
    }

    // Work layout digits, low to high: free vars, then child vars in their
    // table order, so the run index equals the child state.
    const auto& pv = g.regions[e.parent].var_set;
    const auto& cv = g.regions[e.child].var_set;
    std::vector<std::uint32_t> layout;
    for (std::uint32_t v : pv)
      if (!std::binary_search(cv.begin(), cv.end(), v)) layout.push_back(v);
    layout.insert(layout.end(), cv.begin(), cv.end());
    std::vector<std::uint64_t> pstride(layout.size());
    for (std::size_t d = 0; d < layout.size(); ++d) {
      const auto it = std::lower_bound(pv.begin(), pv.end(), layout[d]);
      std::uint64_t s = 1;
      for (std::ptrdiff_t k = 0; k < it - pv.begin(); ++k) s *= plan.q;
      pstride[d] = s;
    }
    const std::size_t np = plan.region_states[e.parent];
    std::vector<std::uint32_t> perm(np);
    std::vector<std::uint32_t> digits(layout.size(), 0);
    std::uint64_t pidx = 0;
    for (std::size_t i = 0; i < np; ++i) {
      perm[i] = static_cast<std::uint32_t>(pidx);
      for (std::size_t d = 0; d < layout.size(); ++d) {
        if (++digits[d] < plan.q) {
          pidx += pstride[d];
          break;
        }
        digits[d] = 0;
        pidx -= pstride[d] * (plan.q - 1);
      }
    }
    plan.proj_pool.push_back(std::move(perm));
    e.perm = static_cast<std::uint32_t>(plan.proj_pool.size() - 1);
  }

  // Shared parent tables: group the messages entering each parent's subtree
  // by head, then pick the traversal tables. A group is maximal when no other
  // group's scope strictly contains its own; every non-maximal group folds
  // into the smallest maximal scope containing it. Scratch offsets are
  // per-parent because the sweep finishes one parent before the next.
  {
    std::vector<std::uint32_t> parent_index(nr, UINT32_MAX);
    for (std::uint32_t ei : plan.active_edges) {
      auto& e = plan.edges[ei];
      if (parent_index[e.parent] == UINT32_MAX) {
        parent_index[e.parent] = static_cast<std::uint32_t>(plan.parents.size());
        plan.parents.emplace_back();
        plan.parents.back().region = e.parent;
      }
      plan.parents[parent_index[e.parent]].edges.push_back(ei);
    }
    for (auto& pp : plan.parents) {
      const std::uint32_t p = pp.region;
      std::map<std::uint32_t, std::vector<std::uint32_t>> by_dst;
      for (std::uint32_t mj = 0; mj < ne; ++mj) {
        const std::uint32_t src = g.edges[mj].first;
        const std::uint32_t dst = g.edges[mj].second;
        if (!active[src] || !active[dst]) continue;
        if (reduced[p].test(dst) && !reduced[p].test(src)) by_dst[dst].push_back(mj);
      }
      std::uint32_t goff = 0;
      for (auto& [dst, msgs] : by_dst) {
        auto& gr = pp.groups.emplace_back();
        gr.dst = dst;
        gr.off = goff;
        gr.states = static_cast<std::uint32_t>(plan.region_states[dst]);
        gr.msgs = std::move(msgs);
        goff += gr.states;
      }
      plan.group_scratch = std::max<std::size_t>(plan.group_scratch, goff);

      auto scope_of = [&](std::uint32_t gi) -> const std::vector<std::uint32_t>& {
        return g.regions[pp.groups[gi].dst].var_set;
      };
      auto contains = [&](std::uint32_t big, std::uint32_t small) {
        return scope_of(big).size() > scope_of(small).size() &&
               std::includes(scope_of(big).begin(), scope_of(big).end(),
                             scope_of(small).begin(), scope_of(small).end());
      };
      const auto ng = static_cast<std::uint32_t>(pp.groups.size());
      std::uint32_t toff = 0;
      for (std::uint32_t gi = 0; gi < ng; ++gi) {
        bool maximal = true;
        for (std::uint32_t gj = 0; gj < ng && maximal; ++gj)
          if (gj != gi && contains(gj, gi)) maximal = false;
        if (!maximal) continue;
        auto& tb = pp.tables.emplace_back();
        tb.group = gi;
        tb.off = toff;
        tb.states = pp.groups[gi].states;
        tb.proj = region_proj(p, pp.groups[gi].dst);
        toff += tb.states;
      }
      plan.table_scratch = std::max<std::size_t>(plan.table_scratch, toff);
      for (std::uint32_t gi = 0; gi < ng; ++gi) {
        std::uint32_t best = UINT32_MAX;
        for (std::uint32_t ti = 0; ti < pp.tables.size(); ++ti) {
          const std::uint32_t gj = pp.tables[ti].group;
          if (!contains(gj, gi)) continue;
          if (best == UINT32_MAX || scope_of(gj).size() < scope_of(pp.tables[best].group).size())
            best = ti;
        }
        if (best != UINT32_MAX)
          pp.folds.push_back({best, gi, region_proj(pp.groups[pp.tables[best].group].dst,
                                                    pp.groups[gi].dst)});
      }
      for (std::uint32_t ei : pp.edges) {
        auto& e = plan.edges[ei];
        for (std::uint32_t gi = 0; gi < ng; ++gi)
          if (reduced[e.child].test(pp.groups[gi].dst))
            e.pulled.push_back({gi, region_proj(e.child, pp.groups[gi].dst)});
      }
    }
  }

  plan.belief_terms.resize(nr);
  for (std::uint32_t r = 0; r < nr; ++r)
    for (std::uint32_t mj = 0; mj < ne; ++mj)
      if (subtree[r].test(g.edges[mj].second) && !subtree[r].test(g.edges[mj].first))
        plan.belief_terms[r].push_back({mj, region_proj(r, g.edges[mj].second)});

  return plan;
}

inline MessageSet init_messages(const RegionGraph& g, std::uint32_t domain_size) {
  MessageSet ms;
  ms.tables.resize(g.edges.size());
  for (std::size_t ei = 0; ei < g.edges.size(); ++ei) {
    std::size_t st = 1;
    for (std::size_t i = 0; i < g.regions[g.edges[ei].second].var_set.size(); ++i)
      st *= domain_size;
    ms.tables[ei].assign(st, -std::log(static_cast<double>(st)));
  }
  return ms;
}

namespace detail {

#if GRIDRATE_VEC_LSE
// exp for x <= 0, as produced by max-shifted log tables. Cody-Waite reduction,
// degree-11 Taylor (~9e-15 relative). Lanes below -690 flush to exact zero:
// they contribute nothing to sums whose dominant term is 1, and letting them
// underflow gradually instead would spray subnormals through the accumulators
// (each touch costs a microcode assist, which is most of a sweep's budget on
// strongly-coupled tables). NaN lanes pass through: a poisoned table must
// stay poisoned or the solver's line search would accept garbage steps.
inline __m512d vexp_nonpos(__m512d x) {
  const __m512d invln2 = _mm512_set1_pd(1.4426950408889634074);
  const __m512d ln2hi = _mm512_set1_pd(6.93147180369123816490e-01);
  const __m512d ln2lo = _mm512_set1_pd(1.90821492927058770002e-10);
  const __mmask8 unord = _mm512_cmp_pd_mask(x, x, _CMP_UNORD_Q);
  const __mmask8 live = _mm512_cmp_pd_mask(x, _mm512_set1_pd(-690.0), _CMP_NLT_UQ);
  x = _mm512_max_pd(x, _mm512_set1_pd(-746.0));
  const __m512d k = _mm512_roundscale_pd(_mm512_mul_pd(x, invln2),
                                         _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m512d r = _mm512_fnmadd_pd(k, ln2hi, x);
  r = _mm512_fnmadd_pd(k, ln2lo, r);
  const __m512d r2 = _mm512_mul_pd(r, r);
  const __m512d r4 = _mm512_mul_pd(r2, r2);
  const __m512d r8 = _mm512_mul_pd(r4, r4);
  const __m512d q0 = _mm512_add_pd(_mm512_set1_pd(1.0), r);
  const __m512d q1 = _mm512_fmadd_pd(r, _mm512_set1_pd(1.0 / 6), _mm512_set1_pd(1.0 / 2));
  const __m512d q2 = _mm512_fmadd_pd(r, _mm512_set1_pd(1.0 / 120), _mm512_set1_pd(1.0 / 24));
  const __m512d q3 = _mm512_fmadd_pd(r, _mm512_set1_pd(1.0 / 5040), _mm512_set1_pd(1.0 / 720));
  const __m512d q4 = _mm512_fmadd_pd(r, _mm512_set1_pd(1.0 / 362880), _mm512_set1_pd(1.0 / 40320));
  const __m512d q5 =
      _mm512_fmadd_pd(r, _mm512_set1_pd(1.0 / 39916800), _mm512_set1_pd(1.0 / 3628800));
  const __m512d s0 = _mm512_fmadd_pd(r2, q1, q0);
  const __m512d s1 = _mm512_fmadd_pd(r2, q3, q2);
  const __m512d s2 = _mm512_fmadd_pd(r2, q5, q4);
  const __m512d p = _mm512_fmadd_pd(r8, s2, _mm512_fmadd_pd(r4, s1, s0));
  return _mm512_mask_mov_pd(_mm512_scalef_pd(p, k), unord, _mm512_set1_pd(NAN));
}

// log for positive normal x (the per-run sums lie in [1, run length]).
// Mantissa reduced to [0.75, 1.5), atanh series in s = (m-1)/(m+1), |s| <= 0.2.
inline __m512d vlog_pos(__m512d x) {
  const __m512d one = _mm512_set1_pd(1.0);
  __m512d k = _mm512_getexp_pd(x);
  __m512d m = _mm512_getmant_pd(x, _MM_MANT_NORM_1_2, _MM_MANT_SIGN_zero);
  const __mmask8 half = _mm512_cmp_pd_mask(m, _mm512_set1_pd(1.5), _CMP_GE_OQ);
  m = _mm512_mask_mul_pd(m, half, m, _mm512_set1_pd(0.5));
  k = _mm512_mask_add_pd(k, half, k, one);
  const __m512d s = _mm512_div_pd(_mm512_sub_pd(m, one), _mm512_add_pd(m, one));
  const __m512d u = _mm512_mul_pd(s, s);
  __m512d p = _mm512_set1_pd(1.0 / 17);
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 15));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 13));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 11));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 9));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 7));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 5));
  p = _mm512_fmadd_pd(p, u, _mm512_set1_pd(1.0 / 3));
  p = _mm512_fmadd_pd(p, u, one);
  const __m512d ln2hi = _mm512_set1_pd(6.93147180369123816490e-01);
  const __m512d ln2lo = _mm512_set1_pd(1.90821492927058770002e-10);
  const __m512d t = _mm512_fmadd_pd(_mm512_add_pd(s, s), p, _mm512_mul_pd(k, ln2lo));
  return _mm512_fmadd_pd(k, ln2hi, t);
}
#endif

struct SweepWorkspace {
  std::vector<double> work, cmax, cacc, upd, ptab, xbuf, gbuf, tbuf;
  explicit SweepWorkspace(const GbpPlan& plan)
      : work(plan.max_states),
        cmax(plan.max_states),
        cacc(plan.max_states),
        upd(plan.max_states),
        ptab(plan.max_states),
        xbuf(plan.max_states),
        gbuf(plan.group_scratch),
        tbuf(plan.table_scratch) {}
};

// One full synchronous pass: reads `in`, writes normalized undamped updates
// for every active edge into `out` (inactive tables are copied through).
// This is the map whose fixed points carry the marginalization-consistency
// property; damping and solvers live on top of it.
inline void synchronous_sweep(const GbpPlan& plan,
                              const std::vector<std::vector<double>>& local,
                              const std::vector<std::vector<double>>& in,
                              std::vector<std::vector<double>>& out, SweepWorkspace& ws) {
  out = in;
  for (const auto& pp : plan.parents) {
    double* gbuf = ws.gbuf.data();
    double* tbuf = ws.tbuf.data();
    for (const auto& gr : pp.groups) {
      double* gt = gbuf + gr.off;
      const double* m0 = in[gr.msgs[0]].data();
      std::copy(m0, m0 + gr.states, gt);
      for (std::size_t k = 1; k < gr.msgs.size(); ++k) {
        const double* m = in[gr.msgs[k]].data();
        for (std::uint32_t s = 0; s < gr.states; ++s) gt[s] += m[s];
      }
    }
    for (const auto& tb : pp.tables) {
      const double* gt = gbuf + pp.groups[tb.group].off;
      std::copy(gt, gt + tb.states, tbuf + tb.off);
    }
    for (const auto& f : pp.folds) {
      double* dst = tbuf + pp.tables[f.table].off;
      const double* src = gbuf + pp.groups[f.group].off;
      const std::uint32_t* proj = plan.proj_pool[f.proj].data();
      for (std::uint32_t s = 0; s < pp.tables[f.table].states; ++s) dst[s] += src[proj[s]];
    }
    // The shared table: local plus everything entering the subtree.
    const std::size_t np = plan.region_states[pp.region];
    double* T = ws.ptab.data();
    std::copy(local[pp.region].begin(), local[pp.region].end(), T);
    for (const auto& tb : pp.tables) {
      const double* src = tbuf + tb.off;
      const std::uint32_t* proj = plan.proj_pool[tb.proj].data();
      for (std::size_t i = 0; i < np; ++i) T[i] += src[proj[i]];
    }

    for (const std::uint32_t ei : pp.edges) {
      const auto& e = plan.edges[ei];
      const auto& lc = local[e.child];
      const std::size_t nc = in[ei].size();
      const std::size_t L = np / nc;
      auto& work = ws.work;
      auto& cmax = ws.cmax;
      auto& cacc = ws.cacc;
      auto& upd = ws.upd;

      // Parent-side sums in run order, so run c is work[c*L .. (c+1)*L).
      const std::uint32_t* perm = plan.proj_pool[e.perm].data();
      for (std::size_t i = 0; i < np; ++i) work[i] = T[perm[i]];
      // Log-sum-exp per run: per-run max, sum of shifted exps, then one log
      // per run. The shift pins each run's sum into [1, L], and the run with
      // the table maximum contributes exactly 1, so no sum can vanish.
#if GRIDRATE_VEC_LSE
      if (L % 8 == 0) {
        for (std::size_t c = 0; c < nc; ++c) {
          const double* p = work.data() + c * L;
          __m512d vm = _mm512_loadu_pd(p);
          for (std::size_t i = 8; i < L; i += 8)
            vm = _mm512_max_pd(vm, _mm512_loadu_pd(p + i));
          const double m = _mm512_reduce_max_pd(vm);
          const __m512d mb = _mm512_set1_pd(m);
          __m512d acc = vexp_nonpos(_mm512_sub_pd(_mm512_loadu_pd(p), mb));
          for (std::size_t i = 8; i < L; i += 8)
            acc = _mm512_add_pd(acc, vexp_nonpos(_mm512_sub_pd(_mm512_loadu_pd(p + i), mb)));
          cmax[c] = m;
          cacc[c] = _mm512_reduce_add_pd(acc);
        }
      } else if (np % 8 == 0) {
        // Runs shorter than a vector: expand the per-run maxes across the
        // parent index and exponentiate the whole table in one pass.
        double* xm = ws.xbuf.data();
        for (std::size_t c = 0; c < nc; ++c) {
          const double* p = work.data() + c * L;
          double m = p[0];
          for (std::size_t i = 1; i < L; ++i) m = std::max(m, p[i]);
          cmax[c] = m;
          double* x = xm + c * L;
          for (std::size_t i = 0; i < L; ++i) x[i] = m;
        }
        for (std::size_t i = 0; i < np; i += 8)
          _mm512_storeu_pd(work.data() + i,
                           vexp_nonpos(_mm512_sub_pd(_mm512_loadu_pd(work.data() + i),
                                                     _mm512_loadu_pd(xm + i))));
        for (std::size_t c = 0; c < nc; ++c) {
          const double* p = work.data() + c * L;
          double acc = 0.0;
          for (std::size_t i = 0; i < L; ++i) acc += p[i];
          cacc[c] = acc;
        }
      } else
#endif
      {
        for (std::size_t c = 0; c < nc; ++c) {
          const double* p = work.data() + c * L;
          double m = p[0];
          for (std::size_t i = 1; i < L; ++i) m = std::max(m, p[i]);
          double acc = 0.0;
          for (std::size_t i = 0; i < L; ++i) acc += std::exp(p[i] - m);
          cmax[c] = m;
          cacc[c] = acc;
        }
      }
#if GRIDRATE_VEC_LSE
      {
        std::size_t c = 0;
        for (; c + 8 <= nc; c += 8) {
          const __m512d lg = vlog_pos(_mm512_loadu_pd(cacc.data() + c));
          _mm512_storeu_pd(upd.data() + c, _mm512_add_pd(lg, _mm512_loadu_pd(cmax.data() + c)));
        }
        for (; c < nc; ++c) upd[c] = cmax[c] + std::log(cacc[c]);
      }
#else
      for (std::size_t c = 0; c < nc; ++c) upd[c] = cmax[c] + std::log(cacc[c]);
#endif
      for (std::size_t c = 0; c < nc; ++c) upd[c] -= lc[c];
      for (const auto& t : e.pulled) {
        const double* gt = gbuf + pp.groups[t.group].off;
        const std::uint32_t* proj = plan.proj_pool[t.proj].data();
        for (std::size_t c = 0; c < nc; ++c) upd[c] -= gt[proj[c]];
      }
      for (const auto& t : e.denom) {
        const auto& proj = plan.proj_pool[t.proj];
        const auto& m = in[t.edge];
        for (std::size_t c = 0; c < nc; ++c) upd[c] -= m[proj[c]];
      }
      double lz;
#if GRIDRATE_VEC_LSE
      if (nc % 8 == 0) {
        __m512d vm = _mm512_loadu_pd(upd.data());
        for (std::size_t c = 8; c < nc; c += 8)
          vm = _mm512_max_pd(vm, _mm512_loadu_pd(upd.data() + c));
        const double m = _mm512_reduce_max_pd(vm);
        const __m512d mb = _mm512_set1_pd(m);
        __m512d acc = vexp_nonpos(_mm512_sub_pd(_mm512_loadu_pd(upd.data()), mb));
        for (std::size_t c = 8; c < nc; c += 8)
          acc = _mm512_add_pd(acc, vexp_nonpos(_mm512_sub_pd(_mm512_loadu_pd(upd.data() + c), mb)));
        lz = m + std::log(_mm512_reduce_add_pd(acc));
      } else
#endif
      {
        lz = log_sum_exp(std::span<const double>(upd.data(), nc));
      }
      for (std::size_t c = 0; c < nc; ++c) out[ei][c] = upd[c] - lz;
    }
  }
}

// Per-region sums of assigned log factors; the trial-dependent part of the model.
inline std::vector<std::vector<double>> region_local_tables(const GbpPlan& plan,
                                                            const FactorGraph& fg) {
  const std::size_t nr = plan.graph->regions.size();
  std::vector<std::vector<double>> local(nr);
  for (std::size_t r = 0; r < nr; ++r) {
    local[r].assign(plan.region_states[r], 0.0);
    for (std::size_t k = 0; k < plan.region_factors[r].size(); ++k) {
      const auto& table = fg.factors[plan.region_factors[r][k]].log_table;
      const auto& fmap = plan.proj_pool[plan.region_factor_map[r][k]];
      for (std::size_t s = 0; s < local[r].size(); ++s) local[r][s] += table[fmap[s]];
    }
  }
  return local;
}

inline std::vector<std::vector<double>> beliefs_from_messages(
    const GbpPlan& plan, const std::vector<std::vector<double>>& local,
    const std::vector<std::vector<double>>& msgs) {
  const std::size_t nr = plan.graph->regions.size();
  std::vector<std::vector<double>> b(nr);
  for (std::size_t r = 0; r < nr; ++r) {
    std::vector<double> logb = local[r];
    for (const auto& t : plan.belief_terms[r]) {
      const auto& proj = plan.proj_pool[t.proj];
      for (std::size_t s = 0; s < logb.size(); ++s) logb[s] += msgs[t.edge][proj[s]];
    }
    const double lz = log_sum_exp(logb);
    b[r].resize(logb.size());
    double sum = 0.0;
    for (std::size_t s = 0; s < logb.size(); ++s) sum += (b[r][s] = std::exp(logb[s] - lz));
    for (double& v : b[r]) v /= sum;
  }
  return b;
}

// F_K = sum_R c_R sum_s b(s) (E_R(s) + ln b(s)), with E_R = -local and 0 ln 0 = 0.
inline double kikuchi_from_beliefs(const GbpPlan& plan,
                                   const std::vector<std::vector<double>>& local,
                                   const std::vector<std::vector<double>>& beliefs) {
  double fk = 0.0;
  for (std::size_t r = 0; r < plan.graph->regions.size(); ++r) {
    const int c = plan.graph->regions[r].counting_number;
    if (c == 0) continue;
    double acc = 0.0;
    for (std::size_t s = 0; s < beliefs[r].size(); ++s) {
      const double p = beliefs[r][s];
      if (p > 0.0) acc += p * (std::log(p) - local[r][s]);
    }
    fk += c * acc;
  }
  return fk;
}

// Per-variable argmax assignment implied by the current messages, each
// variable read off the smallest region containing it. Used to seed the
// solver near a concentrated fixed point when the evidence is strong.
inline std::vector<std::uint32_t> site_decisions(const GbpPlan& plan,
                                                 const std::vector<std::vector<double>>& local,
                                                 const std::vector<std::vector<double>>& msgs) {
  const auto& regions = plan.graph->regions;
  const std::uint32_t q = plan.q;
  std::vector<std::uint32_t> home(plan.n_vars, UINT32_MAX);
  for (std::uint32_t r = 0; r < regions.size(); ++r)
    for (std::uint32_t v : regions[r].var_set)
      if (home[v] == UINT32_MAX || regions[r].var_set.size() < regions[home[v]].var_set.size())
        home[v] = r;
  const auto beliefs = beliefs_from_messages(plan, local, msgs);
  std::vector<std::uint32_t> dec(plan.n_vars, 0);
  std::vector<double> p(q);
  for (std::uint32_t v = 0; v < plan.n_vars; ++v) {
    const auto& vs = regions[home[v]].var_set;
    std::size_t stride = 1;
    for (std::size_t j = 0; vs[j] != v; ++j) stride *= q;
    std::fill(p.begin(), p.end(), 0.0);
    const auto& b = beliefs[home[v]];
    for (std::size_t s = 0; s < b.size(); ++s) p[(s / stride) % q] += b[s];
    dec[v] = static_cast<std::uint32_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return dec;
}

// Greedy single-site ascent of the joint log-likelihood, sweeping until no
// flip helps. The local tables partition the factor set, so their sum over
// any full assignment is the exact log factor product; each var only touches
// the regions that carry factors over it. Deterministic (first best value
// wins, strict improvement only).
inline void icm_polish(const GbpPlan& plan, const std::vector<std::vector<double>>& local,
                       std::vector<std::uint32_t>& dec) {
  const std::uint32_t q = plan.q;
  const auto& regions = plan.graph->regions;
  struct Touch {
    std::uint32_t region;
    std::uint64_t stride;
  };
  std::vector<std::vector<Touch>> touching(plan.n_vars);
  std::vector<std::uint64_t> idx(regions.size(), 0);  // state of `dec` within each region
  for (std::uint32_t r = 0; r < regions.size(); ++r) {
    if (plan.region_factors[r].empty()) continue;
    std::uint64_t stride = 1, cur = 0;
    for (const std::uint32_t v : regions[r].var_set) {
      touching[v].push_back({r, stride});
      cur += stride * dec[v];
      stride *= q;
    }
    idx[r] = cur;
  }
  for (int pass = 0; pass < 64; ++pass) {
    bool changed = false;
    for (std::uint32_t v = 0; v < plan.n_vars; ++v) {
      const std::uint32_t cur = dec[v];
      std::uint32_t best = cur;
      double best_gain = 1e-12;
      for (std::uint32_t a = 0; a < q; ++a) {
        if (a == cur) continue;
        double gain = 0.0;
        for (const auto& t : touching[v]) {
          const std::uint64_t base = idx[t.region] - t.stride * cur;
          gain += local[t.region][base + t.stride * a] - local[t.region][idx[t.region]];
        }
        if (gain > best_gain) {
          best_gain = gain;
          best = a;
        }
      }
      if (best != cur) {
        for (const auto& t : touching[v])
          idx[t.region] = idx[t.region] + t.stride * best - t.stride * cur;
        dec[v] = best;
        changed = true;
      }
    }
    if (!changed) break;
  }
}

// Overwrites the active-edge tables with messages biased kappa log-units per
// variable agreeing with `dec` (inactive tables are left as passed in).
inline void concentrated_messages(const GbpPlan& plan, const std::vector<std::uint32_t>& dec,
                                  double kappa, std::vector<std::vector<double>>& msgs) {
  const std::uint32_t q = plan.q;
  for (const std::uint32_t ei : plan.active_edges) {
    const auto& vs = plan.graph->regions[plan.edges[ei].child].var_set;
    auto& m = msgs[ei];
    for (std::size_t s = 0; s < m.size(); ++s) {
      std::size_t rem = s;
      int hits = 0;
      for (const std::uint32_t v : vs) {
        if (static_cast<std::uint32_t>(rem % q) == dec[v]) ++hits;
        rem /= q;
      }
      m[s] = kappa * hits;
    }
    const double lz = log_sum_exp(m);
    for (double& t : m) t -= lz;
  }
}

// Flattened view of the active-edge message tables, for the direct solver.
struct FlatLayout {
  std::vector<std::size_t> offset;  // aligned with plan.active_edges, one-past-end sentinel
  std::size_t dim = 0;
};

inline FlatLayout flat_layout(const GbpPlan& plan,
                              const std::vector<std::vector<double>>& tables) {
  FlatLayout lay;
  lay.offset.resize(plan.active_edges.size() + 1, 0);
  for (std::size_t k = 0; k < plan.active_edges.size(); ++k)
    lay.offset[k + 1] = lay.offset[k] + tables[plan.active_edges[k]].size();
  lay.dim = lay.offset.back();
  return lay;
}

inline void pack_active(const GbpPlan& plan, const FlatLayout& lay,
                        const std::vector<std::vector<double>>& tables,
                        std::vector<double>& x) {
  x.resize(lay.dim);
  for (std::size_t k = 0; k < plan.active_edges.size(); ++k) {
    const auto& t = tables[plan.active_edges[k]];
    std::copy(t.begin(), t.end(), x.begin() + static_cast<std::ptrdiff_t>(lay.offset[k]));
  }
}

inline void unpack_active(const GbpPlan& plan, const FlatLayout& lay,
                          const std::vector<double>& x,
                          std::vector<std::vector<double>>& tables) {
  for (std::size_t k = 0; k < plan.active_edges.size(); ++k) {
    auto& t = tables[plan.active_edges[k]];
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(lay.offset[k]),
              x.begin() + static_cast<std::ptrdiff_t>(lay.offset[k + 1]), t.begin());
  }
}

// Restarted GMRES (modified Gram-Schmidt, Givens least squares) on A x = b;
// `av` computes y = A x. Starts from x = 0, returns the recurrence residual
// 2-norm once it is at or below `target` or `max_matvecs` products are spent.
template <class MatVec>
inline double gmres_solve(MatVec&& av, const std::vector<double>& b, std::vector<double>& x,
                          int restart, int max_matvecs, double target) {
  const std::size_t n = b.size();
  const int m = std::max(1, std::min(restart, static_cast<int>(n)));
  // Basis rows are sized on first use; converging early never pays for m+1 rows.
  std::vector<std::vector<double>> v(static_cast<std::size_t>(m) + 1);
  std::vector<std::vector<double>> h(static_cast<std::size_t>(m) + 1,
                                     std::vector<double>(static_cast<std::size_t>(m), 0.0));
  std::vector<double> cs(static_cast<std::size_t>(m), 1.0), sn(static_cast<std::size_t>(m), 0.0);
  std::vector<double> g(static_cast<std::size_t>(m) + 1, 0.0), y(static_cast<std::size_t>(m), 0.0);
  std::vector<double> r = b, w(n, 0.0);

  x.assign(n, 0.0);
  int used = 0;
  double res = 0.0;
  double prev_beta = std::numeric_limits<double>::infinity();
  for (bool first = true;; first = false) {
    if (!first) {
      if (used >= max_matvecs) return res;
      av(x, w);
      ++used;
      for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - w[i];
    }
    double beta = 0.0;
    for (double t : r) beta += t * t;
    beta = std::sqrt(beta);
    // A restart cycle that barely moved the true residual will not move the
    // next one either (the discarded subspace does not come back); the
    // partial solution is already the best this budget buys, and the
    // caller's line search can judge it.
    if (beta > 0.85 * prev_beta) return beta;
    prev_beta = beta;
    res = beta;
    if (!(beta > target)) return res;
    const double ib = 1.0 / beta;
    v[0].resize(n);
    for (std::size_t i = 0; i < n; ++i) v[0][i] = r[i] * ib;
    std::fill(g.begin(), g.end(), 0.0);
    g[0] = beta;
    int j = 0;
    bool stop = false;
    while (j < m && used < max_matvecs && !stop) {
      av(v[static_cast<std::size_t>(j)], w);
      ++used;
      for (int i = 0; i <= j; ++i) {
        const auto& vi = v[static_cast<std::size_t>(i)];
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += w[k] * vi[k];
        h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = dot;
        for (std::size_t k = 0; k < n; ++k) w[k] -= dot * vi[k];
      }
      // Second orthogonalization pass: difference-quotient products carry
      // enough noise that single MGS loses the basis at useful depths.
      for (int i = 0; i <= j; ++i) {
        const auto& vi = v[static_cast<std::size_t>(i)];
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += w[k] * vi[k];
        h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += dot;
        for (std::size_t k = 0; k < n; ++k) w[k] -= dot * vi[k];
      }
      double nw = 0.0;
      for (double t : w) nw += t * t;
      nw = std::sqrt(nw);
      h[static_cast<std::size_t>(j) + 1][static_cast<std::size_t>(j)] = nw;
      if (nw > 1e-290) {
        const double inw = 1.0 / nw;
        auto& vj1 = v[static_cast<std::size_t>(j) + 1];
        vj1.resize(n);
        for (std::size_t k = 0; k < n; ++k) vj1[k] = w[k] * inw;
      } else {
        stop = true;  // Krylov space exhausted; the least-squares solve below is exact in it
      }
      auto col = [&](int i) -> double& {
        return h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      };
      for (int i = 0; i < j; ++i) {
        const double t1 = cs[static_cast<std::size_t>(i)] * col(i) +
                          sn[static_cast<std::size_t>(i)] * col(i + 1);
        col(i + 1) = -sn[static_cast<std::size_t>(i)] * col(i) +
                     cs[static_cast<std::size_t>(i)] * col(i + 1);
        col(i) = t1;
      }
      const double denom = std::hypot(col(j), col(j + 1));
      if (denom > 0.0) {
        cs[static_cast<std::size_t>(j)] = col(j) / denom;
        sn[static_cast<std::size_t>(j)] = col(j + 1) / denom;
      } else {
        cs[static_cast<std::size_t>(j)] = 1.0;
        sn[static_cast<std::size_t>(j)] = 0.0;
      }
      col(j) = denom;
      col(j + 1) = 0.0;
      g[static_cast<std::size_t>(j) + 1] = -sn[static_cast<std::size_t>(j)] * g[static_cast<std::size_t>(j)];
      g[static_cast<std::size_t>(j)] = cs[static_cast<std::size_t>(j)] * g[static_cast<std::size_t>(j)];
      res = std::abs(g[static_cast<std::size_t>(j) + 1]);
      ++j;
      if (res <= target) stop = true;
    }
    // Rank-truncated back substitution: a tiny diagonal entry marks a
    // direction the operator barely reaches (the message parametrization has
    // exact gauge redundancy, so this happens); inverting it would blow the
    // step up along a null direction, so those components are dropped.
    double diag_max = 0.0;
    for (int i = 0; i < j; ++i)
      diag_max = std::max(diag_max,
                          std::abs(h[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)]));
    const double diag_floor = 1e-12 * diag_max;
    for (int i = j - 1; i >= 0; --i) {
      double acc = g[static_cast<std::size_t>(i)];
      for (int k = i + 1; k < j; ++k)
        acc -= h[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * y[static_cast<std::size_t>(k)];
      const double hii = h[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(i)] = std::abs(hii) > diag_floor ? acc / hii : 0.0;
    }
    for (int i = 0; i < j; ++i) {
      const double yi = y[static_cast<std::size_t>(i)];
      const auto& vi = v[static_cast<std::size_t>(i)];
      for (std::size_t k = 0; k < n; ++k) x[k] += yi * vi[k];
    }
    if (res <= target || used >= max_matvecs) return res;
  }
}

// BiCGSTAB on A x = b from x = 0; short recurrences, so the Krylov depth is
// bounded only by `max_matvecs`, at constant memory. Returns the recurrence
// residual 2-norm once at or below `target`, on breakdown, or out of budget.
template <class MatVec>
inline double bicgstab_solve(MatVec&& av, const std::vector<double>& b, std::vector<double>& x,
                             int max_matvecs, double target) {
  const std::size_t n = b.size();
  auto dot = [n](const std::vector<double>& u, const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += u[i] * v[i];
    return s;
  };
  x.assign(n, 0.0);
  std::vector<double> r = b;
  const std::vector<double> rhat = b;
  std::vector<double> p(n, 0.0), v(n, 0.0), s(n), t(n);
  double rho = 1.0, alpha = 1.0, omega = 1.0;
  double rn = std::sqrt(dot(r, r));
  const double bn = rn;
  int used = 0;
  while (rn > target && used + 2 <= max_matvecs) {
    const double rho1 = dot(rhat, r);
    if (!(std::abs(rho1) > 1e-290 * bn * bn)) break;
    const double beta = (rho1 / rho) * (alpha / omega);
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * (p[i] - omega * v[i]);
    av(p, v);
    ++used;
    const double rv = dot(rhat, v);
    if (!(std::abs(rv) > 1e-290 * bn * bn)) break;
    alpha = rho1 / rv;
    for (std::size_t i = 0; i < n; ++i) s[i] = r[i] - alpha * v[i];
    double sn = std::sqrt(dot(s, s));
    if (sn <= target) {
      for (std::size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
      return sn;
    }
    av(s, t);
    ++used;
    const double tt = dot(t, t);
    if (!(tt > 0.0)) break;
    omega = dot(t, s) / tt;
    if (!(std::abs(omega) > 1e-290)) break;
    for (std::size_t i = 0; i < n; ++i) x[i] += alpha * p[i] + omega * s[i];
    for (std::size_t i = 0; i < n; ++i) r[i] = s[i] - omega * t[i];
    rho = rho1;
    const double rn2 = std::sqrt(dot(r, r));
    if (!(rn2 < 1e12 * bn + 1e300)) break;  // NaN guard
    rn = rn2;
  }
  return rn;
}

struct NewtonReport {
  bool hit_tol = false;
  double resid_inf = 0.0;
  int evals = 0;  // sweep evaluations consumed
};

// Direct solve of sweep(m) = m by matrix-free inexact Newton iterations:
// residual G(m) = sweep(m) - m over the active tables, forward-difference
// Jacobian-vector products, restarted GMRES on each Newton system, and a
// backtracking line search that accepts a step only when the residual
// 2-norm drops by an Armijo margin and the max-norm does not grow (so the
// reported residual sequence is non-increasing by construction). Fully
// deterministic. `hook` fires once per sweep evaluation with the max-norm
// residual of the current iterate, so the caller can charge every sweep
// against its iteration budget; `max_evals` caps those evaluations.
// `eager` trades persistence for a cheap verdict: speculative starts (wrong
// basin more often than not) should stop on the first signs of crawling,
// while continuation stages near criticality legitimately spend hundreds of
// evaluations per step and must not be cut off mid-descent.
template <class Hook>
inline NewtonReport newton_refine(const GbpPlan& plan,
                                  const std::vector<std::vector<double>>& local,
                                  std::vector<std::vector<double>>& msgs, double tol,
                                  int max_evals, Hook&& hook, double forcing = 0.05,
                                  bool eager = true) {
  const FlatLayout lay = flat_layout(plan, msgs);
  NewtonReport rep;
  if (lay.dim == 0 || max_evals < 1) {
    rep.hit_tol = lay.dim == 0;
    return rep;
  }
  SweepWorkspace ws(plan);
  auto tin = msgs;
  auto tout = msgs;
  const std::size_t n = lay.dim;

  auto norm2 = [](const std::vector<double>& a) {
    double s = 0.0;
    for (double t : a) s += t * t;
    return std::sqrt(s);
  };
  auto norminf = [](const std::vector<double>& a) {
    double s = 0.0;
    for (double t : a) {
      const double at = std::abs(t);
      if (!(at <= s)) s = at;  // NaN poisons the norm instead of vanishing
    }
    return s;
  };
  auto normalize_flat = [&](std::vector<double>& x) {
    for (std::size_t k = 0; k + 1 < lay.offset.size(); ++k) {
      double* t = x.data() + lay.offset[k];
      const std::size_t len = lay.offset[k + 1] - lay.offset[k];
      const double lz = log_sum_exp(std::span<const double>(t, len));
      for (std::size_t i = 0; i < len; ++i) t[i] -= lz;
    }
  };
  auto apply_sweep = [&](const std::vector<double>& x, std::vector<double>& s) {
    unpack_active(plan, lay, x, tin);
    synchronous_sweep(plan, local, tin, tout, ws);
    pack_active(plan, lay, tout, s);
  };

  std::vector<double> xm(n), sm(n), gm(n), xc(n), sc(n), gc(n), b(n), dx(n);
  pack_active(plan, lay, msgs, xm);
  normalize_flat(xm);
  apply_sweep(xm, sm);
  for (std::size_t i = 0; i < n; ++i) gm[i] = sm[i] - xm[i];
  double cur_inf = norminf(gm);
  double cur_l2 = norm2(gm);
  int evals = 1;
  hook(cur_inf);

  bool tightened = false;
  int slow_outers = 0;
  int tiny_steps = 0;
  int capped_strikes = 0;
  // Inexact-Newton forcing, Eisenstat-Walker style: ask the inner solver for
  // little more accuracy than the outer convergence rate can exploit. The
  // `forcing` parameter is the floor the schedule may not relax below.
  double eta = std::max(forcing, 0.5);
  for (int outer = 0; outer < 200; ++outer) {
    if (cur_inf <= tol || evals >= max_evals) break;
    const double outer_l2 = cur_l2;

    const double fd_scale = 1.4901161193847656e-08 * (1.0 + norm2(xm));
    auto av = [&](const std::vector<double>& vv, std::vector<double>& out) {
      const double nv = norm2(vv);
      const double eps = nv > 0.0 ? fd_scale / nv : fd_scale;
      for (std::size_t i = 0; i < n; ++i) xc[i] = xm[i] + eps * vv[i];
      apply_sweep(xc, sc);
      ++evals;
      hook(cur_inf);
      const double inv = 1.0 / eps;
      for (std::size_t i = 0; i < n; ++i) out[i] = (sc[i] - sm[i]) * inv - vv[i];
    };

    for (std::size_t i = 0; i < n; ++i) b[i] = -gm[i];
    // Bigger state spaces need deeper Krylov spaces near criticality; the
    // basis memory (restart x dim doubles) stays modest at these sizes.
    const int restart = n > 40000 ? 100 : 60;
    const int base_cap = n > 40000 ? 300 : 160;
    const int inner_cap = std::min(max_evals - evals, tightened ? 2 * base_cap : base_cap);
    if (inner_cap < 1) break;
    const double gm_target = (tightened ? 0.1 * forcing : eta) * cur_l2;
    const double gm_res = gmres_solve(av, b, dx, restart, inner_cap, gm_target);
#ifdef GRIDRATE_NEWTON_DEBUG
    std::fprintf(stderr, "[newton] outer=%d l2=%.3e inf=%.3e target=%.3e achieved=%.3e dinf=%.3e\n",
                 outer, cur_l2, cur_inf, gm_target, gm_res, norminf(dx));
#endif

    const double dinf = norminf(dx);
    if (!(dinf > 0.0)) break;  // no usable direction (zero or NaN)
    if (dinf > 1e3)            // overflow guard only; the line search does the rest
      for (double& t : dx) t *= 1e3 / dinf;

    bool accepted = false;
    double t = 1.0;
    for (int ls = 0; ls < 10 && evals < max_evals; ++ls, t *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) xc[i] = xm[i] + t * dx[i];
      normalize_flat(xc);
      apply_sweep(xc, sc);
      for (std::size_t i = 0; i < n; ++i) gc[i] = sc[i] - xc[i];
      const double new_l2 = norm2(gc);
      const double new_inf = norminf(gc);
      const bool ok = new_l2 <= (1.0 - 1e-4 * t) * cur_l2 && new_inf <= cur_inf;
      if (ok) {
        xm.swap(xc);
        sm.swap(sc);
        gm.swap(gc);
        cur_l2 = new_l2;
        cur_inf = new_inf;
        unpack_active(plan, lay, xm, msgs);  // keep the caller's view current
      }
      ++evals;
      hook(cur_inf);
#ifdef GRIDRATE_NEWTON_DEBUG
      std::fprintf(stderr, "[newton]   ls t=%.3e l2=%.3e inf=%.3e %s\n", t, new_l2, new_inf,
                   ok ? "ACCEPT" : "reject");
#endif
      if (ok) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // A tighter inner solve is only worth one retry when the first one
      // narrowly missed; a wide miss means the system is inconsistent here
      // (wrong basin), which more Krylov iterations cannot repair.
      if (tightened || gm_res > 2.0 * gm_target) break;
      tightened = true;
    } else {
      // Forcing update: fast outer contraction licenses looser inner solves
      // (choice 2 with the usual safeguard against oscillation).
      const double ratio = cur_l2 / outer_l2;
      double eta_new = 0.9 * ratio * ratio;
      const double safeguard = 0.9 * eta * eta;
      if (safeguard > 0.1) eta_new = std::max(eta_new, safeguard);
      eta = std::clamp(eta_new, forcing, 0.5);
      if (tightened) eta = forcing;  // stay careful once loose solves failed
      tightened = false;
      // Crawling acceptances (little decrease, or only heavily shortened
      // steps) mean the model is bad here; an eager run fails fast so the
      // caller can approach from a different start instead of grinding the
      // budget. A patient run only gives up on near-total stagnation.
      if (cur_l2 > (eager ? 0.95 : 0.995) * outer_l2) {
        if (++slow_outers >= (eager ? 2 : 3)) break;
      } else {
        slow_outers = 0;
      }
      if (eager) {
        if (t < 0.02) {
          if (++tiny_steps >= 2) break;
        } else {
          tiny_steps = 0;
        }
        // An inner solve that exhausted its matvec budget and still only
        // bought a mediocre step is the expensive way to fail; two in a row
        // ends it.
        if (gm_res > gm_target && cur_l2 > 0.5 * outer_l2) {
          if (++capped_strikes >= 2) break;
        } else {
          capped_strikes = 0;
        }
      }
    }
  }

  rep.resid_inf = cur_inf;
  rep.hit_tol = cur_inf <= tol;
  rep.evals = evals;
  unpack_active(plan, lay, xm, msgs);
  return rep;
}

// Layered solve of sweep(m) = m at full factor strength. Strategies run in a
// fixed order, each deterministic and charged against the same budget:
//   - plain Newton from the incoming messages (the damped-sweep state is
//     usually already near the root when couplings are moderate);
//   - factor-strength continuation: tables scaled by beta walking 0 -> 1,
//     warm-starting each stage from the last. At beta=0 uniform messages are
//     an exact fixed point, and near a root the Newton systems stay
//     consistent, which a cold start far from one cannot guarantee. Stages
//     only need to park the next warm start inside its basin, so
//     intermediate tolerance is loose; the step halves after a failed stage
//     (restoring the last good solution) and doubles after successes.
//   - with strongly resolved evidence only (large local-table spread), Newton
//     from messages concentrated on the per-site argmax assignment: if the
//     root is itself concentrated, the weak-coupling branch may fold before
//     reaching it and this jumps past the fold. Mixed roots (the usual case
//     in the operating range: interference leaves many near-degenerate flip
//     patterns alive) make this a last resort, not a first guess.
// `hook` and `max_evals` as in newton_refine.
template <class Hook>
inline NewtonReport newton_continuation(const GbpPlan& plan,
                                        const std::vector<std::vector<double>>& local,
                                        std::vector<std::vector<double>>& msgs, double tol,
                                        int max_evals, Hook&& hook) {
  NewtonReport rep;
  // Per-region spread of the local tables (additive constants drop out of
  // messages and beliefs entirely) measures the coupling strength the solver
  // faces; it sets the first continuation stage and flags concentration.
  double spread = 0.0;
  for (const auto& t : local) {
    if (t.empty()) continue;
    const auto [mn, mx] = std::minmax_element(t.begin(), t.end());
    spread = std::max(spread, *mx - *mn);
  }
  int used = 0;

  auto try_concentrated = [&](int rounds) {
    auto dec = site_decisions(plan, local, msgs);
    icm_polish(plan, local, dec);
    double kappa = 3.0;
    for (int a = 0; a < rounds && used < max_evals; ++a, kappa *= 2.0) {
      auto trial = init_messages(*plan.graph, plan.q).tables;
      concentrated_messages(plan, dec, kappa, trial);
      auto r = newton_refine(plan, local, trial, tol, std::min(max_evals - used, 1200), hook);
      used += r.evals;
#ifdef GRIDRATE_NEWTON_DEBUG
      std::fprintf(stderr, "[conc] kappa=%.1f ok=%d evals=%d resid=%.3e used=%d\n", kappa,
                   r.hit_tol ? 1 : 0, r.evals, r.resid_inf, used);
#endif
      if (r.hit_tol) {
        msgs = std::move(trial);
        rep = r;
        return true;
      }
    }
    return false;
  };

  std::size_t dim = 0;
  for (const std::uint32_t ei : plan.active_edges) dim += plan.region_states[plan.edges[ei].child];
  rep = newton_refine(plan, local, msgs, tol,
                      std::min(max_evals - used, dim > 40000 ? 300 : 600), hook);
  used += rep.evals;
#ifdef GRIDRATE_NEWTON_DEBUG
  std::fprintf(stderr, "[direct] ok=%d evals=%d resid=%.3e used=%d\n", rep.hit_tol ? 1 : 0,
               rep.evals, rep.resid_inf, used);
#endif
  if (rep.hit_tol) {
    rep.evals = used;
    return rep;
  }

  auto scaled = local;
  msgs = init_messages(*plan.graph, plan.q).tables;
  auto saved = msgs;  // solution of the last completed stage
  // One stage may not eat the whole budget (a halved retry must stay
  // possible), but stages near the critical coupling honestly need room.
  const int stage_cap = dim > 40000 ? 3000 : 2000;
  const double dbeta_cap = 0.5;
  double dbeta = spread > 6.0 ? std::max(3.0 / spread, 1.0 / 256.0) : 0.5;
  double beta_done = 0.0;
  int stage_failures = 0;
  double last_final_resid = std::numeric_limits<double>::infinity();
  while (used < max_evals) {
    const double beta = std::min(1.0, beta_done + dbeta);
    for (std::size_t r = 0; r < local.size(); ++r)
      for (std::size_t s = 0; s < local[r].size(); ++s) scaled[r][s] = beta * local[r][s];
    const bool final_stage = beta == 1.0;
    const double stage_tol = final_stage ? tol : std::max(tol, 1e-3);
    rep = newton_refine(plan, scaled, msgs, stage_tol, std::min(max_evals - used, stage_cap),
                        hook, final_stage ? 0.05 : 0.15, /*eager=*/false);
    used += rep.evals;
#ifdef GRIDRATE_NEWTON_DEBUG
    std::fprintf(stderr, "[stage] beta=%.6f ok=%d evals=%d resid=%.3e used=%d\n", beta,
                 rep.hit_tol ? 1 : 0, rep.evals, rep.resid_inf, used);
#endif
    rep.evals = used;
    if (rep.hit_tol) {
      if (beta == 1.0) return rep;
      beta_done = beta;
      saved = msgs;
      dbeta = std::min(dbeta_cap, dbeta * 2.0);
      stage_failures = 0;
    } else if (final_stage && rep.resid_inf < 0.5 * last_final_resid) {
      // The full-strength stage ran out of room while still descending.
      // Its iterate is strictly better than the warm start (the line search
      // only accepts descent), so resuming beats retreating to an
      // intermediate beta that must re-cover the same ground.
      last_final_resid = rep.resid_inf;
    } else {
      msgs = saved;
      // Halve the step; when the failed stage was the capped endpoint, halve
      // the remaining gap instead, or the retry recreates the identical
      // stage and the budget burns twice for one verdict.
      dbeta = std::min(dbeta, 1.0 - beta_done) * 0.5;
      // Step halving cannot cross a fold in the solution branch; repeated
      // failures hand over to the concentrated restart instead.
      if (++stage_failures >= 3 || dbeta < 1.0 / 1024.0) break;
    }
  }

  if (spread > 80.0 && used < max_evals && try_concentrated(2)) {
    rep.evals = used;
    return rep;
  }

  rep.hit_tol = false;
  rep.evals = used;
  if (used < max_evals) {
    // One plain evaluation so the reported residual describes the returned
    // messages under the true tables, not the last failed stage attempt.
    auto probe = newton_refine(plan, local, msgs, tol, 1, hook);
    rep.resid_inf = probe.resid_inf;
    rep.hit_tol = probe.hit_tol;
    rep.evals = used + probe.evals;
  }
  return rep;
}

}  // namespace detail

struct GbpResult {
  MessageSet messages;
  FreeEnergyEstimate estimate;
  RegionBeliefs beliefs;
};

// Damped synchronous parent-to-child sweeps until the largest log-message
// change both drops to tolerance and has stopped bouncing (non-increasing
// over the trailing ten sweeps); non-convergence is reported, never thrown.
//
// Sweeping alone does not always get there: on the window-3 lattice family
// the sweep map linearized at its own fixed point acquires a real eigenvalue
// beyond +1 once the grid exceeds 4x4 (measured ~2.7 at zero coupling, any
// schedule), so no damping in [0,1) can make iteration converge even though
// the fixed point itself is fine. When the residual grows or stalls, the
// run hands the same equations sweep(m) = m to a deterministic Newton-Krylov
// solver (seeded from the stalled state, a concentrated guess, or a
// factor-strength continuation; see newton_continuation); every inner sweep
// evaluation is charged against max_iters, and the reported residual stays
// the max absolute log-message change of one undamped sweep, so converged
// keeps its meaning: the returned messages are a fixed point to tolerance.
inline GbpResult run_gbp(const GbpPlan& plan, const FactorGraph& fg,
                         const LogConstantLedger& ledger, const GbpConfig& cfg = {}) {
  if (cfg.damping < 0.0 || cfg.damping >= 1.0)
    throw std::invalid_argument("run_gbp: damping must lie in [0,1)");
  if (!(cfg.tolerance > 0.0)) throw std::invalid_argument("run_gbp: tolerance must be > 0");
  if (cfg.max_iters < 1) throw std::invalid_argument("run_gbp: max_iters must be >= 1");

  const auto local = detail::region_local_tables(plan, fg);
  auto msgs = init_messages(*plan.graph, plan.q).tables;
  auto upd = msgs;
  detail::SweepWorkspace ws(plan);

  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(cfg.max_iters));

  auto tail_non_increasing = [&history]() {
    const std::size_t k = std::min<std::size_t>(history.size(), 10);
    for (std::size_t i = history.size() - k; i + 1 < history.size(); ++i)
      if (history[i] < history[i + 1]) return false;
    return true;
  };
  auto trace_row = [&](int it, double resid) {
    if (!cfg.trace) return;
    const auto b = detail::beliefs_from_messages(plan, local, msgs);
    const double fk = detail::kikuchi_from_beliefs(plan, local, b);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g", it, resid, fk);
    *cfg.trace << buf << '\n';
  };

  bool converged = false;
  bool unstable = false;
  int iters = 0;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    detail::synchronous_sweep(plan, local, msgs, upd, ws);
    double resid = 0.0;
    for (const std::uint32_t ei : plan.active_edges) {
      auto& nm = upd[ei];
      const auto& om = msgs[ei];
      const std::size_t nc = om.size();
      for (std::size_t c = 0; c < nc; ++c)
        nm[c] = cfg.damping * om[c] + (1.0 - cfg.damping) * nm[c];
      const double lz = log_sum_exp(std::span<const double>(nm.data(), nc));
      for (std::size_t c = 0; c < nc; ++c) {
        nm[c] -= lz;
        // Written so a NaN difference poisons the residual instead of being
        // silently dropped by max(); overflow then reads as non-convergence.
        const double diff = std::abs(nm[c] - om[c]);
        if (!(diff <= resid)) resid = diff;
      }
    }
    msgs.swap(upd);
    history.push_back(resid);
    iters = it;
    trace_row(it, resid);
    if (resid <= cfg.tolerance && tail_non_increasing()) {
      converged = true;
      break;
    }
    // Instability guard: residual blowing up, or refusing to decay over 10
    // sweeps while still far from tolerance. Damping cannot fix either.
    if (!(resid < 1e8) ||
        (it >= 20 && resid > std::max(1e3 * cfg.tolerance, 1e-6) &&
         resid > 0.9 * history[history.size() - 11])) {
      unstable = true;
      break;
    }
  }

  if (unstable && iters < cfg.max_iters) {
    // The stalled damped state is usually a good start (the guard fires
    // before the unstable mode dominates); a blown-up one is useless.
    if (!(history.back() < 1e8)) msgs = init_messages(*plan.graph, plan.q).tables;
    const auto rep = detail::newton_continuation(plan, local, msgs, cfg.tolerance,
                                                 cfg.max_iters - iters, [&](double resid_inf) {
                                                   ++iters;
                                                   history.push_back(resid_inf);
                                                   trace_row(iters, resid_inf);
                                                 });
    converged = rep.hit_tol && tail_non_increasing();
  }

  GbpResult out;
  out.messages.tables = std::move(msgs);
  const auto b = detail::beliefs_from_messages(plan, local, out.messages.tables);
  const double fk = detail::kikuchi_from_beliefs(plan, local, b);
  out.beliefs.tables = b;
  out.estimate.minus_log_z = fk - ledger.total;
  out.estimate.per_symbol = out.estimate.minus_log_z / static_cast<double>(plan.n_vars);
  out.estimate.converged = converged;
  out.estimate.iterations = iters;
  out.estimate.max_residual = history.empty() ? 0.0 : history.back();
  return out;
}

inline GbpResult run_gbp(const RegionGraph& g, const FactorGraph& fg,
                         const LogConstantLedger& ledger, const GbpConfig& cfg = {}) {
  return run_gbp(make_gbp_plan(g, fg), fg, ledger, cfg);
}

inline RegionBeliefs region_beliefs(const GbpPlan& plan, const FactorGraph& fg,
                                    const MessageSet& messages) {
  RegionBeliefs rb;
  rb.tables = detail::beliefs_from_messages(plan, detail::region_local_tables(plan, fg),
                                            messages.tables);
  return rb;
}

inline RegionBeliefs region_beliefs(const RegionGraph& g, const FactorGraph& fg,
                                    const MessageSet& messages) {
  return region_beliefs(make_gbp_plan(g, fg), fg, messages);
}

// Standalone Kikuchi functional of given beliefs; returns the approximation
// of -ln of the normalized-factor partition sum (caller reconciles ledger).
inline double kikuchi_free_energy(const RegionGraph& g, const FactorGraph& fg,
                                  const RegionBeliefs& beliefs) {
  if (beliefs.tables.size() != g.regions.size())
    throw std::invalid_argument("kikuchi_free_energy: belief/region count mismatch");
  const GbpPlan plan = make_gbp_plan(g, fg);
  const auto local = detail::region_local_tables(plan, fg);
  for (std::size_t r = 0; r < beliefs.tables.size(); ++r) {
    double sum = 0.0;
    for (double p : beliefs.tables[r]) {
      if (p < 0.0) throw std::invalid_argument("kikuchi_free_energy: negative belief entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-8)
      throw std::invalid_argument("kikuchi_free_energy: belief table not normalized");
  }
  return detail::kikuchi_from_beliefs(plan, local, beliefs.tables);
}

}  // namespace gridrate
