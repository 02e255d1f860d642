#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gridrate/factor_graph.hpp"

namespace gridrate {

struct UncoveredFactorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Region identity is its variable set; everything else is derived from it.
struct Region {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> var_set;  // sorted ascending
  int counting_number = 0;
  bool is_outer = false;
  std::vector<std::uint32_t> factor_ids;  // factors whose scope fits in var_set
  std::vector<std::uint32_t> parents;     // Hasse covers (immediate supersets)
  std::vector<std::uint32_t> children;    // Hasse covered (immediate subsets)
};

struct RegionGraph {
  std::vector<Region> regions;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // (parent, child)

  const Region& region(std::uint32_t id) const { return regions[id]; }
};

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> problems;

  void fail(std::string msg) {
    ok = false;
    problems.push_back(std::move(msg));
  }
};

namespace detail {

inline bool strict_subset(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  // a strictly inside b; both sorted.
  return a.size() < b.size() && std::includes(b.begin(), b.end(), a.begin(), a.end());
}

inline bool subset(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  return a.size() <= b.size() && std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace detail

// All window x window blocks of the N x N raster grid, stride 1.
inline std::vector<std::vector<std::uint32_t>> generate_outer_regions(int size_n, int window) {
  if (size_n < 3) throw std::invalid_argument("generate_outer_regions: size_n must be >= 3");
  if (window < 2 || window > size_n)
    throw std::invalid_argument("generate_outer_regions: window must be in [2, size_n]");
  std::vector<std::vector<std::uint32_t>> outers;
  const int span = size_n - window + 1;
  outers.reserve(static_cast<std::size_t>(span) * span);
  for (int r0 = 0; r0 < span; ++r0)
    for (int c0 = 0; c0 < span; ++c0) {
      std::vector<std::uint32_t> vars;
      vars.reserve(static_cast<std::size_t>(window) * window);
      for (int dr = 0; dr < window; ++dr)
        for (int dc = 0; dc < window; ++dc)
          vars.push_back(static_cast<std::uint32_t>((r0 + dr) * size_n + (c0 + dc)));
      std::sort(vars.begin(), vars.end());
      outers.push_back(std::move(vars));
    }
  return outers;
}

// Smallest family containing the outer sets and closed under pairwise
// intersection. Empty intersections are dropped.
inline std::vector<std::vector<std::uint32_t>> close_under_intersection(
    std::vector<std::vector<std::uint32_t>> sets) {
  std::map<std::vector<std::uint32_t>, bool> seen;
  for (const auto& s : sets) seen[s] = true;
  // Worklist over unordered pairs; new sets re-enter the pairing.
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      std::vector<std::uint32_t> inter;
      std::set_intersection(sets[i].begin(), sets[i].end(), sets[j].begin(), sets[j].end(),
                            std::back_inserter(inter));
      if (inter.empty()) continue;
      if (seen.emplace(inter, true).second) sets.push_back(std::move(inter));
    }
  }
  return sets;
}

// Builds the full region graph for a grid: outer windows, intersection
// closure, Hasse (immediate strict-subset) edges, and counting numbers
// c_R = 1 - sum over strict supersets. Regions are numbered outer-first,
// then by decreasing size, so every edge has parent id < child id.
inline RegionGraph build_region_graph(int size_n, int window = 3) {
  auto sets = generate_outer_regions(size_n, window);
  const std::size_t n_outer = sets.size();
  auto closed = close_under_intersection(sets);

  std::vector<std::vector<std::uint32_t>> inner(closed.begin() + static_cast<std::ptrdiff_t>(n_outer),
                                                closed.end());
  std::sort(inner.begin(), inner.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a < b;
  });

  RegionGraph g;
  g.regions.reserve(closed.size());
  for (std::size_t i = 0; i < n_outer; ++i) {
    Region r;
    r.id = static_cast<std::uint32_t>(g.regions.size());
    r.var_set = std::move(closed[i]);
    r.is_outer = true;
    g.regions.push_back(std::move(r));
  }
  for (auto& vs : inner) {
    Region r;
    r.id = static_cast<std::uint32_t>(g.regions.size());
    r.var_set = std::move(vs);
    g.regions.push_back(std::move(r));
  }

  const std::size_t n = g.regions.size();
  // supersets[i] = ids of regions strictly containing region i.
  std::vector<std::vector<std::uint32_t>> supersets(n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (a != b && detail::strict_subset(g.regions[b].var_set, g.regions[a].var_set))
        supersets[b].push_back(static_cast<std::uint32_t>(a));

  // Hasse edge a -> b iff b subset a with nothing in between.
  for (std::uint32_t b = 0; b < n; ++b) {
    for (std::uint32_t a : supersets[b]) {
      bool immediate = true;
      for (std::uint32_t c : supersets[b]) {
        if (c == a) continue;
        if (detail::strict_subset(g.regions[c].var_set, g.regions[a].var_set)) {
          immediate = false;
          break;
        }
      }
      if (immediate) {
        g.edges.emplace_back(a, b);
        g.regions[a].children.push_back(b);
        g.regions[b].parents.push_back(a);
      }
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  for (auto& r : g.regions) {
    std::sort(r.parents.begin(), r.parents.end());
    std::sort(r.children.begin(), r.children.end());
  }

  // Counting numbers, top-down. Ids already decrease in size, so a plain
  // id-order pass sees every superset before its subsets.
  for (std::uint32_t i = 0; i < n; ++i) {
    int c = 1;
    for (std::uint32_t a : supersets[i]) c -= g.regions[a].counting_number;
    g.regions[i].counting_number = c;
  }
  return g;
}

// Attaches each factor to every region whose variable set contains its scope.
// A factor no outer region can host makes the approximation unsound, so that
// is an error, not a warning.
inline void assign_factors(RegionGraph& g, const FactorGraph& fg) {
  for (auto& r : g.regions) r.factor_ids.clear();
  for (const auto& f : fg.factors) {
    bool outer_hit = false;
    for (auto& r : g.regions) {
      if (detail::subset(f.scope, r.var_set)) {
        r.factor_ids.push_back(f.id);
        outer_hit = outer_hit || r.is_outer;
      }
    }
    if (!outer_hit) {
      std::string scope;
      for (std::size_t i = 0; i < f.scope.size(); ++i) {
        if (i) scope += ',';
        scope += std::to_string(f.scope[i]);
      }
      throw UncoveredFactorError("factor " + std::to_string(f.id) + " scope=" + scope +
                                 " not contained in any outer region");
    }
  }
}

// Structural sanity: edges are immediate strict subsets, counting numbers sum
// to one over the regions containing any given variable or factor scope, and
// factor assignment matches containment.
inline ValidationReport validate_region_graph(const RegionGraph& g, const FactorGraph& fg) {
  ValidationReport rep;

  for (const auto& [p, c] : g.edges) {
    if (!detail::strict_subset(g.regions[c].var_set, g.regions[p].var_set))
      rep.fail("edge " + std::to_string(p) + "->" + std::to_string(c) + " is not a strict subset");
    for (const auto& mid : g.regions) {
      if (mid.id == p || mid.id == c) continue;
      if (detail::strict_subset(g.regions[c].var_set, mid.var_set) &&
          detail::strict_subset(mid.var_set, g.regions[p].var_set))
        rep.fail("edge " + std::to_string(p) + "->" + std::to_string(c) + " skips region " +
                 std::to_string(mid.id));
    }
  }

  std::map<std::uint32_t, int> var_sum;
  for (const auto& r : g.regions)
    for (std::uint32_t v : r.var_set) var_sum[v] += r.counting_number;
  for (const auto& [v, s] : var_sum)
    if (s != 1) rep.fail("variable " + std::to_string(v) + " counting sum " + std::to_string(s));

  for (const auto& f : fg.factors) {
    int s = 0;
    for (const auto& r : g.regions) {
      const bool contains = detail::subset(f.scope, r.var_set);
      const bool assigned =
          std::find(r.factor_ids.begin(), r.factor_ids.end(), f.id) != r.factor_ids.end();
      if (contains != assigned)
        rep.fail("factor " + std::to_string(f.id) + " assignment mismatch at region " +
                 std::to_string(r.id));
      if (contains) s += r.counting_number;
    }
    if (s != 1) rep.fail("factor " + std::to_string(f.id) + " counting sum " + std::to_string(s));
  }
  return rep;
}

}  // namespace gridrate
