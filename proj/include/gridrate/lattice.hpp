#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gridrate {

// Thrown when an engine's size/structure guard rejects a request (as opposed
// to a malformed argument, which throws std::invalid_argument).
class GuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Topology { isi4, hex6 };

inline const char* topology_name(Topology t) {
  return t == Topology::isi4 ? "isi4" : "hex6";
}

inline Topology parse_topology(const std::string& s) {
  if (s == "isi4" || s == "isi" || s == "ISI4") return Topology::isi4;
  if (s == "hex6" || s == "hex" || s == "HEX6") return Topology::hex6;
  throw std::invalid_argument("unknown topology '" + s + "' (expected isi4 or hex6)");
}

struct Offset {
  int dr;
  int dc;
};

// Interfering-neighbour displacements, in a fixed order. isi4 is the
// 4-neighbour von Neumann set; hex6 embeds the hexagonal lattice on the
// square grid with the (+1,-1)/(-1,+1) diagonals.
inline std::vector<Offset> neighbor_offsets(Topology t) {
  std::vector<Offset> offs = {{-1, 0}, {+1, 0}, {0, -1}, {0, +1}};
  if (t == Topology::hex6) {
    offs.push_back({+1, -1});
    offs.push_back({-1, +1});
  }
  return offs;
}

struct LatticeSpec {
  Topology topology = Topology::isi4;
  int size_n = 0;       // lattice is size_n x size_n
  double alpha = 0.0;   // interference attenuation, |alpha| <= 1

  void validate() const {
    if (size_n < 3)
      throw std::invalid_argument("lattice size must satisfy N >= 3 (got N=" +
                                  std::to_string(size_n) + ")");
    if (!(std::abs(alpha) <= 1.0))
      throw std::invalid_argument("attenuation must satisfy |alpha| <= 1");
  }

  std::uint32_t num_sites() const {
    return static_cast<std::uint32_t>(size_n) * static_cast<std::uint32_t>(size_n);
  }
};

// Sparse N^2 x N^2 interference operator. Row k holds coefficient 1 at k and
// alpha at each in-lattice neighbour of site k (raster order, row-major).
struct InterferenceMatrix {
  std::uint32_t n_vars = 0;
  int size_n = 0;
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows;

  std::vector<double> multiply(const std::vector<double>& x) const {
    if (x.size() != n_vars) throw std::invalid_argument("interference multiply: dimension mismatch");
    std::vector<double> y(n_vars, 0.0);
    for (std::uint32_t k = 0; k < n_vars; ++k)
      for (const auto& [j, a] : rows[k]) y[k] += a * x[j];
    return y;
  }

  std::vector<double> multiply_transpose(const std::vector<double>& x) const {
    if (x.size() != n_vars) throw std::invalid_argument("interference multiply: dimension mismatch");
    std::vector<double> y(n_vars, 0.0);
    for (std::uint32_t k = 0; k < n_vars; ++k)
      for (const auto& [j, a] : rows[k]) y[j] += a * x[k];
    return y;
  }
};

inline InterferenceMatrix build_interference_matrix(const LatticeSpec& spec) {
  spec.validate();
  const int n = spec.size_n;
  const auto offs = neighbor_offsets(spec.topology);

  InterferenceMatrix s;
  s.n_vars = spec.num_sites();
  s.size_n = n;
  s.rows.resize(s.n_vars);

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      auto& row = s.rows[static_cast<std::uint32_t>(r * n + c)];
      row.emplace_back(static_cast<std::uint32_t>(r * n + c), 1.0);
      if (spec.alpha != 0.0) {
        for (const auto& o : offs) {
          const int rr = r + o.dr, cc = c + o.dc;
          if (rr < 0 || rr >= n || cc < 0 || cc >= n) continue;  // open boundary
          row.emplace_back(static_cast<std::uint32_t>(rr * n + cc), spec.alpha);
        }
      }
      // Every row support must fit a 3x3 lattice window; the region
      // construction depends on it.
      int rmin = r, rmax = r, cmin = c, cmax = c;
      for (const auto& [j, a] : row) {
        (void)a;
        const int jr = static_cast<int>(j) / n, jc = static_cast<int>(j) % n;
        rmin = std::min(rmin, jr); rmax = std::max(rmax, jr);
        cmin = std::min(cmin, jc); cmax = std::max(cmax, jc);
      }
      if (rmax - rmin > 2 || cmax - cmin > 2)
        throw std::logic_error("interference row support exceeds a 3x3 window");
    }
  }
  return s;
}

// SNR (dB) -> noise variance under the unit-symbol-energy convention
// snr = 1/sigma^2. Recorded alongside every output so alternative
// conventions can be recomputed.
inline double snr_to_sigma2(double snr_db) {
  return std::pow(10.0, -snr_db / 10.0);
}

inline double sigma2_to_snr_db(double sigma2) {
  const double db = -10.0 * std::log10(sigma2);
  return db == 0.0 ? 0.0 : db;  // never report "-0" dB
}

}  // namespace gridrate
