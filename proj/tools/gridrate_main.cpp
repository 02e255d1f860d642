// gridrate: Monte-Carlo information-rate estimation for 2-D interference
// channels. Subcommands: rate (one configuration), sweep (alpha or SNR grid),
// validate (message passing vs exact strip DP), regions (region-graph
// inspection).
//
// Exit codes: 0 success, 1 validation threshold exceeded, 2 usage error,
// 3 size-guard violation.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gridrate/gridrate.hpp"

namespace {

using nlohmann::json;

struct CommonConfig {
  std::string topology = "isi4";
  int size_n = 8;
  double alpha = 0.5;
  double snr_db = 0.0;
  int trials = 100;
  std::uint64_t master_seed = 1;
  std::string engine = "gbp";
  int window = 3;
  double damping = 0.5;
  double tolerance = 1e-8;
  int max_iters = 2000;
  std::string prior = "binary";
  int threads = 1;
  std::string output;  // empty = stdout
  std::string format = "csv";
  std::string config_path;
};

// Flags override the JSON config file: a key is consulted only when its flag
// was not given on the command line.
struct ConfigFile {
  json data;
  bool loaded = false;

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
    in >> data;
    if (!data.is_object()) throw std::invalid_argument("config file must hold a JSON object");
    loaded = true;
  }

  template <typename T>
  void pull(const CLI::Option* opt, const char* key, T& target) const {
    if (!loaded || opt->count() > 0) return;
    const auto it = data.find(key);
    if (it != data.end()) target = it->get<T>();
  }
};

struct CommonOpts {
  CLI::Option* topology;
  CLI::Option* size_n;
  CLI::Option* alpha;
  CLI::Option* snr_db;
  CLI::Option* trials;
  CLI::Option* seed;
  CLI::Option* engine;
  CLI::Option* window;
  CLI::Option* damping;
  CLI::Option* tolerance;
  CLI::Option* max_iters;
  CLI::Option* prior;
  CLI::Option* threads;
  CLI::Option* output;
  CLI::Option* format;
};

CommonOpts add_common_options(CLI::App* cmd, CommonConfig& c, bool with_snr) {
  CommonOpts o{};
  o.topology = cmd->add_option("--topology", c.topology, "Lattice topology: isi4 or hex6");
  o.size_n = cmd->add_option("--size", c.size_n, "Lattice side length N (N >= 3)");
  o.alpha = cmd->add_option("--alpha", c.alpha, "Interference coefficient, |alpha| <= 1");
  o.snr_db = with_snr ? cmd->add_option("--snr-db", c.snr_db, "SNR in dB (sigma^2 = 10^(-snr/10))")
                      : nullptr;
  o.trials = cmd->add_option("--trials", c.trials, "Monte-Carlo realizations per point");
  o.seed = cmd->add_option("--seed", c.master_seed,
                           "Master seed; trial t derives its stream from mix(seed, t)");
  o.engine = cmd->add_option("--engine", c.engine, "gbp, brute, or strip");
  o.window = cmd->add_option("--window", c.window, "Outer-region window size (default 3)");
  o.damping = cmd->add_option("--damping", c.damping, "Message damping in [0,1)");
  o.tolerance = cmd->add_option("--tolerance", c.tolerance, "Convergence tolerance");
  o.max_iters = cmd->add_option("--max-iters", c.max_iters, "Sweep limit per run");
  o.prior = cmd->add_option("--prior", c.prior,
                            "Input prior: binary, binomialK, or 'v:p;v:p;...'");
  o.threads = cmd->add_option("--threads", c.threads, "Worker threads across trials");
  o.output = cmd->add_option("--output", c.output,
                             "Output file (default stdout; relative paths land in "
                             "$GRIDRATE_OUT_DIR when set)");
  o.format = cmd->add_option("--format", c.format, "csv or json");
  cmd->add_option("--config", c.config_path, "JSON config file; flags take precedence");
  return o;
}

void merge_common(const ConfigFile& cf, const CommonOpts& o, CommonConfig& c, bool with_snr) {
  cf.pull(o.topology, "topology", c.topology);
  cf.pull(o.size_n, "size_n", c.size_n);
  cf.pull(o.alpha, "alpha", c.alpha);
  if (with_snr) cf.pull(o.snr_db, "snr_db", c.snr_db);
  cf.pull(o.trials, "trials", c.trials);
  cf.pull(o.seed, "master_seed", c.master_seed);
  cf.pull(o.engine, "engine", c.engine);
  cf.pull(o.window, "window", c.window);
  cf.pull(o.damping, "damping", c.damping);
  cf.pull(o.tolerance, "tolerance", c.tolerance);
  cf.pull(o.max_iters, "max_iters", c.max_iters);
  cf.pull(o.prior, "prior", c.prior);
  cf.pull(o.threads, "threads", c.threads);
  cf.pull(o.output, "output", c.output);
  cf.pull(o.format, "format", c.format);
}

std::string resolve_output_path(const std::string& path) {
  if (path.empty() || path.front() == '/') return path;
  const char* dir = std::getenv("GRIDRATE_OUT_DIR");
  if (dir == nullptr || *dir == '\0') return path;
  std::string full = dir;
  if (full.back() != '/') full += '/';
  return full + path;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  const std::string full = resolve_output_path(path);
  std::ofstream out(full, std::ios::binary | std::ios::trunc);
  if (!out) throw std::invalid_argument("cannot open output file '" + full + "'");
  out << text;
}

std::string render_rows(const std::vector<gridrate::RateEstimate>& rows, const std::string& format) {
  if (format == "csv") {
    std::string text = gridrate::csv_header() + "\n";
    for (const auto& r : rows) text += gridrate::csv_row(r) + "\n";
    return text;
  }
  if (format == "json") return gridrate::to_json(rows).dump(2) + "\n";
  throw std::invalid_argument("unknown format '" + format + "' (expected csv or json)");
}

gridrate::EstimatorOptions make_options(const CommonConfig& c) {
  gridrate::EstimatorOptions opts;
  opts.engine = gridrate::parse_engine(c.engine);
  opts.window = c.window;
  opts.gbp.damping = c.damping;
  opts.gbp.tolerance = c.tolerance;
  opts.gbp.max_iters = c.max_iters;
  opts.threads = c.threads;
  if (c.trials < 1) throw std::invalid_argument("--trials must be >= 1");
  if (c.threads < 1) throw std::invalid_argument("--threads must be >= 1");
  return opts;
}

int cmd_rate(const CommonConfig& c) {
  const gridrate::LatticeSpec spec{gridrate::parse_topology(c.topology), c.size_n, c.alpha};
  spec.validate();
  const auto prior = gridrate::parse_prior(c.prior);
  const auto est = gridrate::monte_carlo_sir(spec, gridrate::snr_to_sigma2(c.snr_db), prior,
                                             c.trials, c.master_seed, make_options(c));
  write_text(c.output, render_rows({est}, c.format));
  return 0;
}

int cmd_sweep(const CommonConfig& c, const std::vector<double>& alpha_grid,
              const std::vector<double>& snr_grid) {
  if (alpha_grid.empty() == snr_grid.empty())
    throw std::invalid_argument("sweep needs exactly one of --alpha-grid or --snr-grid");
  const auto& grid = alpha_grid.empty() ? snr_grid : alpha_grid;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i - 1] < grid[i]))
      throw std::invalid_argument("sweep grid must be strictly increasing");

  const auto prior = gridrate::parse_prior(c.prior);
  const auto opts = make_options(c);
  std::vector<gridrate::RateEstimate> rows;
  for (const double g : grid) {
    gridrate::LatticeSpec spec{gridrate::parse_topology(c.topology), c.size_n,
                               alpha_grid.empty() ? c.alpha : g};
    spec.validate();
    const double sigma2 = gridrate::snr_to_sigma2(alpha_grid.empty() ? g : c.snr_db);
    // Same master seed at every grid point: trial t sees the same symbols and
    // unit noise across the grid, so curves move only through the channel.
    rows.push_back(gridrate::monte_carlo_sir(spec, sigma2, prior, c.trials, c.master_seed, opts));
  }
  write_text(c.output, render_rows(rows, c.format));
  return 0;
}

int cmd_validate(const CommonConfig& c, int n_min, int n_max, double threshold_pct) {
  const auto topology = gridrate::parse_topology(c.topology);
  if (n_min < 3) throw std::invalid_argument("--n-min must be >= 3");
  if (n_max < n_min) throw std::invalid_argument("--n-max must be >= --n-min");
  const auto prior = gridrate::parse_prior(c.prior);
  const int frontier = 2 * n_max + 1;
  if (frontier * std::log2(static_cast<double>(std::max<std::size_t>(
          2, prior.alphabet.size()))) > 25.0)
    throw gridrate::GuardError("validate: N=" + std::to_string(n_max) +
                               " exceeds the strip-DP frontier budget (2^25 states)");

  gridrate::GbpConfig gbp;
  gbp.damping = c.damping;
  gbp.tolerance = c.tolerance;
  gbp.max_iters = c.max_iters;
  const auto rows =
      gridrate::rms_error_vs_exact(topology, c.alpha, gridrate::snr_to_sigma2(c.snr_db), prior,
                                   n_min, n_max, c.trials, c.master_seed, c.window, gbp);

  bool ok = true;
  std::string text;
  if (c.format == "json") {
    json arr = json::array();
    for (const auto& r : rows) {
      arr.push_back({{"size_n", r.size_n}, {"rms_percent", r.rms_percent}, {"trials", r.trials}});
      ok = ok && r.rms_percent <= threshold_pct;
    }
    text = arr.dump(2) + "\n";
  } else if (c.format == "csv") {
    text = "size_n,rms_percent,trials\n";
    for (const auto& r : rows) {
      text += std::to_string(r.size_n) + ',' + gridrate::format_double(r.rms_percent) + ',' +
              std::to_string(r.trials) + "\n";
      ok = ok && r.rms_percent <= threshold_pct;
    }
  } else {
    throw std::invalid_argument("unknown format '" + c.format + "'");
  }
  write_text(c.output, text);
  return ok ? 0 : 1;
}

int cmd_regions(const CommonConfig& c, bool dump) {
  const gridrate::LatticeSpec spec{gridrate::parse_topology(c.topology), c.size_n, c.alpha};
  spec.validate();
  const auto s = gridrate::build_interference_matrix(spec);
  auto graph = gridrate::build_region_graph(c.size_n, c.window);
  const auto prior = gridrate::parse_prior(c.prior);
  auto [fg, ledger] =
      gridrate::build_factor_graph(s, std::vector<double>(s.n_vars, 0.0), 1.0, prior);
  gridrate::assign_factors(graph, fg);
  const auto report = gridrate::validate_region_graph(graph, fg);

  std::string text;
  std::map<std::size_t, int> by_size;
  int outer = 0;
  for (const auto& r : graph.regions) {
    ++by_size[r.var_set.size()];
    outer += r.is_outer ? 1 : 0;
  }
  text += "regions " + std::to_string(graph.regions.size()) + " (outer " + std::to_string(outer) +
          "), edges " + std::to_string(graph.edges.size()) + "\n";
  for (const auto& [sz, count] : by_size)
    text += "  size " + std::to_string(sz) + ": " + std::to_string(count) + " regions\n";
  if (dump) {
    for (const auto& r : graph.regions) {
      text += "region " + std::to_string(r.id) + " c=" + std::to_string(r.counting_number) +
              (r.is_outer ? " outer" : "") + " vars=";
      for (std::size_t i = 0; i < r.var_set.size(); ++i)
        text += (i ? "," : "") + std::to_string(r.var_set[i]);
      text += "\n";
    }
  }
  text += report.ok ? "validation ok\n" : "validation FAILED\n";
  for (const auto& p : report.problems) text += "  " + p + "\n";
  write_text(c.output, text);
  return report.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Information-rate estimation for 2-D interference channels"};
  app.require_subcommand(1);

  CommonConfig c;
  std::vector<double> alpha_grid, snr_grid;
  int n_min = 4, n_max = 8;
  double threshold_pct = 1e-2;
  bool dump_regions = false;

  auto* rate = app.add_subcommand("rate", "Estimate the rate of one configuration");
  const auto rate_opts = add_common_options(rate, c, true);

  auto* sweep = app.add_subcommand("sweep", "Sweep an alpha or SNR grid");
  const auto sweep_opts = add_common_options(sweep, c, true);
  auto* og_alpha = sweep->add_option("--alpha-grid", alpha_grid, "Alpha grid (comma separated)")
                       ->delimiter(',');
  auto* og_snr = sweep->add_option("--snr-grid", snr_grid, "SNR grid in dB (comma separated)")
                     ->delimiter(',');

  auto* validate = app.add_subcommand("validate", "Message passing vs exact free energies");
  const auto val_opts = add_common_options(validate, c, true);
  auto* o_nmin = validate->add_option("--n-min", n_min, "Smallest lattice size");
  auto* o_nmax = validate->add_option("--n-max", n_max, "Largest lattice size");
  auto* o_thresh =
      validate->add_option("--threshold", threshold_pct, "Maximum allowed RMS error in percent");

  auto* regions = app.add_subcommand("regions", "Inspect the region graph");
  const auto reg_opts = add_common_options(regions, c, false);
  regions->add_flag("--dump", dump_regions, "List every region");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    ConfigFile cf;
    if (!c.config_path.empty()) cf.load(c.config_path);
    if (rate->parsed()) {
      merge_common(cf, rate_opts, c, true);
      return cmd_rate(c);
    }
    if (sweep->parsed()) {
      merge_common(cf, sweep_opts, c, true);
      cf.pull(og_alpha, "alpha_grid", alpha_grid);
      cf.pull(og_snr, "snr_grid", snr_grid);
      return cmd_sweep(c, alpha_grid, snr_grid);
    }
    if (validate->parsed()) {
      merge_common(cf, val_opts, c, true);
      cf.pull(o_nmin, "n_min", n_min);
      cf.pull(o_nmax, "n_max", n_max);
      cf.pull(o_thresh, "threshold", threshold_pct);
      return cmd_validate(c, n_min, n_max, threshold_pct);
    }
    merge_common(cf, reg_opts, c, false);
    return cmd_regions(c, dump_regions);
  } catch (const gridrate::GuardError& e) {
    std::cerr << "guard violation: " << e.what() << "\n";
    return 3;
  } catch (const gridrate::UncoveredFactorError& e) {
    std::cerr << "guard violation: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 70;
  }
}
