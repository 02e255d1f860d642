#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridrate/estimator.hpp"
#include "gridrate/lattice.hpp"

namespace gridrate {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Fixed, ordered schema. Every configuration field that influenced a row is
// echoed before the aggregates.
inline std::string csv_header() {
  return "topology,size_n,alpha,snr_db,prior,engine,window,damping,tolerance,max_iters,"
         "trials,master_seed,mean_sir_bits,std_sir_bits,stderr_sir_bits,"
         "mean_free_energy_per_symbol_nats,converged_fraction,mean_iterations";
}

inline std::string csv_row(const RateEstimate& r) {
  std::string out;
  out += topology_name(r.topology);
  out += ',' + std::to_string(r.size_n);
  out += ',' + format_double(r.alpha);
  out += ',' + format_double(r.snr_db);
  out += ',' + r.prior;
  out += ',';
  out += engine_name(r.engine);
  out += ',' + std::to_string(r.window);
  out += ',' + format_double(r.damping);
  out += ',' + format_double(r.tolerance);
  out += ',' + std::to_string(r.max_iters);
  out += ',' + std::to_string(r.trials);
  out += ',' + std::to_string(r.master_seed);
  out += ',' + format_double(r.mean_sir_bits);
  out += ',' + format_double(r.std_sir_bits);
  out += ',' + format_double(r.stderr_sir_bits);
  out += ',' + format_double(r.mean_free_energy_per_symbol_nats);
  out += ',' + format_double(r.converged_fraction);
  out += ',' + format_double(r.mean_iterations);
  return out;
}

// Same records as the CSV plus the derived sigma2, as a JSON array.
inline nlohmann::json to_json(const std::vector<RateEstimate>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j;
    j["topology"] = topology_name(r.topology);
    j["size_n"] = r.size_n;
    j["alpha"] = r.alpha;
    j["snr_db"] = r.snr_db;
    j["sigma2"] = r.sigma2;
    j["prior"] = r.prior;
    j["engine"] = engine_name(r.engine);
    j["window"] = r.window;
    j["damping"] = r.damping;
    j["tolerance"] = r.tolerance;
    j["max_iters"] = r.max_iters;
    j["trials"] = r.trials;
    j["master_seed"] = r.master_seed;
    j["mean_sir_bits"] = r.mean_sir_bits;
    j["std_sir_bits"] = r.std_sir_bits;
    j["stderr_sir_bits"] = r.stderr_sir_bits;
    j["mean_free_energy_per_symbol_nats"] = r.mean_free_energy_per_symbol_nats;
    j["converged_fraction"] = r.converged_fraction;
    j["mean_iterations"] = r.mean_iterations;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace gridrate
