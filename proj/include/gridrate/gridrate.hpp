#pragma once

// Umbrella header: rate estimation for finite-state-input 2-D channels with
// memory (grid ISI and hexagonal cellular interference), via region-graph
// message passing with exact oracles for small lattices.

#include "gridrate/channel.hpp"
#include "gridrate/estimator.hpp"
#include "gridrate/exact.hpp"
#include "gridrate/factor_graph.hpp"
#include "gridrate/gbp.hpp"
#include "gridrate/lattice.hpp"
#include "gridrate/logdomain.hpp"
#include "gridrate/pairwise.hpp"
#include "gridrate/prior.hpp"
#include "gridrate/region_graph.hpp"
#include "gridrate/report.hpp"
#include "gridrate/rng.hpp"
