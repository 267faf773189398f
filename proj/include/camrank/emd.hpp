#pragma once

#include "camrank/grid.hpp"

namespace camrank::metrics {

// Largest grid side solved exactly; bigger maps are block-summed down to this size first.
inline constexpr int kExactEmdSide = 32;

// Earth mover's distance between two nonnegative maps after each is normalized to unit
// mass. Ground distance is the Euclidean distance between pixel centres, in pixels of
// the original grid.
double earth_movers_distance(const Grid& a, const Grid& b);

// Exact optimal transport cost between two equal-mass histograms on the same grid
// (successive shortest paths on the bipartite transport network).
double transport_cost(const Grid& supply, const Grid& demand, double pixel_pitch = 1.0);

}  // namespace camrank::metrics
