#pragma once

#include <span>
#include <vector>

#include "rsport/market.hpp"

namespace rsport {

/// Regular lattice over the belief simplex: every coordinate a multiple of
/// `step`. For 2 regimes at step 0.05 this is the 21-point grid the
/// experiments run on.
struct BeliefGrid {
    double step = 0.05;
    int n_regimes = 0;
    int units = 0;  // 1/step
    std::vector<Belief> points;

    static BeliefGrid regular(int n_regimes, double step);

    int size() const { return static_cast<int>(points.size()); }

    /// Nearest grid point by largest-remainder rounding of the coordinates;
    /// remainder ties go to the lower coordinate index.
    int snap_index(const Belief& b) const;

private:
    // counts encoded base (units+1), sorted for lookup
    std::vector<std::pair<std::uint64_t, int>> keys_;
    std::uint64_t encode(const std::vector<int>& counts) const;
    friend class BeliefInterpolant;
};

/// Multilinear interpolation of per-grid-point values over the simplex lattice
/// (plain linear interpolation in the 2-regime case). Exact at grid points.
class BeliefInterpolant {
public:
    BeliefInterpolant(const BeliefGrid& grid, std::span<const double> values);
    double operator()(const Belief& b) const;

private:
    const BeliefGrid* grid_;
    std::span<const double> values_;
};

}  // namespace rsport
