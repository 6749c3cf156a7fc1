#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rsport/grid.hpp"
#include "rsport/market.hpp"
#include "rsport/rng.hpp"

namespace rsport::dp {

struct DpOptions {
    int mc_paths = 2000;           // Monte Carlo budget per (action, grid point)
    bool antithetic = true;
    double coarse_step = 0.05;     // action lattice for the scan stage
    double refine_step = 0.01;     // local coordinate-transfer resolution
    bool refine = true;
    int refine_max_sweeps = 64;
    double short_penalty = 0.0;    // "adjusted DP" shorting penalty (0 disables)
    int max_scan_actions = 400000; // beyond this the scan falls back to local search
    double belief_step = 0.05;
    double bankruptcy_floor = 1e-6;
    int threads = 1;
    std::uint64_t seed = 0;
};

/// Backward-induction policy over (time step, belief grid point). Values are
/// expected terminal CRRA utility at unit wealth; positive homogeneity
/// restores dollar values.
struct PolicyTable {
    int horizon = 0;
    double gamma = -1.0;
    BeliefGrid grid;
    std::vector<std::vector<Allocation>> alloc;  // [t][grid point], t in [0, horizon)
    std::vector<std::vector<double>> value;      // [t][grid point], t in [0, horizon]

    const Allocation& at(int t, int grid_index) const;
};

struct StageSampleSet {
    std::vector<int> regimes;
    std::vector<Eigen::VectorXd> returns;
};

/// Common-random-number draws for one belief grid point. The same set is
/// reused at every stage of the backward induction and is what the
/// enumeration oracle in the test suite consumes.
StageSampleSet stage_samples(const RegimeModel& model, const Belief& belief, std::uint64_t seed,
                             int grid_index, int count, bool antithetic);

/// Monte Carlo estimate of E[g(r)^gamma * value_next(updated belief)] with
/// g(r) = w'(1+r); the regime is mixture-sampled from the belief. gamma = 0
/// uses the additive log form.
double evaluate_action(const RegimeModel& model, const Belief& belief, const Allocation& alloc,
                       const BeliefInterpolant& value_next, int mc_paths, Rng& rng, double gamma,
                       bool antithetic = true, double bankruptcy_floor = 1e-6);

struct StageResult {
    std::vector<Allocation> alloc;
    std::vector<double> value;
    long refine_capped = 0;  // grid points where local refinement hit the sweep cap
};

/// One backward step: per grid point, maximize the action value minus
/// penalty * (total short magnitude) over the feasible set.
StageResult solve_stage(const RegimeModel& model, const BeliefGrid& grid,
                        std::span<const double> value_next, const Constraints& cons, double penalty,
                        double gamma, const DpOptions& opts);

struct SolveReport {
    long refine_capped_cells = 0;
};

PolicyTable solve(const RegimeModel& model, int horizon, const Constraints& cons, double gamma,
                  const DpOptions& opts, SolveReport* report = nullptr);

}  // namespace rsport::dp
