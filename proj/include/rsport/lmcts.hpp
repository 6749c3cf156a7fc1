#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rsport/grid.hpp"
#include "rsport/market.hpp"
#include "rsport/rng.hpp"

namespace rsport::lmcts {

/// Knobs of the kernel-regression UCT search.
struct KernelConfig {
    double bandwidth = 0.10;     // RBF length scale in allocation L2 space
    double tau = 0.015;          // minimum kernel similarity for expansion candidates
    double explore_c = 5.0;      // UCT exploration constant
    double widen_slope = 0.04;   // progressive widening: allow |children| <
    double widen_intercept = 1.0;  //   intercept + slope * total visits
};

struct ActionNode {
    Allocation action;
    long visits = 0;
    double value_mean = 0.0;
};

/// Backward-filled map (time step, belief grid point) -> searched allocation.
/// Solving proceeds from the end of the horizon, so entries for later times
/// are always available as the rollout policy for earlier ones.
struct LookupTable {
    int horizon = 0;
    BeliefGrid grid;
    int solved_from = 0;  // entries valid for t in [solved_from, horizon)
    std::vector<std::vector<Allocation>> entries;  // [t][grid point]

    const Allocation& at(int t, int grid_index) const;  // throws on unsolved t
    bool complete() const { return solved_from == 0 && horizon > 0; }
};

/// Pre-simulated regime/return paths per starting belief grid point. Returns
/// are stored in single precision; all solver arithmetic stays double.
class PathPool {
public:
    PathPool() = default;
    PathPool(int horizon, int n_risky, int paths_per_belief, int grid_size);

    int horizon() const { return horizon_; }
    int n_risky() const { return n_risky_; }
    int paths_per_belief() const { return paths_per_belief_; }
    int grid_size() const { return grid_size_; }

    struct PathView {
        const std::uint8_t* regimes = nullptr;
        const float* returns = nullptr;
        int horizon = 0;
        int n_risky = 0;

        int regime(int step) const { return regimes[step]; }
        void copy_returns(int step, Eigen::VectorXd& out) const {
            out.resize(n_risky);
            const float* row = returns + static_cast<std::ptrdiff_t>(step) * n_risky;
            for (int i = 0; i < n_risky; ++i) out[i] = static_cast<double>(row[i]);
        }
    };

    PathView path(int grid_index, int path_index) const;
    void set(int grid_index, int path_index, int step, int regime, const Eigen::VectorXd& returns);

private:
    int horizon_ = 0;
    int n_risky_ = 0;
    int paths_per_belief_ = 0;
    int grid_size_ = 0;
    std::vector<std::uint8_t> regimes_;
    std::vector<float> returns_;
};

PathPool build_path_pool(const RegimeModel& model, const BeliefGrid& grid, int paths_per_belief,
                         int horizon, std::uint64_t seed, int threads = 1);

/// exp(-|a-b|^2 / (2 bandwidth^2))
double rbf_kernel(const Allocation& a, const Allocation& b, double bandwidth);

/// Kernel-weighted, visit-weighted mean reward of the siblings (the
/// Nadaraya-Watson estimate of the action's value). Falls back to the plain
/// mean of the sibling means when every weight vanishes.
double kr_value(const Allocation& a, std::span<const ActionNode> siblings, double bandwidth);

/// Kernel visit density W(a) = sum_b K(a, b) * n_b.
double kr_density(const Allocation& a, std::span<const ActionNode> siblings, double bandwidth);

/// argmax over children of kr_value + C * sqrt(log(sum_b W(b)) / W(a)).
/// Ties break toward the lowest insertion index. Children must each hold at
/// least one visit.
std::size_t kr_uct_select(std::span<const ActionNode> children, const KernelConfig& cfg);

/// Single-asset transfers between each risky asset and cash at the given
/// deviations, feasibility-filtered and deduplicated. Falls back to {best}
/// when every move is infeasible.
std::vector<Allocation> generate_candidates(const Allocation& best,
                                            std::span<const double> deviations,
                                            const Constraints& cons);

/// Expansion rule: an empty node seeds with the next-timestep lookup solution;
/// otherwise the candidate with minimal kernel density among those at least
/// tau-close to the current best. Returns nothing when the tau filter empties
/// the candidate set.
std::optional<Allocation> expand(std::span<const ActionNode> children, const ActionNode& best,
                                 const LookupTable& lookup, int next_t, int grid_index,
                                 std::span<const double> deviations, const KernelConfig& cfg,
                                 const Constraints& cons);

struct LmctsOptions {
    KernelConfig kernel;
    std::vector<double> deviations{0.05, 0.10, 0.20};
    int iterations = 10000;      // search iterations per (time, belief) node
    int rollout_batch = 5;       // pool paths averaged per iteration reward
    int paths_per_belief = 50000;
    int myopic_paths = 2000;     // pool paths used by the terminal-stage seed optimizer
    double action_step = 0.05;   // lattice for the terminal myopic seed
    int max_scan_actions = 400000;
    int sg_window = 11;
    int sg_order = 1;
    double bankruptcy_floor = 1e-6;
    int threads = 1;
    std::uint64_t seed = 0;
};

/// Play one pooled path from (t, belief) applying `action` now and the lookup
/// policy afterwards; returns the terminal utility at unit initial wealth.
/// No transaction costs: the search solves the frictionless problem.
double rollout(const RegimeModel& model, int t, const Belief& belief, const Allocation& action,
               const LookupTable& lookup, const PathPool::PathView& path, const UtilitySpec& util,
               double bankruptcy_floor = 1e-6);

/// One-period optimum on the node's own pool paths; seeds the t = horizon-1
/// nodes where no next-timestep lookup entry exists.
Allocation myopic_action(const RegimeModel& model, const BeliefGrid& grid, int grid_index,
                         const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                         const LmctsOptions& opts);

/// Depth-one KR-UCT search at one (time, belief) node; returns the most
/// visited child's action.
Allocation solve_node(const RegimeModel& model, int t, int grid_index, const LookupTable& lookup,
                      const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                      const LmctsOptions& opts, std::vector<ActionNode>* tree_out = nullptr);

/// Solve every (t, grid point) node backward from the horizon.
LookupTable build_lookup(const RegimeModel& model, int horizon, const BeliefGrid& grid,
                         const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                         const LmctsOptions& opts);

/// Least-squares polynomial smoothing. Boundaries use the polynomial fit on
/// the truncated asymmetric window; output length equals input length.
std::vector<double> savitzky_golay(std::span<const double> series, int window, int order);

/// Filter each asset's weight series across time (per grid point), then
/// restore the allocation invariants: clip to the constraint box and
/// renormalize to sum 1. Degenerate results fall back to the raw entry.
LookupTable smooth_lookup(const LookupTable& lookup, int window, int order,
                          const Constraints& cons);

}  // namespace rsport::lmcts
