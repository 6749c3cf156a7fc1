#include "rsport/dp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rsport/threading.hpp"

namespace rsport::dp {

namespace {

double growth_factor(const Allocation& alloc, const Eigen::VectorXd& returns, double rf) {
    double g = 0.0;
    for (int i = 0; i < returns.size(); ++i)
        g += alloc.w[static_cast<std::size_t>(i)] * (1.0 + returns[i]);
    g += alloc.cash() * (1.0 + rf);
    return g;
}

// One-sample contribution to the stage value. Non-positive growth means the
// path is bankrupt and terminates at the floored wealth.
double combine(double growth, double v_next, double gamma, double floor_wealth) {
    if (!(growth > 0.0)) {
        if (gamma == 0.0) return std::log(floor_wealth);
        return std::pow(floor_wealth, gamma) / gamma;
    }
    if (gamma == 0.0) return std::log(growth) + v_next;
    return std::pow(growth, gamma) * v_next;
}

double short_magnitude(const Allocation& a) {
    double s = 0.0;
    for (double x : a.w)
        if (x < 0.0) s -= x;
    return s;
}

struct PointEvaluator {
    const RegimeModel* model;
    const StageSampleSet* samples;
    std::vector<double> v_next;  // interpolated continuation value per sample
    double gamma = -1.0;
    double floor_wealth = 1e-6;

    double score(const Allocation& a, double penalty) const {
        double acc = 0.0;
        const std::size_t m = samples->regimes.size();
        for (std::size_t j = 0; j < m; ++j) {
            const double g = growth_factor(a, samples->returns[j],
                                           model->rf(samples->regimes[j]));
            acc += combine(g, v_next[j], gamma, floor_wealth);
        }
        double value = acc / static_cast<double>(m);
        if (penalty != 0.0) value -= penalty * short_magnitude(a);
        return value;
    }
};

// Local search over coordinate transfers at the given step size. Moves weight
// between every ordered pair of entries (cash included); best improvement per
// sweep. Returns true when it stopped by the sweep cap.
bool coordinate_refine(const PointEvaluator& eval, const Constraints& cons, double penalty,
                       double step, int max_sweeps, Allocation& best, double& best_value) {
    const int dim = static_cast<int>(best.w.size());
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double sweep_best = best_value;
        int from = -1, to = -1;
        for (int i = 0; i < dim; ++i) {
            for (int j = 0; j < dim; ++j) {
                if (i == j) continue;
                const double wi = best.w[static_cast<std::size_t>(i)] - step;
                const double wj = best.w[static_cast<std::size_t>(j)] + step;
                if (wi < cons.lo - 1e-12 || wj > cons.hi + 1e-12) continue;
                Allocation cand = best;
                cand.w[static_cast<std::size_t>(i)] = wi;
                cand.w[static_cast<std::size_t>(j)] = wj;
                const double v = eval.score(cand, penalty);
                if (v > sweep_best + 1e-15) {
                    sweep_best = v;
                    from = i;
                    to = j;
                }
            }
        }
        if (from < 0) return false;
        best.w[static_cast<std::size_t>(from)] -= step;
        best.w[static_cast<std::size_t>(to)] += step;
        best_value = sweep_best;
    }
    return true;
}

// Fallback for action spaces too large to scan: greedy transfers from all-cash
// at successively finer steps.
void local_search(const PointEvaluator& eval, const Constraints& cons, double penalty,
                  const DpOptions& opts, Allocation& best, double& best_value) {
    best = Allocation::all_cash(eval.model->n_risky());
    best_value = eval.score(best, penalty);
    for (double step : {4 * opts.coarse_step, 2 * opts.coarse_step, opts.coarse_step}) {
        coordinate_refine(eval, cons, penalty, step, 200, best, best_value);
    }
}

}  // namespace

const Allocation& PolicyTable::at(int t, int grid_index) const {
    return alloc.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(grid_index));
}

StageSampleSet stage_samples(const RegimeModel& model, const Belief& belief, std::uint64_t seed,
                             int grid_index, int count, bool antithetic) {
    StageSampleSet set;
    set.regimes.reserve(static_cast<std::size_t>(count));
    set.returns.reserve(static_cast<std::size_t>(count));
    Rng rng = Rng::derive(seed, Stream::DpStage, static_cast<std::uint64_t>(grid_index));
    Eigen::VectorXd z(model.n_risky());
    for (int j = 0; j < count; ++j) {
        if (antithetic && (j & 1) == 1) {
            // mirror the previous draw, same regime
            set.regimes.push_back(set.regimes.back());
            const int k = set.regimes.back();
            Eigen::VectorXd r = 2.0 * model.mu(k) - set.returns.back();
            set.returns.push_back(std::move(r));
            continue;
        }
        const int k = rng.categorical(belief.p);
        set.regimes.push_back(k);
        Eigen::VectorXd r;
        model.sample_returns(k, rng, r);
        set.returns.push_back(std::move(r));
    }
    return set;
}

double evaluate_action(const RegimeModel& model, const Belief& belief, const Allocation& alloc,
                       const BeliefInterpolant& value_next, int mc_paths, Rng& rng, double gamma,
                       bool antithetic, double bankruptcy_floor) {
    if (mc_paths < 1) throw std::invalid_argument("evaluate_action: mc_paths must be positive");
    double acc = 0.0;
    Eigen::VectorXd r;
    Eigen::VectorXd prev;
    int prev_regime = 0;
    for (int j = 0; j < mc_paths; ++j) {
        int k;
        if (antithetic && (j & 1) == 1) {
            k = prev_regime;
            r = 2.0 * model.mu(k) - prev;
        } else {
            k = rng.categorical(belief.p);
            model.sample_returns(k, rng, r);
            prev = r;
            prev_regime = k;
        }
        const double g = growth_factor(alloc, r, model.rf(k));
        const double v = value_next(update_belief(model, belief, r));
        acc += combine(g, v, gamma, bankruptcy_floor);
    }
    return acc / mc_paths;
}

StageResult solve_stage(const RegimeModel& model, const BeliefGrid& grid,
                        std::span<const double> value_next, const Constraints& cons, double penalty,
                        double gamma, const DpOptions& opts) {
    if (static_cast<int>(value_next.size()) != grid.size())
        throw std::invalid_argument("solve_stage: value_next must cover the grid");

    const BeliefInterpolant interp(grid, value_next);
    std::vector<Allocation> actions;
    bool scan = true;
    {
        // Probe the lattice size before materializing it.
        actions = enumerate_action_grid(model.n_risky(), opts.coarse_step, cons);
        if (static_cast<int>(actions.size()) > opts.max_scan_actions) {
            actions.clear();
            scan = false;
        }
    }

    StageResult result;
    result.alloc.resize(static_cast<std::size_t>(grid.size()));
    result.value.resize(static_cast<std::size_t>(grid.size()));
    std::vector<int> capped(static_cast<std::size_t>(grid.size()), 0);

    parallel_for(static_cast<std::size_t>(grid.size()), opts.threads, [&](std::size_t gi) {
        const Belief& belief = grid.points[gi];
        PointEvaluator eval;
        eval.model = &model;
        eval.gamma = gamma;
        eval.floor_wealth = opts.bankruptcy_floor;
        StageSampleSet samples = stage_samples(model, belief, opts.seed, static_cast<int>(gi),
                                               opts.mc_paths, opts.antithetic);
        eval.samples = &samples;
        eval.v_next.resize(samples.regimes.size());
        for (std::size_t j = 0; j < samples.regimes.size(); ++j)
            eval.v_next[j] = interp(update_belief(model, belief, samples.returns[j]));

        Allocation best;
        double best_value = -std::numeric_limits<double>::infinity();
        if (scan) {
            for (const Allocation& a : actions) {
                const double v = eval.score(a, penalty);
                if (v > best_value) {
                    best_value = v;
                    best = a;
                }
            }
        } else {
            local_search(eval, cons, penalty, opts, best, best_value);
        }
        if (opts.refine) {
            if (coordinate_refine(eval, cons, penalty, opts.refine_step, opts.refine_max_sweeps,
                                  best, best_value))
                capped[gi] = 1;
        }
        result.alloc[gi] = std::move(best);
        result.value[gi] = best_value;
    });

    for (int c : capped) result.refine_capped += c;
    return result;
}

PolicyTable solve(const RegimeModel& model, int horizon, const Constraints& cons, double gamma,
                  const DpOptions& opts, SolveReport* report) {
    if (horizon < 1) throw std::invalid_argument("dp::solve: horizon must be at least 1");

    PolicyTable table;
    table.horizon = horizon;
    table.gamma = gamma;
    table.grid = BeliefGrid::regular(model.n_regimes(), opts.belief_step);
    table.alloc.resize(static_cast<std::size_t>(horizon));
    table.value.resize(static_cast<std::size_t>(horizon) + 1);

    // Terminal values: utility of unit normalized wealth.
    const double terminal = gamma == 0.0 ? 0.0 : 1.0 / gamma;
    table.value[static_cast<std::size_t>(horizon)].assign(
        static_cast<std::size_t>(table.grid.size()), terminal);

    long capped = 0;
    for (int t = horizon - 1; t >= 0; --t) {
        StageResult stage = solve_stage(model, table.grid,
                                        table.value[static_cast<std::size_t>(t) + 1], cons,
                                        opts.short_penalty, gamma, opts);
        capped += stage.refine_capped;
        table.alloc[static_cast<std::size_t>(t)] = std::move(stage.alloc);
        table.value[static_cast<std::size_t>(t)] = std::move(stage.value);
    }
    if (report) report->refine_capped_cells = capped;
    return table;
}

}  // namespace rsport::dp
