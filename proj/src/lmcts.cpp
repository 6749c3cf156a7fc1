#include "rsport/lmcts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rsport/threading.hpp"

namespace rsport::lmcts {

namespace {

double cfg_widen_limit(const KernelConfig& cfg, long total_visits) {
    return cfg.widen_intercept + cfg.widen_slope * static_cast<double>(total_visits);
}

}  // namespace

const Allocation& LookupTable::at(int t, int grid_index) const {
    if (t < solved_from || t >= horizon)
        throw std::logic_error("LookupTable: entry for t=" + std::to_string(t) +
                               " not solved (solved_from=" + std::to_string(solved_from) + ")");
    return entries[static_cast<std::size_t>(t)][static_cast<std::size_t>(grid_index)];
}

PathPool::PathPool(int horizon, int n_risky, int paths_per_belief, int grid_size)
    : horizon_(horizon), n_risky_(n_risky), paths_per_belief_(paths_per_belief),
      grid_size_(grid_size) {
    regimes_.assign(static_cast<std::size_t>(grid_size) * paths_per_belief * horizon, 0);
    returns_.assign(static_cast<std::size_t>(grid_size) * paths_per_belief * horizon * n_risky,
                    0.0f);
}

PathPool::PathView PathPool::path(int grid_index, int path_index) const {
    PathView v;
    v.horizon = horizon_;
    v.n_risky = n_risky_;
    const std::size_t base =
        (static_cast<std::size_t>(grid_index) * paths_per_belief_ + path_index);
    v.regimes = regimes_.data() + base * horizon_;
    v.returns = returns_.data() + base * horizon_ * n_risky_;
    return v;
}

void PathPool::set(int grid_index, int path_index, int step, int regime,
                   const Eigen::VectorXd& returns) {
    const std::size_t base =
        (static_cast<std::size_t>(grid_index) * paths_per_belief_ + path_index);
    regimes_[base * horizon_ + step] = static_cast<std::uint8_t>(regime);
    float* row = returns_.data() + (base * horizon_ + step) * n_risky_;
    for (int i = 0; i < n_risky_; ++i) row[i] = static_cast<float>(returns[i]);
}

PathPool build_path_pool(const RegimeModel& model, const BeliefGrid& grid, int paths_per_belief,
                         int horizon, std::uint64_t seed, int threads) {
    PathPool pool(horizon, model.n_risky(), paths_per_belief, grid.size());
    parallel_for(static_cast<std::size_t>(grid.size()), threads, [&](std::size_t gi) {
        for (int p = 0; p < paths_per_belief; ++p) {
            Rng rng = Rng::derive(seed, Stream::PathPool, gi, static_cast<std::uint64_t>(p));
            int regime = rng.categorical(grid.points[gi].p);
            for (int s = 0; s < horizon; ++s) {
                StepSample step = sample_step(model, regime, rng);
                pool.set(static_cast<int>(gi), p, s, regime, step.returns);
                regime = step.next_regime;
            }
        }
    });
    return pool;
}

double rbf_kernel(const Allocation& a, const Allocation& b, double bandwidth) {
    if (a.w.size() != b.w.size()) throw std::invalid_argument("rbf_kernel: dimension mismatch");
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.w.size(); ++i) {
        const double d = a.w[i] - b.w[i];
        d2 += d * d;
    }
    return std::exp(-d2 / (2.0 * bandwidth * bandwidth));
}

double kr_value(const Allocation& a, std::span<const ActionNode> siblings, double bandwidth) {
    double num = 0.0;
    double den = 0.0;
    for (const ActionNode& b : siblings) {
        const double w = rbf_kernel(a, b.action, bandwidth) * static_cast<double>(b.visits);
        num += w * b.value_mean;
        den += w;
    }
    if (den > 0.0) return num / den;
    // Degenerate weights: fall back to the plain mean of the sibling means.
    double acc = 0.0;
    for (const ActionNode& b : siblings) acc += b.value_mean;
    return siblings.empty() ? 0.0 : acc / static_cast<double>(siblings.size());
}

double kr_density(const Allocation& a, std::span<const ActionNode> siblings, double bandwidth) {
    double den = 0.0;
    for (const ActionNode& b : siblings)
        den += rbf_kernel(a, b.action, bandwidth) * static_cast<double>(b.visits);
    return den;
}

std::size_t kr_uct_select(std::span<const ActionNode> children, const KernelConfig& cfg) {
    if (children.empty()) throw std::invalid_argument("kr_uct_select: no children");
    double total_density = 0.0;
    std::vector<double> density(children.size());
    for (std::size_t i = 0; i < children.size(); ++i) {
        density[i] = kr_density(children[i].action, children, cfg.bandwidth);
        total_density += density[i];
    }
    const double log_total = std::log(std::max(total_density, 1.0));
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < children.size(); ++i) {
        const double exploit = kr_value(children[i].action, children, cfg.bandwidth);
        const double explore = cfg.explore_c * std::sqrt(log_total / density[i]);
        const double score = exploit + explore;
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

std::vector<Allocation> generate_candidates(const Allocation& best,
                                            std::span<const double> deviations,
                                            const Constraints& cons) {
    std::vector<Allocation> out;
    const int n = best.n_risky();
    for (int i = 0; i < n; ++i) {
        for (double d : deviations) {
            for (double sign : {+1.0, -1.0}) {
                Allocation cand = best;
                cand.w[static_cast<std::size_t>(i)] += sign * d;
                cand.cash() -= sign * d;
                if (!cons.feasible(cand)) continue;
                bool dup = false;
                for (const Allocation& existing : out) {
                    if (approx_equal(existing, cand)) {
                        dup = true;
                        break;
                    }
                }
                if (!dup) out.push_back(std::move(cand));
            }
        }
    }
    if (out.empty()) out.push_back(best);
    return out;
}

std::optional<Allocation> expand(std::span<const ActionNode> children, const ActionNode& best,
                                 const LookupTable& lookup, int next_t, int grid_index,
                                 std::span<const double> deviations, const KernelConfig& cfg,
                                 const Constraints& cons) {
    if (children.empty()) return lookup.at(next_t, grid_index);

    std::vector<Allocation> candidates = generate_candidates(best.action, deviations, cons);
    std::optional<Allocation> pick;
    double min_density = std::numeric_limits<double>::infinity();
    for (Allocation& cand : candidates) {
        if (rbf_kernel(best.action, cand, cfg.bandwidth) <= cfg.tau) continue;
        bool exists = false;
        for (const ActionNode& child : children) {
            if (approx_equal(child.action, cand)) {
                exists = true;
                break;
            }
        }
        if (exists) continue;
        const double density = kr_density(cand, children, cfg.bandwidth);
        if (density < min_density) {
            min_density = density;
            pick = std::move(cand);
        }
    }
    return pick;
}

double rollout(const RegimeModel& model, int t, const Belief& belief, const Allocation& action,
               const LookupTable& lookup, const PathPool::PathView& path, const UtilitySpec& util,
               double bankruptcy_floor) {
    const int horizon = lookup.horizon;
    double wealth = 1.0;
    Belief bel = belief;
    Allocation alloc = action;
    Eigen::VectorXd r;
    for (int step = 0; step < horizon - t; ++step) {
        path.copy_returns(step, r);
        const int regime = path.regime(step);
        GrowResult g = grow(wealth, alloc, r, model.rf(regime));
        if (g.bankrupt) {
            wealth = bankruptcy_floor;
            break;
        }
        wealth = g.wealth_end;
        if (step + 1 < horizon - t) {
            bel = update_belief(model, bel, r);
            alloc = lookup.at(t + step + 1, lookup.grid.snap_index(bel));
        }
    }
    return utility(util, wealth);
}

namespace {

// Mean one-period utility of an action over the leading step of the node's
// pool paths.
double myopic_score(const RegimeModel& model, const Allocation& a, const PathPool& pool,
                    int grid_index, int n_paths, const UtilitySpec& util, double floor_wealth) {
    double acc = 0.0;
    Eigen::VectorXd r;
    for (int p = 0; p < n_paths; ++p) {
        const PathPool::PathView path = pool.path(grid_index, p);
        path.copy_returns(0, r);
        GrowResult g = grow(1.0, a, r, model.rf(path.regime(0)));
        acc += utility(util, g.bankrupt ? floor_wealth : g.wealth_end);
    }
    return acc / n_paths;
}

}  // namespace

Allocation myopic_action(const RegimeModel& model, const BeliefGrid& grid, int grid_index,
                         const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                         const LmctsOptions& opts) {
    (void)grid;
    const int n_paths = std::min(opts.myopic_paths, pool.paths_per_belief());
    if (n_paths < 1) throw std::invalid_argument("myopic_action: empty path pool");

    std::vector<Allocation> actions = enumerate_action_grid(model.n_risky(), opts.action_step, cons);
    Allocation best = Allocation::all_cash(model.n_risky());
    double best_value =
        myopic_score(model, best, pool, grid_index, n_paths, util, opts.bankruptcy_floor);
    if (static_cast<int>(actions.size()) <= opts.max_scan_actions) {
        for (const Allocation& a : actions) {
            const double v =
                myopic_score(model, a, pool, grid_index, n_paths, util, opts.bankruptcy_floor);
            if (v > best_value) {
                best_value = v;
                best = a;
            }
        }
        return best;
    }

    // Lattice too large to scan: greedy single-asset transfers from all cash.
    bool improved = true;
    int guard = 0;
    while (improved && guard++ < 400) {
        improved = false;
        Allocation sweep_best = best;
        double sweep_value = best_value;
        for (int i = 0; i < model.n_risky(); ++i) {
            for (double d : opts.deviations) {
                for (double sign : {+1.0, -1.0}) {
                    Allocation cand = best;
                    cand.w[static_cast<std::size_t>(i)] += sign * d;
                    cand.cash() -= sign * d;
                    if (!cons.feasible(cand)) continue;
                    const double v = myopic_score(model, cand, pool, grid_index, n_paths, util,
                                                  opts.bankruptcy_floor);
                    if (v > sweep_value + 1e-15) {
                        sweep_value = v;
                        sweep_best = std::move(cand);
                    }
                }
            }
        }
        if (sweep_value > best_value + 1e-15) {
            best = std::move(sweep_best);
            best_value = sweep_value;
            improved = true;
        }
    }
    return best;
}

Allocation solve_node(const RegimeModel& model, int t, int grid_index, const LookupTable& lookup,
                      const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                      const LmctsOptions& opts, std::vector<ActionNode>* tree_out) {
    if (opts.iterations < 1) throw std::invalid_argument("solve_node: budget must be positive");
    if (pool.paths_per_belief() < 1) throw std::invalid_argument("solve_node: empty path pool");

    const Belief& belief = lookup.grid.points[static_cast<std::size_t>(grid_index)];
    const bool terminal_stage = t == lookup.horizon - 1;
    Allocation seed_action;
    if (terminal_stage) seed_action = myopic_action(model, lookup.grid, grid_index, pool, util, cons, opts);

    std::vector<ActionNode> children;
    const int batch = std::max(1, opts.rollout_batch);
    long path_cursor = 0;

    for (int iter = 0; iter < opts.iterations; ++iter) {
        const long total_visits = iter;  // every prior iteration backs up exactly one visit
        ActionNode* node = nullptr;

        if (static_cast<double>(children.size()) <
            cfg_widen_limit(opts.kernel, total_visits)) {
            if (children.empty()) {
                ActionNode child;
                child.action = terminal_stage ? seed_action : lookup.at(t + 1, grid_index);
                children.push_back(std::move(child));
                node = &children.back();
            } else {
                // Current best by kernel-regression value, lowest index on ties.
                std::size_t best_idx = 0;
                double best_val = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < children.size(); ++i) {
                    const double v = kr_value(children[i].action, children, opts.kernel.bandwidth);
                    if (v > best_val) {
                        best_val = v;
                        best_idx = i;
                    }
                }
                std::optional<Allocation> fresh =
                    expand(children, children[best_idx], lookup, t + 1, grid_index,
                           opts.deviations, opts.kernel, cons);
                if (fresh) {
                    ActionNode child;
                    child.action = std::move(*fresh);
                    children.push_back(std::move(child));
                    node = &children.back();
                }
            }
        }
        if (!node) node = &children[kr_uct_select(children, opts.kernel)];

        double reward = 0.0;
        for (int m = 0; m < batch; ++m) {
            const int p = static_cast<int>(path_cursor % pool.paths_per_belief());
            ++path_cursor;
            reward += rollout(model, t, belief, node->action, lookup, pool.path(grid_index, p),
                              util, opts.bankruptcy_floor);
        }
        reward /= batch;

        node->visits += 1;
        node->value_mean += (reward - node->value_mean) / static_cast<double>(node->visits);
    }

    // Robust child: maximum visit count, lowest index on ties.
    std::size_t best = 0;
    for (std::size_t i = 1; i < children.size(); ++i) {
        if (children[i].visits > children[best].visits) best = i;
    }
    Allocation result = children[best].action;
    if (tree_out) *tree_out = std::move(children);
    return result;
}

LookupTable build_lookup(const RegimeModel& model, int horizon, const BeliefGrid& grid,
                         const PathPool& pool, const UtilitySpec& util, const Constraints& cons,
                         const LmctsOptions& opts) {
    if (horizon < 1) throw std::invalid_argument("build_lookup: horizon must be at least 1");
    LookupTable lookup;
    lookup.horizon = horizon;
    lookup.grid = grid;
    lookup.solved_from = horizon;
    lookup.entries.assign(static_cast<std::size_t>(horizon),
                          std::vector<Allocation>(static_cast<std::size_t>(grid.size())));

    for (int t = horizon - 1; t >= 0; --t) {
        std::vector<Allocation>& row = lookup.entries[static_cast<std::size_t>(t)];
        parallel_for(static_cast<std::size_t>(grid.size()), opts.threads, [&](std::size_t gi) {
            LmctsOptions node_opts = opts;
            node_opts.seed = Rng::derive(opts.seed, Stream::LmctsNode, static_cast<std::uint64_t>(t),
                                         gi)
                                 .next_u64();
            row[gi] = solve_node(model, t, static_cast<int>(gi), lookup, pool, util, cons,
                                 node_opts);
        });
        lookup.solved_from = t;
    }
    return lookup;
}

std::vector<double> savitzky_golay(std::span<const double> series, int window, int order) {
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("savitzky_golay: window must be odd and positive");
    if (order < 0 || order >= window)
        throw std::invalid_argument("savitzky_golay: order must satisfy 0 <= order < window");
    if (series.empty()) throw std::invalid_argument("savitzky_golay: empty series");

    const int n = static_cast<int>(series.size());
    const int half = window / 2;
    std::vector<double> out(static_cast<std::size_t>(n));

    // Per (left, right) truncation pattern, solve for the least-squares value
    // of the fitted polynomial at the window anchor. Interior points share one
    // symmetric pattern.
    std::vector<std::vector<double>> coeff_cache;
    std::vector<std::pair<int, int>> cache_keys;
    auto coefficients = [&](int left, int right) -> const std::vector<double>& {
        for (std::size_t i = 0; i < cache_keys.size(); ++i) {
            if (cache_keys[i] == std::make_pair(left, right)) return coeff_cache[i];
        }
        const int m = left + right + 1;
        const int eff_order = std::min(order, m - 1);
        Eigen::MatrixXd design(m, eff_order + 1);
        for (int j = 0; j < m; ++j) {
            const double x = static_cast<double>(j - left);
            double pw = 1.0;
            for (int q = 0; q <= eff_order; ++q) {
                design(j, q) = pw;
                pw *= x;
            }
        }
        // value at x=0 equals e0' (X'X)^-1 X' y
        Eigen::MatrixXd gram = design.transpose() * design;
        Eigen::VectorXd e0 = Eigen::VectorXd::Zero(eff_order + 1);
        e0[0] = 1.0;
        Eigen::VectorXd alpha = gram.ldlt().solve(e0);
        Eigen::VectorXd w = design * alpha;
        cache_keys.emplace_back(left, right);
        coeff_cache.emplace_back(w.data(), w.data() + w.size());
        return coeff_cache.back();
    };

    for (int i = 0; i < n; ++i) {
        const int left = std::min(half, i);
        const int right = std::min(half, n - 1 - i);
        const std::vector<double>& w = coefficients(left, right);
        double acc = 0.0;
        for (int j = 0; j < static_cast<int>(w.size()); ++j)
            acc += w[static_cast<std::size_t>(j)] * series[static_cast<std::size_t>(i - left + j)];
        out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

LookupTable smooth_lookup(const LookupTable& lookup, int window, int order,
                          const Constraints& cons) {
    if (!lookup.complete()) throw std::invalid_argument("smooth_lookup: lookup must be complete");
    LookupTable out = lookup;
    const int T = lookup.horizon;
    const int assets = lookup.grid.points.empty()
                           ? 0
                           : static_cast<int>(lookup.entries[0][0].w.size());

    for (int gi = 0; gi < lookup.grid.size(); ++gi) {
        // Filter each asset's weight series across time, cash included.
        std::vector<std::vector<double>> smoothed(static_cast<std::size_t>(assets));
        std::vector<double> series(static_cast<std::size_t>(T));
        for (int i = 0; i < assets; ++i) {
            for (int t = 0; t < T; ++t)
                series[static_cast<std::size_t>(t)] =
                    lookup.entries[static_cast<std::size_t>(t)][static_cast<std::size_t>(gi)]
                        .w[static_cast<std::size_t>(i)];
            smoothed[static_cast<std::size_t>(i)] = savitzky_golay(series, window, order);
        }
        for (int t = 0; t < T; ++t) {
            Allocation a;
            a.w.resize(static_cast<std::size_t>(assets));
            for (int i = 0; i < assets; ++i)
                a.w[static_cast<std::size_t>(i)] = smoothed[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];

            // Restore the allocation invariants: clip into the constraint box,
            // renormalize to unit budget; iterate in case renormalizing pushes
            // an entry back out of the box.
            bool ok = false;
            for (int pass = 0; pass < 5 && !ok; ++pass) {
                for (double& x : a.w) x = cons.clamp(x);
                const double s = a.sum();
                if (std::abs(s) < 0.1) break;  // degenerate, give up
                for (double& x : a.w) x /= s;
                ok = cons.feasible(a, 1e-9);
            }
            out.entries[static_cast<std::size_t>(t)][static_cast<std::size_t>(gi)] =
                ok ? a
                   : lookup.entries[static_cast<std::size_t>(t)][static_cast<std::size_t>(gi)];
        }
    }
    return out;
}

}  // namespace rsport::lmcts
