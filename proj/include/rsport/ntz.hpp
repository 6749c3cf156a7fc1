#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsport/dp.hpp"
#include "rsport/grid.hpp"
#include "rsport/lmcts.hpp"
#include "rsport/market.hpp"

namespace rsport::ntz {

struct Architecture {
    int n_regimes = 2;
    int n_risky = 1;
    int hidden = 32;
    bool wealth_feature = false;
    bool center_head = false;

    int input_dim() const { return n_regimes + (wealth_feature ? 1 : 0); }
};

/// Network weights as one flat vector with a named block map: a shared tanh
/// hidden layer, softplus-style width heads f_u / f_l, and an optional linear
/// center-adjustment head.
struct NtzParams {
    Architecture arch;
    std::vector<double> values;

    struct Block {
        std::string name;
        std::size_t offset = 0;
        std::size_t count = 0;
    };

    std::vector<Block> blocks() const;
    std::span<double> block(std::string_view name);
    std::span<const double> block(std::string_view name) const;
    std::size_t size() const { return values.size(); }

    static NtzParams init(const Architecture& arch, double init_band, Rng& rng);
};

/// Width nonlinearity: softplus shifted so a zero preactivation yields a zero
/// band (zero-weight heads collapse the zone exactly).
double width_from_preactivation(double z);
double width_preactivation_for(double width);

struct Zone {
    std::vector<double> center;  // base + center-head shift, per risky asset
    std::vector<double> lower;
    std::vector<double> upper;
};

Zone zone(const NtzParams& params, const Allocation& base, std::span<const double> features);

struct Projection {
    Allocation target;
    std::vector<signed char> clamp_state;  // per risky asset: -1 low, 0 inside, +1 high
    int secondary = 0;                     // -1 cash hit its lower bound, +1 upper, 0 none
    bool residual_violation = false;       // zone headroom could not absorb the cash excess
};

/// Clamp each risky weight into the (box-intersected) zone; cash absorbs the
/// residual so the budget holds exactly. A cash entry outside the active
/// bounds triggers a proportional redistribution within the zone headroom.
Projection project_to_zone(const Allocation& drifted, const Zone& zone, const Constraints& cons);

/// Frictionless table the zone is centered on.
struct BasePolicy {
    enum class Source { Dp, Lmcts };
    Source source = Source::Dp;
    const dp::PolicyTable* dp_table = nullptr;
    const lmcts::LookupTable* lmcts_table = nullptr;

    int horizon() const;
    const BeliefGrid& grid() const;
    const Allocation& at(int t, int grid_index) const;
};

struct TrainConfig {
    int batch = 256;
    int epochs = 30;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double cost_rate = 0.0;
    UtilitySpec utility = UtilitySpec::crra(-1.0);
    Constraints constraints = Constraints::no_short();
    std::uint64_t seed = 0;
    bool wealth_feature = false;
    bool center_head = false;
    int hidden = 32;
    double init_band = 0.02;
    int train_paths = 4096;
    int val_paths = 1024;
    double initial_wealth = 1000.0;
    Belief initial_belief;
    double wealth_clip = 5.0;        // wealth feature = clip(W / W0, 0, wealth_clip)
    double bankruptcy_floor_rel = 1e-6;
    int threads = 1;
};

/// One simulated market path with the policy-independent pieces precomputed:
/// regimes, returns, filtered beliefs and the snapped base-policy index.
struct PathData {
    std::vector<int> regimes;
    std::vector<double> rf;  // cash rate of the realized regime, per step
    std::vector<Eigen::VectorXd> returns;
    std::vector<Belief> beliefs;
    std::vector<int> base_index;
};

PathData make_path(const RegimeModel& model, const BeliefGrid& grid, int horizon,
                   const Belief& initial, Rng& rng);

struct UnrollDebug {
    long clamp_events = 0;
    long secondary_clamp_events = 0;
    long bankruptcies = 0;
    std::vector<std::uint64_t> clamp_signature;  // per-path activation pattern
};

/// Mean of -U(terminal wealth) over the batch, applying
/// zone -> project -> rebalance at every step. The goal objective trains on
/// its smoothed surrogate.
double unroll_loss(const NtzParams& params, const BasePolicy& base, std::span<const PathData> paths,
                   const TrainConfig& cfg, UnrollDebug* debug = nullptr);

/// Reverse accumulation of d(unroll_loss)/d(params) through the unrolled
/// horizon. Zone clamps use the pass-through subgradient: inside the zone the
/// adjoint follows the drifted weight, at a boundary it flows into the width
/// and center heads.
std::vector<double> gradient(const NtzParams& params, const BasePolicy& base,
                             std::span<const PathData> paths, const TrainConfig& cfg,
                             UnrollDebug* debug = nullptr);

struct TrainReport {
    std::vector<double> val_loss;  // per epoch
    int best_epoch = -1;
    double best_val_loss = 0.0;
    int lr_restarts = 0;
    long rejected_batches = 0;
};

/// SGD with momentum over the unrolled loss; returns the best-validation
/// parameters. Divergence halves the learning rate and restarts from the last
/// checkpoint, at most three times.
NtzParams train(const BasePolicy& base, const RegimeModel& model, const TrainConfig& cfg,
                TrainReport* report = nullptr);

std::vector<double> make_features(const Architecture& arch, const Belief& belief, double wealth,
                                  double w0, double clip);

/// Cost-free adoption of the zone center at t = 0 (evaluation-side entry).
Allocation initial_action(const NtzParams& params, const Allocation& base,
                          std::span<const double> features, const Constraints& cons);

/// Zone policy step for t >= 1 (evaluation-side entry; same arithmetic as the
/// training unroll).
Projection step_action(const NtzParams& params, const Allocation& base,
                       std::span<const double> features, const Allocation& drifted,
                       const Constraints& cons);

}  // namespace rsport::ntz
