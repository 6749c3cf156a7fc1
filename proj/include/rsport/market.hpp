#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "rsport/rng.hpp"

namespace rsport {

/// Posterior probability vector over market regimes.
struct Belief {
    std::vector<double> p;

    Belief() = default;
    explicit Belief(std::vector<double> probs) : p(std::move(probs)) {}

    static Belief uniform(int n_regimes);
    static Belief point(int n_regimes, int regime);

    int size() const { return static_cast<int>(p.size()); }
    bool valid(double tol = 1e-12) const;
};

/// Portfolio weights over n risky assets plus an explicit cash entry (last).
/// The budget constraint sum(w) = 1 holds for every valid allocation.
struct Allocation {
    std::vector<double> w;

    Allocation() = default;
    explicit Allocation(std::vector<double> weights) : w(std::move(weights)) {}

    static Allocation all_cash(int n_risky);

    int n_risky() const { return static_cast<int>(w.size()) - 1; }
    double cash() const { return w.back(); }
    double& cash() { return w.back(); }
    double sum() const;
};

double l1_distance(const Allocation& a, const Allocation& b);
bool approx_equal(const Allocation& a, const Allocation& b, double tol = 1e-12);

/// Box bounds applied to every allocation entry, cash included. No-shorting is
/// [0, 1]; the shorting experiments use [-1, 1].
struct Constraints {
    double lo = 0.0;
    double hi = 1.0;

    static Constraints no_short() { return {0.0, 1.0}; }
    static Constraints shorting(double bound = 1.0) { return {-bound, bound}; }

    bool allows_shorting() const { return lo < 0.0; }
    bool feasible(const Allocation& a, double tol = 1e-9) const;
    double clamp(double x) const { return x < lo ? lo : (x > hi ? hi : x); }
};

/// All feasible allocations whose entries are multiples of `step`.
/// Cash is set to 1 - sum(risky) so the budget holds exactly.
std::vector<Allocation> enumerate_action_grid(int n_risky, double step, const Constraints& cons);

struct UtilitySpec {
    enum class Kind { Crra, Goal, SmoothedGoal };

    Kind kind = Kind::Crra;
    double gamma = -1.0;      // CRRA exponent; gamma = 0 means log utility
    double goal = 0.0;        // wealth target for the goal objectives
    double steepness = 0.01;  // logistic slope of the smoothed goal, per currency unit

    static UtilitySpec crra(double gamma);
    static UtilitySpec goal_indicator(double goal);
    static UtilitySpec smoothed_goal(double goal, double steepness = 0.01);
};

double utility(const UtilitySpec& spec, double wealth);
/// dU/dW where defined; used by the policy-gradient training loop.
double utility_derivative(const UtilitySpec& spec, double wealth);

/// Hidden-Markov regime model: per-regime Gaussian returns for the risky
/// assets, a regime transition matrix and a per-regime cash rate.
///
/// Covariances are factored once at construction (symmetric eigendecomposition
/// with a small negative-eigenvalue floor); non-PSD inputs are rejected here,
/// never at sampling time.
class RegimeModel {
public:
    RegimeModel(std::vector<Eigen::VectorXd> mu, std::vector<Eigen::MatrixXd> sigma,
                Eigen::MatrixXd trans, std::vector<double> rf);

    int n_risky() const { return n_risky_; }
    int n_regimes() const { return n_regimes_; }
    const Eigen::VectorXd& mu(int k) const { return mu_[k]; }
    const Eigen::MatrixXd& sigma(int k) const { return sigma_[k]; }
    const Eigen::MatrixXd& trans() const { return trans_; }
    double trans(int from, int to) const { return trans_(from, to); }
    double rf(int k) const { return rf_[k]; }
    const std::vector<double>& rf() const { return rf_; }

    /// log N(r; mu_k, sigma_k). Degenerate covariances evaluate on their
    /// support and return -inf off it.
    double log_pdf(int k, const Eigen::VectorXd& returns) const;

    void sample_returns(int k, Rng& rng, Eigen::VectorXd& out) const;
    int sample_transition(int k, Rng& rng) const;

private:
    int n_risky_ = 0;
    int n_regimes_ = 0;
    std::vector<Eigen::VectorXd> mu_;
    std::vector<Eigen::MatrixXd> sigma_;
    Eigen::MatrixXd trans_;
    std::vector<double> rf_;

    // Per-regime spectral data: sampling factor V*sqrt(lambda), pseudo-inverse,
    // log pseudo-determinant, rank, eigenbasis for the support check.
    std::vector<Eigen::MatrixXd> factor_;
    std::vector<Eigen::MatrixXd> basis_;
    std::vector<Eigen::VectorXd> inv_eig_;
    std::vector<Eigen::VectorXd> eig_;
    std::vector<double> log_pdet_;
    std::vector<int> rank_;
};

struct StepSample {
    Eigen::VectorXd returns;
    int next_regime = 0;
};

/// One period draw: returns from the current regime, then the Markov transition.
StepSample sample_step(const RegimeModel& model, int regime, Rng& rng);

/// Bayes update of the regime belief from one observed return vector.
/// On total likelihood underflow the prior is returned unchanged and
/// `underflow_counter`, when given, is incremented.
Belief update_belief(const RegimeModel& model, const Belief& prior, const Eigen::VectorXd& returns,
                     long* underflow_counter = nullptr);

/// The Bayes step on explicit log-likelihoods (log densities may be -inf).
Belief posterior_from_loglik(const Belief& prior, std::span<const double> loglik,
                             bool* underflowed = nullptr);

struct GrowResult {
    double wealth_end = 0.0;
    Allocation drifted;
    bool bankrupt = false;
};

/// One period of growth: wealth scales by w'(1+r) with cash earning rf, and
/// the weights drift with the realized returns. A non-positive growth factor
/// (possible only with shorting) raises the bankrupt flag; callers floor the
/// wealth and terminate the path.
GrowResult grow(double wealth, const Allocation& alloc, const Eigen::VectorXd& returns, double rf);

/// Post-trade wealth under the linear cost charged on the traded notional:
/// solves W+ = W- - c * W+ * |target - drifted|_1, i.e. W+ = W- / (1 + c|d|_1).
double rebalance(double wealth_end, const Allocation& drifted, const Allocation& target,
                 double cost_rate);

struct MarketState {
    int t = 0;
    int regime = 0;  // hidden from policies
    Belief belief;
    double wealth = 0.0;
    Allocation alloc;
};

}  // namespace rsport
