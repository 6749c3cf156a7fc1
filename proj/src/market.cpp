#include "rsport/market.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace rsport {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Relative floor below which covariance eigenvalues count as zero, and the
// rejection threshold for genuinely negative ones.
constexpr double kEigRankTol = 1e-12;
constexpr double kEigRepairTol = 1e-10;

}  // namespace

Belief Belief::uniform(int n_regimes) {
    Belief b;
    b.p.assign(static_cast<std::size_t>(n_regimes), 1.0 / n_regimes);
    return b;
}

Belief Belief::point(int n_regimes, int regime) {
    Belief b;
    b.p.assign(static_cast<std::size_t>(n_regimes), 0.0);
    b.p.at(static_cast<std::size_t>(regime)) = 1.0;
    return b;
}

bool Belief::valid(double tol) const {
    if (p.empty()) return false;
    double s = 0.0;
    for (double x : p) {
        if (!(x >= 0.0)) return false;
        s += x;
    }
    return std::abs(s - 1.0) <= tol;
}

Allocation Allocation::all_cash(int n_risky) {
    Allocation a;
    a.w.assign(static_cast<std::size_t>(n_risky) + 1, 0.0);
    a.w.back() = 1.0;
    return a;
}

double Allocation::sum() const {
    double s = 0.0;
    for (double x : w) s += x;
    return s;
}

double l1_distance(const Allocation& a, const Allocation& b) {
    if (a.w.size() != b.w.size()) throw std::invalid_argument("l1_distance: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.w.size(); ++i) s += std::abs(a.w[i] - b.w[i]);
    return s;
}

bool approx_equal(const Allocation& a, const Allocation& b, double tol) {
    if (a.w.size() != b.w.size()) return false;
    for (std::size_t i = 0; i < a.w.size(); ++i) {
        if (std::abs(a.w[i] - b.w[i]) > tol) return false;
    }
    return true;
}

bool Constraints::feasible(const Allocation& a, double tol) const {
    if (a.w.empty()) return false;
    for (double x : a.w) {
        if (x < lo - tol || x > hi + tol) return false;
    }
    return std::abs(a.sum() - 1.0) <= tol;
}

namespace {

void enumerate_compositions(int slots, int remaining, int k_lo, int k_hi, std::vector<int>& cur,
                            const std::function<void(const std::vector<int>&)>& emit) {
    if (slots == 1) {
        if (remaining >= k_lo && remaining <= k_hi) {
            cur.push_back(remaining);
            emit(cur);
            cur.pop_back();
        }
        return;
    }
    const int lo = std::max(k_lo, remaining - k_hi * (slots - 1));
    const int hi = std::min(k_hi, remaining - k_lo * (slots - 1));
    for (int k = lo; k <= hi; ++k) {
        cur.push_back(k);
        enumerate_compositions(slots - 1, remaining - k, k_lo, k_hi, cur, emit);
        cur.pop_back();
    }
}

}  // namespace

std::vector<Allocation> enumerate_action_grid(int n_risky, double step, const Constraints& cons) {
    if (step <= 0.0 || step > 1.0) throw std::invalid_argument("enumerate_action_grid: bad step");
    const int units = static_cast<int>(std::llround(1.0 / step));
    if (std::abs(units * step - 1.0) > 1e-9)
        throw std::invalid_argument("enumerate_action_grid: step must divide 1");
    const int k_lo = static_cast<int>(std::ceil(cons.lo * units - 1e-9));
    const int k_hi = static_cast<int>(std::floor(cons.hi * units + 1e-9));

    std::vector<Allocation> out;
    std::vector<int> cur;
    enumerate_compositions(n_risky + 1, units, k_lo, k_hi, cur, [&](const std::vector<int>& c) {
        Allocation a;
        a.w.resize(c.size());
        double risky_sum = 0.0;
        for (std::size_t i = 0; i + 1 < c.size(); ++i) {
            a.w[i] = c[i] * step;
            risky_sum += a.w[i];
        }
        a.w.back() = 1.0 - risky_sum;
        out.push_back(std::move(a));
    });
    return out;
}

UtilitySpec UtilitySpec::crra(double gamma) {
    UtilitySpec s;
    s.kind = Kind::Crra;
    s.gamma = gamma;
    return s;
}

UtilitySpec UtilitySpec::goal_indicator(double goal) {
    UtilitySpec s;
    s.kind = Kind::Goal;
    s.goal = goal;
    return s;
}

UtilitySpec UtilitySpec::smoothed_goal(double goal, double steepness) {
    UtilitySpec s;
    s.kind = Kind::SmoothedGoal;
    s.goal = goal;
    s.steepness = steepness;
    return s;
}

double utility(const UtilitySpec& spec, double wealth) {
    switch (spec.kind) {
        case UtilitySpec::Kind::Crra:
            if (!(wealth > 0.0)) throw std::domain_error("CRRA utility needs positive wealth");
            if (spec.gamma == 0.0) return std::log(wealth);
            return std::pow(wealth, spec.gamma) / spec.gamma;
        case UtilitySpec::Kind::Goal:
            return wealth >= spec.goal ? 1.0 : 0.0;
        case UtilitySpec::Kind::SmoothedGoal:
            return 1.0 / (1.0 + std::exp(-spec.steepness * (wealth - spec.goal)));
    }
    return 0.0;
}

double utility_derivative(const UtilitySpec& spec, double wealth) {
    switch (spec.kind) {
        case UtilitySpec::Kind::Crra:
            if (!(wealth > 0.0)) throw std::domain_error("CRRA utility needs positive wealth");
            if (spec.gamma == 0.0) return 1.0 / wealth;
            return std::pow(wealth, spec.gamma - 1.0);
        case UtilitySpec::Kind::Goal:
            return 0.0;
        case UtilitySpec::Kind::SmoothedGoal: {
            const double s = 1.0 / (1.0 + std::exp(-spec.steepness * (wealth - spec.goal)));
            return spec.steepness * s * (1.0 - s);
        }
    }
    return 0.0;
}

RegimeModel::RegimeModel(std::vector<Eigen::VectorXd> mu, std::vector<Eigen::MatrixXd> sigma,
                         Eigen::MatrixXd trans, std::vector<double> rf)
    : mu_(std::move(mu)), sigma_(std::move(sigma)), trans_(std::move(trans)), rf_(std::move(rf)) {
    n_regimes_ = static_cast<int>(mu_.size());
    if (n_regimes_ < 1) throw std::invalid_argument("RegimeModel: need at least one regime");
    n_risky_ = static_cast<int>(mu_[0].size());
    if (n_risky_ < 0) throw std::invalid_argument("RegimeModel: bad asset count");

    if (static_cast<int>(sigma_.size()) != n_regimes_)
        throw std::invalid_argument("RegimeModel: one covariance per regime required");
    if (rf_.size() == 1 && n_regimes_ > 1) rf_.assign(static_cast<std::size_t>(n_regimes_), rf_[0]);
    if (static_cast<int>(rf_.size()) != n_regimes_)
        throw std::invalid_argument("RegimeModel: rf must be scalar or one per regime");
    if (trans_.rows() != n_regimes_ || trans_.cols() != n_regimes_)
        throw std::invalid_argument("RegimeModel: transition matrix must be n_regimes x n_regimes");

    for (int k = 0; k < n_regimes_; ++k) {
        if (static_cast<int>(mu_[k].size()) != n_risky_)
            throw std::invalid_argument("RegimeModel: mu[" + std::to_string(k) + "] has wrong length");
        if (sigma_[k].rows() != n_risky_ || sigma_[k].cols() != n_risky_)
            throw std::invalid_argument("RegimeModel: cov[" + std::to_string(k) + "] has wrong shape");
        double row_sum = 0.0;
        for (int l = 0; l < n_regimes_; ++l) {
            if (trans_(k, l) < 0.0)
                throw std::invalid_argument("RegimeModel: negative transition probability in row " +
                                            std::to_string(k));
            row_sum += trans_(k, l);
        }
        if (std::abs(row_sum - 1.0) > 1e-12)
            throw std::invalid_argument("RegimeModel: transition row " + std::to_string(k) +
                                        " sums to " + std::to_string(row_sum));
    }

    factor_.resize(static_cast<std::size_t>(n_regimes_));
    basis_.resize(static_cast<std::size_t>(n_regimes_));
    inv_eig_.resize(static_cast<std::size_t>(n_regimes_));
    eig_.resize(static_cast<std::size_t>(n_regimes_));
    log_pdet_.assign(static_cast<std::size_t>(n_regimes_), 0.0);
    rank_.assign(static_cast<std::size_t>(n_regimes_), 0);

    for (int k = 0; k < n_regimes_; ++k) {
        Eigen::MatrixXd sym = 0.5 * (sigma_[k] + sigma_[k].transpose());
        if ((sigma_[k] - sym).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + sym.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("RegimeModel: cov[" + std::to_string(k) +
                                        "] is not symmetric");
        sigma_[k] = sym;

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
        if (es.info() != Eigen::Success)
            throw std::invalid_argument("RegimeModel: eigendecomposition failed for cov[" +
                                        std::to_string(k) + "]");
        Eigen::VectorXd lambda = es.eigenvalues();
        const double scale = std::max(1.0, lambda.size() > 0 ? lambda.cwiseAbs().maxCoeff() : 0.0);
        for (int i = 0; i < lambda.size(); ++i) {
            if (lambda[i] < -kEigRepairTol * scale)
                throw std::invalid_argument(
                    "RegimeModel: cov[" + std::to_string(k) + "] has negative eigenvalue " +
                    std::to_string(lambda[i]));
            if (lambda[i] < 0.0) lambda[i] = 0.0;  // repair roundoff-level negatives
        }
        eig_[k] = lambda;
        basis_[k] = es.eigenvectors();
        Eigen::VectorXd sqrt_l = lambda.cwiseSqrt();
        factor_[k] = basis_[k] * sqrt_l.asDiagonal();

        inv_eig_[k].resize(lambda.size());
        double log_pdet = 0.0;
        int rank = 0;
        const double rank_tol = kEigRankTol * scale;
        for (int i = 0; i < lambda.size(); ++i) {
            if (lambda[i] > rank_tol) {
                inv_eig_[k][i] = 1.0 / lambda[i];
                log_pdet += std::log(lambda[i]);
                ++rank;
            } else {
                inv_eig_[k][i] = 0.0;
            }
        }
        log_pdet_[k] = log_pdet;
        rank_[k] = rank;
    }
}

double RegimeModel::log_pdf(int k, const Eigen::VectorXd& returns) const {
    const Eigen::VectorXd d = returns - mu_[k];
    const Eigen::VectorXd y = basis_[k].transpose() * d;
    double quad = 0.0;
    double null_energy = 0.0;
    for (int i = 0; i < y.size(); ++i) {
        if (inv_eig_[k][i] > 0.0) {
            quad += y[i] * y[i] * inv_eig_[k][i];
        } else {
            null_energy += y[i] * y[i];
        }
    }
    if (null_energy > 1e-12 * (1.0 + d.squaredNorm()))
        return -std::numeric_limits<double>::infinity();
    return -0.5 * (quad + log_pdet_[k] + rank_[k] * kLog2Pi);
}

void RegimeModel::sample_returns(int k, Rng& rng, Eigen::VectorXd& out) const {
    Eigen::VectorXd z(n_risky_);
    for (int i = 0; i < n_risky_; ++i) z[i] = rng.normal();
    out = mu_[k] + factor_[k] * z;
}

int RegimeModel::sample_transition(int k, Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int l = 0; l + 1 < n_regimes_; ++l) {
        acc += trans_(k, l);
        if (u < acc) return l;
    }
    return n_regimes_ - 1;
}

StepSample sample_step(const RegimeModel& model, int regime, Rng& rng) {
    if (regime < 0 || regime >= model.n_regimes())
        throw std::invalid_argument("sample_step: regime out of range");
    StepSample s;
    model.sample_returns(regime, rng, s.returns);
    s.next_regime = model.sample_transition(regime, rng);
    return s;
}

Belief posterior_from_loglik(const Belief& prior, std::span<const double> loglik,
                             bool* underflowed) {
    if (prior.p.size() != loglik.size())
        throw std::invalid_argument("posterior_from_loglik: dimension mismatch");
    if (underflowed) *underflowed = false;

    double max_ll = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < loglik.size(); ++k) {
        if (prior.p[k] > 0.0 && loglik[k] > max_ll) max_ll = loglik[k];
    }
    if (!std::isfinite(max_ll)) {
        if (underflowed) *underflowed = true;
        return prior;
    }

    Belief post;
    post.p.resize(prior.p.size());
    double total = 0.0;
    for (std::size_t k = 0; k < loglik.size(); ++k) {
        const double w =
            prior.p[k] > 0.0 && std::isfinite(loglik[k]) ? prior.p[k] * std::exp(loglik[k] - max_ll) : 0.0;
        post.p[k] = w;
        total += w;
    }
    if (!(total > 0.0) || !std::isfinite(total)) {
        if (underflowed) *underflowed = true;
        return prior;
    }
    for (double& x : post.p) x /= total;
    return post;
}

Belief update_belief(const RegimeModel& model, const Belief& prior, const Eigen::VectorXd& returns,
                     long* underflow_counter) {
    std::vector<double> loglik(static_cast<std::size_t>(model.n_regimes()));
    for (int k = 0; k < model.n_regimes(); ++k) {
        loglik[static_cast<std::size_t>(k)] = prior.p[static_cast<std::size_t>(k)] > 0.0
                                                  ? model.log_pdf(k, returns)
                                                  : -std::numeric_limits<double>::infinity();
    }
    bool underflow = false;
    Belief post = posterior_from_loglik(prior, loglik, &underflow);
    if (underflow && underflow_counter) ++(*underflow_counter);
    return post;
}

GrowResult grow(double wealth, const Allocation& alloc, const Eigen::VectorXd& returns, double rf) {
    const int n = alloc.n_risky();
    if (returns.size() != n) throw std::invalid_argument("grow: returns dimension mismatch");

    GrowResult out;
    double growth = 0.0;
    for (int i = 0; i < n; ++i) growth += alloc.w[static_cast<std::size_t>(i)] * (1.0 + returns[i]);
    growth += alloc.cash() * (1.0 + rf);

    out.wealth_end = wealth * growth;
    if (!(growth > 0.0)) {
        out.bankrupt = true;
        out.drifted = Allocation::all_cash(n);
        return out;
    }
    out.drifted.w.resize(alloc.w.size());
    for (int i = 0; i < n; ++i)
        out.drifted.w[static_cast<std::size_t>(i)] =
            alloc.w[static_cast<std::size_t>(i)] * (1.0 + returns[i]) / growth;
    out.drifted.w.back() = alloc.cash() * (1.0 + rf) / growth;
    return out;
}

double rebalance(double wealth_end, const Allocation& drifted, const Allocation& target,
                 double cost_rate) {
    if (cost_rate < 0.0) throw std::invalid_argument("rebalance: negative cost rate");
    if (cost_rate == 0.0) return wealth_end;
    return wealth_end / (1.0 + cost_rate * l1_distance(target, drifted));
}

}  // namespace rsport
