#include "rsport/ntz.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "rsport/threading.hpp"

namespace rsport::ntz {

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Layout {
    int in = 0, hidden = 0, n = 0;
    bool center = false;
    std::size_t w1 = 0, b1 = 0, wu = 0, bu = 0, wl = 0, bl = 0, wc = 0, bc = 0, total = 0;
};

Layout layout_of(const Architecture& a) {
    Layout L;
    L.in = a.input_dim();
    L.hidden = a.hidden;
    L.n = a.n_risky;
    L.center = a.center_head;
    std::size_t off = 0;
    L.w1 = off, off += static_cast<std::size_t>(L.hidden) * L.in;
    L.b1 = off, off += static_cast<std::size_t>(L.hidden);
    L.wu = off, off += static_cast<std::size_t>(L.n) * L.hidden;
    L.bu = off, off += static_cast<std::size_t>(L.n);
    L.wl = off, off += static_cast<std::size_t>(L.n) * L.hidden;
    L.bl = off, off += static_cast<std::size_t>(L.n);
    L.wc = off;
    if (L.center) off += static_cast<std::size_t>(L.n) * L.hidden;
    L.bc = off;
    if (L.center) off += static_cast<std::size_t>(L.n);
    L.total = off;
    return L;
}

double width_prime(double z) { return z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : 0.0; }

struct NetTrace {
    std::vector<double> x, h, zu, zl, zc, fu, fl;
};

void forward_net(const NtzParams& p, const Layout& L, std::span<const double> x, NetTrace& tr) {
    const double* v = p.values.data();
    tr.x.assign(x.begin(), x.end());
    tr.h.resize(static_cast<std::size_t>(L.hidden));
    for (int j = 0; j < L.hidden; ++j) {
        double z = v[L.b1 + static_cast<std::size_t>(j)];
        const double* row = v + L.w1 + static_cast<std::size_t>(j) * L.in;
        for (int i = 0; i < L.in; ++i) z += row[i] * x[static_cast<std::size_t>(i)];
        tr.h[static_cast<std::size_t>(j)] = std::tanh(z);
    }
    auto head = [&](std::size_t w_off, std::size_t b_off, std::vector<double>& z_out) {
        z_out.resize(static_cast<std::size_t>(L.n));
        for (int i = 0; i < L.n; ++i) {
            double z = v[b_off + static_cast<std::size_t>(i)];
            const double* row = v + w_off + static_cast<std::size_t>(i) * L.hidden;
            for (int j = 0; j < L.hidden; ++j) z += row[j] * tr.h[static_cast<std::size_t>(j)];
            z_out[static_cast<std::size_t>(i)] = z;
        }
    };
    head(L.wu, L.bu, tr.zu);
    head(L.wl, L.bl, tr.zl);
    if (L.center) {
        head(L.wc, L.bc, tr.zc);
    } else {
        tr.zc.assign(static_cast<std::size_t>(L.n), 0.0);
    }
    tr.fu.resize(static_cast<std::size_t>(L.n));
    tr.fl.resize(static_cast<std::size_t>(L.n));
    for (int i = 0; i < L.n; ++i) {
        tr.fu[static_cast<std::size_t>(i)] = width_from_preactivation(tr.zu[static_cast<std::size_t>(i)]);
        tr.fl[static_cast<std::size_t>(i)] = width_from_preactivation(tr.zl[static_cast<std::size_t>(i)]);
    }
}

Zone assemble_zone(const NetTrace& tr, const Allocation& base, int n) {
    Zone z;
    z.center.resize(static_cast<std::size_t>(n));
    z.lower.resize(static_cast<std::size_t>(n));
    z.upper.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double c = base.w[static_cast<std::size_t>(i)] + tr.zc[static_cast<std::size_t>(i)];
        z.center[static_cast<std::size_t>(i)] = c;
        z.lower[static_cast<std::size_t>(i)] = c - tr.fl[static_cast<std::size_t>(i)];
        z.upper[static_cast<std::size_t>(i)] = c + tr.fu[static_cast<std::size_t>(i)];
    }
    return z;
}

UtilitySpec training_utility(const UtilitySpec& spec) {
    if (spec.kind == UtilitySpec::Kind::Goal)
        return UtilitySpec::smoothed_goal(spec.goal, spec.steepness);
    return spec;
}

struct StepTrace {
    NetTrace net;
    Zone zn;
    Projection proj;
    Allocation drifted;  // incl cash; at t = 0 the center-with-residual-cash pseudo position
    double l1 = 0.0, phi = 1.0;
};

struct PathForward {
    double terminal_wealth = 0.0;
    bool bankrupt = false;
    std::vector<StepTrace> steps;   // action formation at t = 0..T-1
    std::vector<double> g;          // growth factor per period
    std::vector<double> wplus;      // post-trade wealth, t = 0..T-1
    std::vector<double> wminus;     // pre-trade wealth, index t = 1..T
    std::uint64_t signature = 1469598103934665603ULL;
    long clamp_events = 0;
    long secondary_events = 0;
};

void note_signature(PathForward& f, std::uint64_t v) {
    f.signature = (f.signature ^ v) * 1099511628211ULL;
}

void run_forward(const NtzParams& params, const Layout& L, const BasePolicy& base,
                 const PathData& path, const TrainConfig& cfg, bool keep_trace, PathForward& out) {
    const int T = static_cast<int>(path.returns.size());
    const int n = L.n;
    const double w0 = cfg.initial_wealth;
    const double floor_wealth = cfg.bankruptcy_floor_rel * w0;

    out.steps.clear();
    out.steps.resize(keep_trace ? static_cast<std::size_t>(T) : 1);
    out.g.assign(static_cast<std::size_t>(T), 0.0);
    out.wplus.assign(static_cast<std::size_t>(T), 0.0);
    out.wminus.assign(static_cast<std::size_t>(T) + 1, 0.0);
    out.bankrupt = false;
    out.signature = 1469598103934665603ULL;
    out.clamp_events = 0;
    out.secondary_events = 0;

    Allocation x;  // current post-trade allocation
    double wplus = w0;
    {
        StepTrace& tr = out.steps[0];
        const std::vector<double> feats =
            make_features(params.arch, path.beliefs[0], w0, w0, cfg.wealth_clip);
        forward_net(params, L, feats, tr.net);
        tr.zn = assemble_zone(tr.net, base.at(0, path.base_index[0]), n);
        tr.drifted.w.resize(static_cast<std::size_t>(n) + 1);
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            tr.drifted.w[static_cast<std::size_t>(i)] = tr.zn.center[static_cast<std::size_t>(i)];
            s += tr.zn.center[static_cast<std::size_t>(i)];
        }
        tr.drifted.w.back() = 1.0 - s;
        tr.proj = project_to_zone(tr.drifted, tr.zn, cfg.constraints);
        x = tr.proj.target;
        tr.l1 = 0.0;
        tr.phi = 1.0;
        for (int i = 0; i < n; ++i) {
            if (tr.proj.clamp_state[static_cast<std::size_t>(i)] != 0) {
                ++out.clamp_events;
                note_signature(out, static_cast<std::uint64_t>(7 + i * 4 +
                                                               tr.proj.clamp_state[static_cast<std::size_t>(i)]));
            }
        }
        if (tr.proj.secondary != 0) {
            ++out.secondary_events;
            note_signature(out, static_cast<std::uint64_t>(3 + tr.proj.secondary));
        }
    }
    out.wplus[0] = wplus;

    for (int t = 0; t < T; ++t) {
        const Eigen::VectorXd& r = path.returns[static_cast<std::size_t>(t)];
        double g = 0.0;
        for (int i = 0; i < n; ++i) g += x.w[static_cast<std::size_t>(i)] * (1.0 + r[i]);
        g += x.cash() * (1.0 + path.rf[static_cast<std::size_t>(t)]);
        out.g[static_cast<std::size_t>(t)] = g;
        if (!(g > 0.0)) {
            out.bankrupt = true;
            out.terminal_wealth = floor_wealth;
            note_signature(out, 0x9e3779b9ULL + static_cast<std::uint64_t>(t));
            return;
        }
        const double wminus = wplus * g;
        out.wminus[static_cast<std::size_t>(t) + 1] = wminus;
        if (t + 1 == T) {
            out.terminal_wealth = wminus;
            break;
        }

        Allocation drifted;
        drifted.w.resize(static_cast<std::size_t>(n) + 1);
        for (int i = 0; i < n; ++i)
            drifted.w[static_cast<std::size_t>(i)] =
                x.w[static_cast<std::size_t>(i)] * (1.0 + r[i]) / g;
        drifted.w.back() = x.cash() * (1.0 + path.rf[static_cast<std::size_t>(t)]) / g;

        StepTrace& tr = out.steps[keep_trace ? static_cast<std::size_t>(t) + 1 : 0];
        const std::vector<double> feats = make_features(
            params.arch, path.beliefs[static_cast<std::size_t>(t) + 1], wminus, w0, cfg.wealth_clip);
        forward_net(params, L, feats, tr.net);
        tr.zn = assemble_zone(tr.net, base.at(t + 1, path.base_index[static_cast<std::size_t>(t) + 1]), n);
        tr.drifted = drifted;
        tr.proj = project_to_zone(drifted, tr.zn, cfg.constraints);

        double l1 = 0.0;
        for (int i = 0; i <= n; ++i)
            l1 += std::abs(tr.proj.target.w[static_cast<std::size_t>(i)] -
                           drifted.w[static_cast<std::size_t>(i)]);
        tr.l1 = l1;
        tr.phi = 1.0 / (1.0 + cfg.cost_rate * l1);
        wplus = wminus * tr.phi;
        out.wplus[static_cast<std::size_t>(t) + 1] = wplus;
        x = tr.proj.target;

        for (int i = 0; i < n; ++i) {
            const int st = tr.proj.clamp_state[static_cast<std::size_t>(i)];
            if (st != 0) {
                ++out.clamp_events;
                note_signature(out, static_cast<std::uint64_t>((t + 1) * 131 + i * 4 + st + 2));
            }
        }
        if (tr.proj.secondary != 0) {
            ++out.secondary_events;
            note_signature(out, static_cast<std::uint64_t>((t + 1) * 131 + 3 + tr.proj.secondary));
        }
    }
}

// Backward through the projection of one step. `ax` is the adjoint of the
// post-trade allocation (cash last); pass-through coordinates flow to the
// drifted adjoint (or to the center at t = 0), clamped ones into the heads.
void project_backward(const StepTrace& tr, const Constraints& cons, std::vector<double>& ax,
                      std::vector<double>* adrift, bool drift_is_center,
                      std::vector<double>& a_center, std::vector<double>& a_fu,
                      std::vector<double>& a_fl) {
    const int n = static_cast<int>(tr.zn.center.size());
    const double acash = ax[static_cast<std::size_t>(n)];
    for (int i = 0; i < n; ++i) ax[static_cast<std::size_t>(i)] -= acash;

    for (int i = 0; i < n; ++i) {
        const double a = ax[static_cast<std::size_t>(i)];
        if (a == 0.0) continue;
        const int st = tr.proj.clamp_state[static_cast<std::size_t>(i)];
        if (st == 0) {
            if (drift_is_center) {
                a_center[static_cast<std::size_t>(i)] += a;
            } else if (adrift) {
                (*adrift)[static_cast<std::size_t>(i)] += a;
            }
        } else if (st < 0) {
            const double bound = tr.zn.lower[static_cast<std::size_t>(i)];
            if (bound >= cons.lo && bound <= cons.hi) {
                a_center[static_cast<std::size_t>(i)] += a;
                a_fl[static_cast<std::size_t>(i)] -= a;
            }
        } else {
            const double bound = tr.zn.upper[static_cast<std::size_t>(i)];
            if (bound >= cons.lo && bound <= cons.hi) {
                a_center[static_cast<std::size_t>(i)] += a;
                a_fu[static_cast<std::size_t>(i)] += a;
            }
        }
    }
}

// Backward through the network of one step; accumulates parameter gradients
// and returns the adjoint of the wealth feature.
double net_backward(const NtzParams& p, const Layout& L, const NetTrace& tr,
                    const std::vector<double>& a_center, const std::vector<double>& a_fu,
                    const std::vector<double>& a_fl, std::span<double> grad) {
    const double* v = p.values.data();
    std::vector<double> a_h(static_cast<std::size_t>(L.hidden), 0.0);

    auto head_backward = [&](std::size_t w_off, std::size_t b_off, const std::vector<double>& a_z) {
        for (int i = 0; i < L.n; ++i) {
            const double az = a_z[static_cast<std::size_t>(i)];
            if (az == 0.0) continue;
            grad[b_off + static_cast<std::size_t>(i)] += az;
            const double* row = v + w_off + static_cast<std::size_t>(i) * L.hidden;
            double* grow = grad.data() + w_off + static_cast<std::size_t>(i) * L.hidden;
            for (int j = 0; j < L.hidden; ++j) {
                grow[j] += az * tr.h[static_cast<std::size_t>(j)];
                a_h[static_cast<std::size_t>(j)] += az * row[j];
            }
        }
    };

    std::vector<double> a_zu(static_cast<std::size_t>(L.n)), a_zl(static_cast<std::size_t>(L.n));
    for (int i = 0; i < L.n; ++i) {
        a_zu[static_cast<std::size_t>(i)] =
            a_fu[static_cast<std::size_t>(i)] * width_prime(tr.zu[static_cast<std::size_t>(i)]);
        a_zl[static_cast<std::size_t>(i)] =
            a_fl[static_cast<std::size_t>(i)] * width_prime(tr.zl[static_cast<std::size_t>(i)]);
    }
    head_backward(L.wu, L.bu, a_zu);
    head_backward(L.wl, L.bl, a_zl);
    if (L.center) head_backward(L.wc, L.bc, a_center);

    double a_wf = 0.0;
    const int wf_index = L.center || true ? L.in - 1 : 0;  // wealth feature is the last input
    for (int j = 0; j < L.hidden; ++j) {
        const double ah = a_h[static_cast<std::size_t>(j)];
        if (ah == 0.0) continue;
        const double hj = tr.h[static_cast<std::size_t>(j)];
        const double az1 = ah * (1.0 - hj * hj);
        grad[L.b1 + static_cast<std::size_t>(j)] += az1;
        const double* row = v + L.w1 + static_cast<std::size_t>(j) * L.in;
        double* grow = grad.data() + L.w1 + static_cast<std::size_t>(j) * L.in;
        for (int i = 0; i < L.in; ++i) {
            grow[i] += az1 * tr.x[static_cast<std::size_t>(i)];
        }
        a_wf += az1 * row[wf_index];
    }
    return a_wf;
}

void run_backward(const NtzParams& params, const Layout& L, const PathData& path,
                  const TrainConfig& cfg, const PathForward& fwd, const UtilitySpec& util,
                  std::span<double> grad) {
    if (fwd.bankrupt) return;  // terminal wealth pinned at the floor, flat locally
    const int T = static_cast<int>(path.returns.size());
    const int n = L.n;
    const double w0 = cfg.initial_wealth;

    double a_w = -utility_derivative(util, fwd.terminal_wealth);  // adjoint of wminus[t+1]
    std::vector<double> a_d(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> ax(static_cast<std::size_t>(n) + 1);
    std::vector<double> a_center(static_cast<std::size_t>(n)), a_fu(static_cast<std::size_t>(n)),
        a_fl(static_cast<std::size_t>(n));

    for (int t = T - 1; t >= 0; --t) {
        const Eigen::VectorXd& r = path.returns[static_cast<std::size_t>(t)];
        const double rf = path.rf[static_cast<std::size_t>(t)];
        const double g = fwd.g[static_cast<std::size_t>(t)];
        const bool has_next_trade = t + 1 < T;
        const StepTrace* next_tr =
            has_next_trade ? &fwd.steps[static_cast<std::size_t>(t) + 1] : nullptr;

        double a_wplus = a_w * g;
        double a_g = a_w * fwd.wplus[static_cast<std::size_t>(t)];
        if (has_next_trade) {
            // d_{t+1,j} = x_{t,j} (1+r_j) / g
            for (int j = 0; j <= n; ++j)
                a_g += a_d[static_cast<std::size_t>(j)] *
                       (-next_tr->drifted.w[static_cast<std::size_t>(j)] / g);
        }
        for (int i = 0; i < n; ++i) {
            ax[static_cast<std::size_t>(i)] =
                a_g * (1.0 + r[i]) +
                (has_next_trade ? a_d[static_cast<std::size_t>(i)] * (1.0 + r[i]) / g : 0.0);
        }
        ax[static_cast<std::size_t>(n)] =
            a_g * (1.0 + rf) +
            (has_next_trade ? a_d[static_cast<std::size_t>(n)] * (1.0 + rf) / g : 0.0);

        const StepTrace& tr = fwd.steps[static_cast<std::size_t>(t)];
        std::fill(a_center.begin(), a_center.end(), 0.0);
        std::fill(a_fu.begin(), a_fu.end(), 0.0);
        std::fill(a_fl.begin(), a_fl.end(), 0.0);

        if (t >= 1) {
            const double wminus = fwd.wminus[static_cast<std::size_t>(t)];
            const double phi = tr.phi;
            double a_w_new = a_wplus * phi;
            const double a_l1 = a_wplus * wminus * (-cfg.cost_rate) * phi * phi;

            std::fill(a_d.begin(), a_d.end(), 0.0);
            if (a_l1 != 0.0) {
                for (int j = 0; j <= n; ++j) {
                    const double diff = tr.proj.target.w[static_cast<std::size_t>(j)] -
                                        tr.drifted.w[static_cast<std::size_t>(j)];
                    const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    ax[static_cast<std::size_t>(j)] += a_l1 * s;
                    a_d[static_cast<std::size_t>(j)] -= a_l1 * s;
                }
            }
            project_backward(tr, cfg.constraints, ax, &a_d, false, a_center, a_fu, a_fl);
            const double a_wf = net_backward(params, L, tr.net, a_center, a_fu, a_fl, grad);
            if (params.arch.wealth_feature && a_wf != 0.0) {
                const double ratio = wminus / w0;
                if (ratio > 0.0 && ratio < cfg.wealth_clip) a_w_new += a_wf / w0;
            }
            a_w = a_w_new;
        } else {
            // t = 0: cost-free adoption of the projected center; wplus[0] is a
            // constant, so only the network receives adjoints.
            project_backward(tr, cfg.constraints, ax, nullptr, true, a_center, a_fu, a_fl);
            net_backward(params, L, tr.net, a_center, a_fu, a_fl, grad);
        }
    }
}

}  // namespace

double width_from_preactivation(double z) {
    if (z <= 0.0) return 0.0;
    return z + std::log1p(std::exp(-z)) - kLn2;
}

double width_preactivation_for(double width) {
    if (width < 0.0) throw std::invalid_argument("width_preactivation_for: negative width");
    return std::log(2.0 * std::exp(width) - 1.0);
}

std::vector<NtzParams::Block> NtzParams::blocks() const {
    const Layout L = layout_of(arch);
    std::vector<Block> out = {
        {"hidden.weight", L.w1, static_cast<std::size_t>(L.hidden) * L.in},
        {"hidden.bias", L.b1, static_cast<std::size_t>(L.hidden)},
        {"upper.weight", L.wu, static_cast<std::size_t>(L.n) * L.hidden},
        {"upper.bias", L.bu, static_cast<std::size_t>(L.n)},
        {"lower.weight", L.wl, static_cast<std::size_t>(L.n) * L.hidden},
        {"lower.bias", L.bl, static_cast<std::size_t>(L.n)},
    };
    if (arch.center_head) {
        out.push_back({"center.weight", L.wc, static_cast<std::size_t>(L.n) * L.hidden});
        out.push_back({"center.bias", L.bc, static_cast<std::size_t>(L.n)});
    }
    return out;
}

std::span<double> NtzParams::block(std::string_view name) {
    for (const Block& b : blocks()) {
        if (b.name == name) return {values.data() + b.offset, b.count};
    }
    throw std::invalid_argument("NtzParams: unknown block " + std::string(name));
}

std::span<const double> NtzParams::block(std::string_view name) const {
    for (const Block& b : blocks()) {
        if (b.name == name) return {values.data() + b.offset, b.count};
    }
    throw std::invalid_argument("NtzParams: unknown block " + std::string(name));
}

NtzParams NtzParams::init(const Architecture& arch, double init_band, Rng& rng) {
    NtzParams p;
    p.arch = arch;
    const Layout L = layout_of(arch);
    p.values.assign(L.total, 0.0);

    const double hidden_scale = 0.5 / std::sqrt(static_cast<double>(L.in));
    for (std::size_t i = 0; i < static_cast<std::size_t>(L.hidden) * L.in; ++i)
        p.values[L.w1 + i] = hidden_scale * (2.0 * rng.uniform() - 1.0);
    const double head_scale = 0.01;
    for (std::size_t i = 0; i < static_cast<std::size_t>(L.n) * L.hidden; ++i) {
        p.values[L.wu + i] = head_scale * (2.0 * rng.uniform() - 1.0);
        p.values[L.wl + i] = head_scale * (2.0 * rng.uniform() - 1.0);
    }
    const double band_bias = width_preactivation_for(init_band);
    for (int i = 0; i < L.n; ++i) {
        p.values[L.bu + static_cast<std::size_t>(i)] = band_bias;
        p.values[L.bl + static_cast<std::size_t>(i)] = band_bias;
    }
    // center head starts at zero: the zone is centered on the base policy
    return p;
}

Zone zone(const NtzParams& params, const Allocation& base, std::span<const double> features) {
    const Layout L = layout_of(params.arch);
    if (static_cast<int>(features.size()) != L.in)
        throw std::invalid_argument("zone: feature dimension mismatch");
    if (base.n_risky() != L.n) throw std::invalid_argument("zone: base dimension mismatch");
    NetTrace tr;
    forward_net(params, L, features, tr);
    return assemble_zone(tr, base, L.n);
}

Projection project_to_zone(const Allocation& drifted, const Zone& zn, const Constraints& cons) {
    const int n = static_cast<int>(zn.lower.size());
    if (drifted.n_risky() != n)
        throw std::invalid_argument("project_to_zone: dimension mismatch");

    Projection out;
    out.clamp_state.assign(static_cast<std::size_t>(n), 0);
    out.target.w.resize(static_cast<std::size_t>(n) + 1);

    double risky_sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double lo_i = cons.clamp(zn.lower[static_cast<std::size_t>(i)]);
        const double hi_i = cons.clamp(zn.upper[static_cast<std::size_t>(i)]);
        if (lo_i > hi_i + 1e-12)
            throw std::invalid_argument("project_to_zone: lower bound above upper bound");
        double x = drifted.w[static_cast<std::size_t>(i)];
        if (x < lo_i) {
            x = lo_i;
            out.clamp_state[static_cast<std::size_t>(i)] = -1;
        } else if (x > hi_i) {
            x = hi_i;
            out.clamp_state[static_cast<std::size_t>(i)] = +1;
        }
        out.target.w[static_cast<std::size_t>(i)] = x;
        risky_sum += x;
    }
    double cash = 1.0 - risky_sum;

    if (cash < cons.lo - 1e-12 || cash > cons.hi + 1e-12) {
        const bool too_low = cash < cons.lo;
        out.secondary = too_low ? -1 : +1;
        const double need = too_low ? cons.lo - cash : cash - cons.hi;
        double headroom = 0.0;
        std::vector<double> room(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double lo_i = cons.clamp(zn.lower[static_cast<std::size_t>(i)]);
            const double hi_i = cons.clamp(zn.upper[static_cast<std::size_t>(i)]);
            room[static_cast<std::size_t>(i)] =
                too_low ? out.target.w[static_cast<std::size_t>(i)] - lo_i
                        : hi_i - out.target.w[static_cast<std::size_t>(i)];
            headroom += room[static_cast<std::size_t>(i)];
        }
        const double sign = too_low ? -1.0 : +1.0;
        if (headroom <= need) {
            for (int i = 0; i < n; ++i)
                out.target.w[static_cast<std::size_t>(i)] += sign * room[static_cast<std::size_t>(i)];
            out.residual_violation = headroom < need - 1e-12;
        } else {
            for (int i = 0; i < n; ++i)
                out.target.w[static_cast<std::size_t>(i)] +=
                    sign * need * room[static_cast<std::size_t>(i)] / headroom;
        }
        risky_sum = 0.0;
        for (int i = 0; i < n; ++i) risky_sum += out.target.w[static_cast<std::size_t>(i)];
        cash = 1.0 - risky_sum;
    }
    out.target.w.back() = cash;
    return out;
}

int BasePolicy::horizon() const {
    return source == Source::Dp ? dp_table->horizon : lmcts_table->horizon;
}

const BeliefGrid& BasePolicy::grid() const {
    return source == Source::Dp ? dp_table->grid : lmcts_table->grid;
}

const Allocation& BasePolicy::at(int t, int grid_index) const {
    return source == Source::Dp ? dp_table->at(t, grid_index) : lmcts_table->at(t, grid_index);
}

PathData make_path(const RegimeModel& model, const BeliefGrid& grid, int horizon,
                   const Belief& initial, Rng& rng) {
    PathData pd;
    pd.regimes.reserve(static_cast<std::size_t>(horizon));
    pd.rf.reserve(static_cast<std::size_t>(horizon));
    pd.returns.reserve(static_cast<std::size_t>(horizon));
    pd.beliefs.reserve(static_cast<std::size_t>(horizon));
    pd.base_index.reserve(static_cast<std::size_t>(horizon));

    int regime = rng.categorical(initial.p);
    Belief belief = initial;
    for (int t = 0; t < horizon; ++t) {
        pd.beliefs.push_back(belief);
        pd.base_index.push_back(grid.snap_index(belief));
        StepSample s = sample_step(model, regime, rng);
        pd.regimes.push_back(regime);
        pd.rf.push_back(model.rf(regime));
        belief = update_belief(model, belief, s.returns);
        pd.returns.push_back(std::move(s.returns));
        regime = s.next_regime;
    }
    return pd;
}

std::vector<double> make_features(const Architecture& arch, const Belief& belief, double wealth,
                                  double w0, double clip) {
    std::vector<double> f;
    f.reserve(static_cast<std::size_t>(arch.input_dim()));
    f.assign(belief.p.begin(), belief.p.end());
    if (arch.wealth_feature) f.push_back(std::clamp(wealth / w0, 0.0, clip));
    return f;
}

Allocation initial_action(const NtzParams& params, const Allocation& base,
                          std::span<const double> features, const Constraints& cons) {
    const Zone zn = zone(params, base, features);
    const int n = base.n_risky();
    Allocation center_pos;
    center_pos.w.resize(static_cast<std::size_t>(n) + 1);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        center_pos.w[static_cast<std::size_t>(i)] = zn.center[static_cast<std::size_t>(i)];
        s += zn.center[static_cast<std::size_t>(i)];
    }
    center_pos.w.back() = 1.0 - s;
    return project_to_zone(center_pos, zn, cons).target;
}

Projection step_action(const NtzParams& params, const Allocation& base,
                       std::span<const double> features, const Allocation& drifted,
                       const Constraints& cons) {
    const Zone zn = zone(params, base, features);
    return project_to_zone(drifted, zn, cons);
}

namespace {

struct BatchRun {
    double loss_sum = 0.0;
    UnrollDebug debug;
};

void run_batch(const NtzParams& params, const BasePolicy& base, std::span<const PathData> paths,
               std::span<const int> subset, const TrainConfig& cfg, bool want_grad,
               double* loss_out, std::vector<double>* grad_out, UnrollDebug* debug) {
    const Layout L = layout_of(params.arch);
    const UtilitySpec util = training_utility(cfg.utility);
    const std::size_t m = subset.empty() ? paths.size() : subset.size();

    std::vector<double> losses(m, 0.0);
    std::vector<std::uint64_t> signatures(m, 0);
    std::vector<long> clamp(m, 0), secondary(m, 0), bankrupt(m, 0);
    std::vector<std::vector<double>> grads;
    if (want_grad) grads.assign(m, {});

    parallel_for(m, cfg.threads, [&](std::size_t j) {
        const PathData& path = subset.empty() ? paths[j] : paths[static_cast<std::size_t>(subset[j])];
        PathForward fwd;
        run_forward(params, L, base, path, cfg, want_grad, fwd);
        losses[j] = -utility(util, fwd.terminal_wealth);
        signatures[j] = fwd.signature;
        clamp[j] = fwd.clamp_events;
        secondary[j] = fwd.secondary_events;
        bankrupt[j] = fwd.bankrupt ? 1 : 0;
        if (want_grad) {
            grads[j].assign(L.total, 0.0);
            run_backward(params, L, path, cfg, fwd, util, grads[j]);
        }
    });

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(m);
    if (loss_out) *loss_out = loss;

    if (want_grad) {
        grad_out->assign(L.total, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            const std::vector<double>& gj = grads[j];
            for (std::size_t i = 0; i < gj.size(); ++i) (*grad_out)[i] += gj[i];
        }
        const double inv = 1.0 / static_cast<double>(m);
        for (double& gi : *grad_out) gi *= inv;
    }

    if (debug) {
        for (std::size_t j = 0; j < m; ++j) {
            debug->clamp_events += clamp[j];
            debug->secondary_clamp_events += secondary[j];
            debug->bankruptcies += bankrupt[j];
            debug->clamp_signature.push_back(signatures[j]);
        }
    }
}

}  // namespace

double unroll_loss(const NtzParams& params, const BasePolicy& base, std::span<const PathData> paths,
                   const TrainConfig& cfg, UnrollDebug* debug) {
    if (paths.empty()) throw std::invalid_argument("unroll_loss: empty batch");
    double loss = 0.0;
    run_batch(params, base, paths, {}, cfg, false, &loss, nullptr, debug);
    return loss;
}

std::vector<double> gradient(const NtzParams& params, const BasePolicy& base,
                             std::span<const PathData> paths, const TrainConfig& cfg,
                             UnrollDebug* debug) {
    if (paths.empty()) throw std::invalid_argument("gradient: empty batch");
    std::vector<double> grad;
    run_batch(params, base, paths, {}, cfg, true, nullptr, &grad, debug);
    return grad;
}

NtzParams train(const BasePolicy& base, const RegimeModel& model, const TrainConfig& cfg,
                TrainReport* report) {
    const int horizon = base.horizon();
    const BeliefGrid& grid = base.grid();
    Belief initial = cfg.initial_belief;
    if (initial.size() != model.n_regimes()) initial = Belief::uniform(model.n_regimes());

    Architecture arch;
    arch.n_regimes = model.n_regimes();
    arch.n_risky = base.at(0, 0).n_risky();
    arch.hidden = cfg.hidden;
    arch.wealth_feature = cfg.wealth_feature;
    arch.center_head = cfg.center_head;

    std::vector<PathData> train_paths(static_cast<std::size_t>(cfg.train_paths));
    parallel_for(train_paths.size(), cfg.threads, [&](std::size_t p) {
        Rng rng = Rng::derive(cfg.seed, Stream::NnTrainPath, p);
        train_paths[p] = make_path(model, grid, horizon, initial, rng);
    });
    std::vector<PathData> val_paths(static_cast<std::size_t>(cfg.val_paths));
    parallel_for(val_paths.size(), cfg.threads, [&](std::size_t p) {
        Rng rng = Rng::derive(cfg.seed, Stream::NnValPath, p);
        val_paths[p] = make_path(model, grid, horizon, initial, rng);
    });

    Rng init_rng = Rng::derive(cfg.seed, Stream::NnInit);
    NtzParams params = NtzParams::init(arch, cfg.init_band, init_rng);
    const Layout L = layout_of(arch);

    NtzParams best = params;
    double best_val = unroll_loss(params, base, val_paths, cfg);
    int best_epoch = -1;
    if (report) {
        report->best_val_loss = best_val;
        report->best_epoch = -1;
    }

    std::vector<double> velocity(L.total, 0.0);
    std::vector<double> grad;
    NtzParams checkpoint = params;
    double lr = cfg.learning_rate;
    int restarts = 0;
    long rejected = 0;

    const int n_batches =
        (cfg.train_paths + cfg.batch - 1) / std::max(1, cfg.batch);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic per-epoch shuffle
        std::vector<int> order(static_cast<std::size_t>(cfg.train_paths));
        for (int i = 0; i < cfg.train_paths; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng shuffle_rng = Rng::derive(cfg.seed, Stream::NnShuffle, static_cast<std::uint64_t>(epoch));
        for (int i = cfg.train_paths - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.next_u64() % static_cast<std::uint64_t>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }

        for (int b = 0; b < n_batches; ++b) {
            const int lo = b * cfg.batch;
            const int hi = std::min(cfg.train_paths, lo + cfg.batch);
            std::span<const int> subset(order.data() + lo, static_cast<std::size_t>(hi - lo));
            run_batch(params, base, train_paths, subset, cfg, true, nullptr, &grad, nullptr);

            bool finite = true;
            for (double gi : grad) {
                if (!std::isfinite(gi)) {
                    finite = false;
                    break;
                }
            }
            if (!finite) {
                ++rejected;
                continue;
            }
            for (std::size_t i = 0; i < L.total; ++i) {
                velocity[i] = cfg.momentum * velocity[i] - lr * grad[i];
                params.values[i] += velocity[i];
            }
        }

        double val = std::numeric_limits<double>::quiet_NaN();
        bool healthy = true;
        for (double vv : params.values) {
            if (!std::isfinite(vv)) {
                healthy = false;
                break;
            }
        }
        if (healthy) {
            val = unroll_loss(params, base, val_paths, cfg);
            healthy = std::isfinite(val);
        }
        if (!healthy) {
            if (++restarts > 3)
                throw std::runtime_error("ntz::train: diverged after three learning-rate restarts");
            params = checkpoint;
            std::fill(velocity.begin(), velocity.end(), 0.0);
            lr *= 0.5;
            --epoch;  // redo the epoch from the checkpoint
            continue;
        }

        if (report) report->val_loss.push_back(val);
        if (val < best_val) {
            best_val = val;
            best = params;
            best_epoch = epoch;
        }
        checkpoint = params;
    }

    if (report) {
        report->best_val_loss = best_val;
        report->best_epoch = best_epoch;
        report->lr_restarts = restarts;
        report->rejected_batches = rejected;
    }
    return best;
}

}  // namespace rsport::ntz
