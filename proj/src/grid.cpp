#include "rsport/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace rsport {

namespace {

void compositions(int slots, int remaining, std::vector<int>& cur,
                  const std::function<void(const std::vector<int>&)>& emit) {
    if (slots == 1) {
        cur.push_back(remaining);
        emit(cur);
        cur.pop_back();
        return;
    }
    for (int k = 0; k <= remaining; ++k) {
        cur.push_back(k);
        compositions(slots - 1, remaining - k, cur, emit);
        cur.pop_back();
    }
}

}  // namespace

std::uint64_t BeliefGrid::encode(const std::vector<int>& counts) const {
    std::uint64_t key = 0;
    const std::uint64_t base = static_cast<std::uint64_t>(units) + 1;
    for (int c : counts) key = key * base + static_cast<std::uint64_t>(c);
    return key;
}

BeliefGrid BeliefGrid::regular(int n_regimes, double step) {
    if (n_regimes < 1) throw std::invalid_argument("BeliefGrid: need at least one regime");
    if (step <= 0.0 || step > 1.0) throw std::invalid_argument("BeliefGrid: bad step");
    const int units = static_cast<int>(std::llround(1.0 / step));
    if (std::abs(units * step - 1.0) > 1e-9)
        throw std::invalid_argument("BeliefGrid: step must divide 1");
    if (n_regimes > 8) throw std::invalid_argument("BeliefGrid: more than 8 regimes unsupported");

    BeliefGrid grid;
    grid.step = step;
    grid.n_regimes = n_regimes;
    grid.units = units;

    std::vector<int> cur;
    compositions(n_regimes, units, cur, [&](const std::vector<int>& counts) {
        Belief b;
        b.p.resize(counts.size());
        double acc = 0.0;
        for (std::size_t i = 0; i + 1 < counts.size(); ++i) {
            b.p[i] = counts[i] * step;
            acc += b.p[i];
        }
        b.p.back() = 1.0 - acc;
        grid.keys_.emplace_back(grid.encode(counts), static_cast<int>(grid.points.size()));
        grid.points.push_back(std::move(b));
    });
    std::sort(grid.keys_.begin(), grid.keys_.end());
    return grid;
}

int BeliefGrid::snap_index(const Belief& b) const {
    if (b.size() != n_regimes) throw std::invalid_argument("snap_index: dimension mismatch");

    std::vector<int> counts(b.p.size());
    std::vector<std::pair<double, int>> remainders(b.p.size());
    int total = 0;
    for (std::size_t i = 0; i < b.p.size(); ++i) {
        const double raw = std::clamp(b.p[i], 0.0, 1.0) * units;
        counts[i] = static_cast<int>(std::floor(raw));
        if (counts[i] > units) counts[i] = units;
        remainders[i] = {raw - counts[i], static_cast<int>(i)};
        total += counts[i];
    }
    const int deficit = units - total;
    // Largest remainder first; ties prefer the lower coordinate index.
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (deficit > 0) {
        for (int d = 0; d < deficit && d < static_cast<int>(counts.size()); ++d)
            ++counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(d)].second)];
    } else if (deficit < 0) {
        int need = -deficit;
        for (auto it = remainders.rbegin(); it != remainders.rend() && need > 0; ++it) {
            if (counts[static_cast<std::size_t>(it->second)] > 0) {
                --counts[static_cast<std::size_t>(it->second)];
                --need;
            }
        }
    }

    const std::uint64_t key = encode(counts);
    auto it = std::lower_bound(keys_.begin(), keys_.end(), std::make_pair(key, 0));
    if (it == keys_.end() || it->first != key) throw std::logic_error("snap_index: point not on grid");
    return it->second;
}

BeliefInterpolant::BeliefInterpolant(const BeliefGrid& grid, std::span<const double> values)
    : grid_(&grid), values_(values) {
    if (static_cast<int>(values.size()) != grid.size())
        throw std::invalid_argument("BeliefInterpolant: one value per grid point required");
}

double BeliefInterpolant::operator()(const Belief& b) const {
    const int n = grid_->n_regimes;
    if (b.size() != n) throw std::invalid_argument("BeliefInterpolant: dimension mismatch");
    if (n == 1) return values_[0];

    const int units = grid_->units;
    if (n == 2) {
        double x = std::clamp(b.p[0], 0.0, 1.0) * units;
        int i = static_cast<int>(std::floor(x));
        if (i >= units) i = units - 1;
        double f = x - i;
        if (f < 1e-9) f = 0.0;
        if (f > 1.0 - 1e-9) f = 1.0;
        // points are ordered by ascending p0: index i has p0 = i * step
        return (1.0 - f) * values_[static_cast<std::size_t>(i)] +
               f * values_[static_cast<std::size_t>(i) + 1];
    }

    // Multilinear over the first n-1 coordinates; corners that fall off the
    // simplex are dropped and the weights renormalized.
    const int dims = n - 1;
    std::vector<int> base(static_cast<std::size_t>(dims));
    std::vector<double> frac(static_cast<std::size_t>(dims));
    for (int i = 0; i < dims; ++i) {
        double x = std::clamp(b.p[static_cast<std::size_t>(i)], 0.0, 1.0) * units;
        int bi = static_cast<int>(std::floor(x));
        if (bi >= units) bi = units - 1;
        double f = x - bi;
        if (f < 1e-9) f = 0.0;
        if (f > 1.0 - 1e-9) f = 1.0;
        base[static_cast<std::size_t>(i)] = bi;
        frac[static_cast<std::size_t>(i)] = f;
    }

    double total_weight = 0.0;
    double acc = 0.0;
    std::vector<int> counts(static_cast<std::size_t>(n));
    for (int corner = 0; corner < (1 << dims); ++corner) {
        double weight = 1.0;
        int sum = 0;
        for (int i = 0; i < dims; ++i) {
            const bool high = (corner >> i) & 1;
            weight *= high ? frac[static_cast<std::size_t>(i)] : 1.0 - frac[static_cast<std::size_t>(i)];
            counts[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] + (high ? 1 : 0);
            sum += counts[static_cast<std::size_t>(i)];
        }
        if (weight == 0.0) continue;
        const int last = units - sum;
        if (last < 0 || last > units) continue;
        counts[static_cast<std::size_t>(dims)] = last;
        const std::uint64_t key = grid_->encode(counts);
        auto it = std::lower_bound(grid_->keys_.begin(), grid_->keys_.end(), std::make_pair(key, 0));
        if (it == grid_->keys_.end() || it->first != key) continue;
        total_weight += weight;
        acc += weight * values_[static_cast<std::size_t>(it->second)];
    }
    if (total_weight <= 0.0) return values_[static_cast<std::size_t>(grid_->snap_index(b))];
    return acc / total_weight;
}

}  // namespace rsport
