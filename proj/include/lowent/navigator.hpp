#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowent/errors.hpp"

namespace lowent {

struct NavigatorConfig {
    enum class Direction { high_to_low, low_to_high };

    double tau_start = 1.5;
    double step = 0.3;
    Direction direction = Direction::high_to_low;

    /// tau_start, tau_start - step, ... while > 0, in walk order. Values are
    /// snapped to 1e-9 so 1.2 - 2 * 0.3 reads back as 0.6.
    std::vector<double> grid() const {
        if (!(step > 0.0)) throw ConfigError("navigator step must be > 0");
        if (!(tau_start > 0.0)) throw ConfigError("navigator tau_start must be > 0");
        const auto n = static_cast<long>(std::floor(tau_start / step + 1e-9));
        std::vector<double> g;
        for (long i = 0; i <= n; ++i) {
            const double t = std::round((tau_start - static_cast<double>(i) * step) * 1e9) / 1e9;
            if (t > 1e-9) g.push_back(t);
        }
        if (g.size() < 2) throw ConfigError("navigator grid needs at least two thresholds");
        if (direction == Direction::low_to_high) std::reverse(g.begin(), g.end());
        return g;
    }
};

struct TauStats {
    double tau = 0.0;
    double watermark_ratio = 0.0;
    std::size_t green_count = 0;
};

/// p = |S|_G(prev) / |S|_G(curr), w = WR(prev) / WR(curr).
///
/// A zero denominator yields +inf, except 0/0 for p which is reported as 1
/// (no change), so the stop predicate can only fire on p when prev > 0. An
/// infinite w never satisfies w < 1.
struct PwRatio {
    double p = 1.0;
    double w = 1.0;
    bool p_degenerate = false;
    bool w_degenerate = false;
};

inline PwRatio pw_ratios(const TauStats& prev, const TauStats& curr) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    PwRatio r;
    if (curr.green_count == 0) {
        r.p_degenerate = true;
        r.p = prev.green_count > 0 ? inf : 1.0;
    } else {
        r.p = static_cast<double>(prev.green_count) / static_cast<double>(curr.green_count);
    }
    if (curr.watermark_ratio <= 0.0) {
        r.w_degenerate = true;
        r.w = inf;
    } else {
        r.w = prev.watermark_ratio / curr.watermark_ratio;
    }
    return r;
}

inline bool should_stop(double p, double w) noexcept { return p > 1.0 && w < 1.0; }

struct NavigatorResult {
    double tau_hat = 0.0;
    std::vector<double> grid;
    std::vector<TauStats> stats;  // one per evaluated threshold, walk order
    std::vector<PwRatio> ratios;  // ratios[i] compares stats[i] with stats[i + 1]
    std::optional<std::size_t> stop_index;  // grid index where the predicate fired
};

using TauScorer = std::function<TauStats(double tau)>;

/// Walks the grid, comparing each threshold with the one before it, and stops
/// at the first step with p > 1 and w < 1, selecting the previous threshold.
/// Falls back to the first grid value when the predicate never fires.
inline NavigatorResult navigate(const NavigatorConfig& cfg, const TauScorer& scorer) {
    NavigatorResult res;
    res.grid = cfg.grid();
    res.tau_hat = res.grid.front();
    auto score = [&](double tau) {
        try {
            TauStats s = scorer(tau);
            s.tau = tau;
            return s;
        } catch (const NavigationError&) {
            throw;
        } catch (const std::exception& e) {
            throw NavigationError(tau, e.what());
        }
    };
    res.stats.push_back(score(res.grid.front()));
    for (std::size_t i = 1; i < res.grid.size(); ++i) {
        res.stats.push_back(score(res.grid[i]));
        const auto r = pw_ratios(res.stats[i - 1], res.stats[i]);
        res.ratios.push_back(r);
        if (should_stop(r.p, r.w)) {
            res.tau_hat = res.grid[i - 1];
            res.stop_index = i;
            break;
        }
    }
    return res;
}

namespace detail {

inline nlohmann::json ratio_json(double v) {
    if (std::isinf(v)) return "inf";
    return v;
}

}  // namespace detail

inline nlohmann::json to_json(const NavigatorResult& r) {
    nlohmann::json j;
    j["grid"] = r.grid;
    auto stats = nlohmann::json::array();
    for (const auto& s : r.stats) stats.push_back({{"tau", s.tau}, {"wr", s.watermark_ratio}, {"green_count", s.green_count}});
    j["stats"] = stats;
    auto p = nlohmann::json::array();
    auto w = nlohmann::json::array();
    for (const auto& q : r.ratios) {
        p.push_back(detail::ratio_json(q.p));
        w.push_back(detail::ratio_json(q.w));
    }
    j["p"] = p;
    j["w"] = w;
    j["tau_hat"] = r.tau_hat;
    j["stop_index"] = r.stop_index ? nlohmann::json(*r.stop_index) : nlohmann::json(nullptr);
    return j;
}

}  // namespace lowent
