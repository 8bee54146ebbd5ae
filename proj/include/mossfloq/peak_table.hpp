#pragma once

// Resolved-peak template of a modulated sextet: every line i and sideband n
// inside the scan window, coincident components merged into one peak, and
// amplitude groups tied by (line pair, |n|) content.

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/physics.hpp"

namespace mossfloq::peaks {

struct PeakComponent {
    int line = 0;  ///< 0..5 in the scheme's ordering
    int order = 0; ///< sideband index n
    double velocity_mm_s = 0.0;
};

using GroupKey = std::set<std::pair<int, int>>; ///< {(line pair, |n|)}

struct TemplatePeak {
    double velocity_mm_s = 0.0; ///< mean of component positions
    std::vector<PeakComponent> components;
    int group = -1;
};

struct AmplitudeGroup {
    GroupKey key;
    std::vector<int> peaks;
};

struct PeakTemplate {
    std::vector<TemplatePeak> peaks; ///< ascending velocity
    std::vector<AmplitudeGroup> groups;
    double spacing_mm_s = 0.0;
    int max_order = 0;

    int n_peaks() const { return static_cast<int>(peaks.size()); }
    int n_groups() const { return static_cast<int>(groups.size()); }

    /// Peak whose components are exactly {(pair, |n|)}-equivalent to the mirror of `k`.
    int mirror_of(int k) const {
        const auto& p = peaks[k];
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_peaks(); ++j) {
            if (peaks[j].group != p.group) continue;
            const double d = std::abs(peaks[j].velocity_mm_s + p.velocity_mm_s);
            if (j != k && d < best_d) {
                best_d = d;
                best = j;
            }
        }
        return best;
    }
};

inline PeakTemplate build_peak_template(const physics::HyperfineScheme& scheme, double spacing_mm_s, int max_order,
                                        double v_lo, double v_hi, double merge_tol_mm_s = 0.15) {
    if (max_order < 0) throw ConfigError("peak template: max_order must be >= 0");
    if (max_order > 0 && !(spacing_mm_s > 0.0)) throw ConfigError("peak template: spacing must be > 0");
    if (!(v_lo < v_hi)) throw ConfigError("peak template: empty window");
    std::vector<PeakComponent> comps;
    for (int i = 0; i < 6; ++i)
        for (int n = -max_order; n <= max_order; ++n) {
            const double v = scheme.line_velocities_mm_s[i] + n * spacing_mm_s;
            if (v >= v_lo && v <= v_hi) comps.push_back({i, n, v});
        }
    std::sort(comps.begin(), comps.end(),
              [](const PeakComponent& a, const PeakComponent& b) { return a.velocity_mm_s < b.velocity_mm_s; });

    PeakTemplate t;
    t.spacing_mm_s = spacing_mm_s;
    t.max_order = max_order;
    for (const auto& c : comps) {
        if (!t.peaks.empty() && c.velocity_mm_s - t.peaks.back().components.back().velocity_mm_s <= merge_tol_mm_s) {
            t.peaks.back().components.push_back(c);
        } else {
            t.peaks.push_back({});
            t.peaks.back().components.push_back(c);
        }
    }
    std::vector<GroupKey> keys;
    for (auto& p : t.peaks) {
        double sum = 0.0;
        GroupKey key;
        for (const auto& c : p.components) {
            sum += c.velocity_mm_s;
            key.insert({static_cast<int>(physics::line_pair(c.line)), std::abs(c.order)});
        }
        p.velocity_mm_s = sum / p.components.size();
        keys.push_back(key);
    }
    // groups ordered by the smallest |v| among their peaks
    std::vector<std::pair<double, GroupKey>> order;
    for (std::size_t k = 0; k < keys.size(); ++k) {
        auto it = std::find_if(order.begin(), order.end(), [&](const auto& e) { return e.second == keys[k]; });
        const double av = std::abs(t.peaks[k].velocity_mm_s);
        if (it == order.end())
            order.push_back({av, keys[k]});
        else
            it->first = std::min(it->first, av);
    }
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& e : order) t.groups.push_back({e.second, {}});
    for (std::size_t k = 0; k < keys.size(); ++k) {
        for (int g = 0; g < t.n_groups(); ++g)
            if (t.groups[g].key == keys[k]) {
                t.peaks[k].group = g;
                t.groups[g].peaks.push_back(static_cast<int>(k));
            }
    }
    return t;
}

} // namespace mossfloq::peaks
