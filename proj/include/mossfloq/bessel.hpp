#pragma once

// Bessel functions of the first kind, integer order, real non-negative argument.
// Miller's downward recurrence normalized by J0 + 2*sum J_2k = 1; a power series
// is used for a single order when z <= n.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"

namespace mossfloq::floquet {

/// Envelope within which |error| <= 1e-12 is guaranteed (and tested).
inline constexpr int kBesselMaxOrder = 60;
inline constexpr double kBesselMaxArgument = 100.0;

namespace detail {

inline void check_bessel_domain(int n, double z) {
    if (n < 0 || n > kBesselMaxOrder || !(z >= 0.0) || z > kBesselMaxArgument)
        throw DomainError("bessel_j(" + std::to_string(n) + ", " + std::to_string(z) +
                          ") outside supported envelope 0<=n<=60, 0<=z<=100");
}

inline double bessel_series(int n, double z) {
    const double h = 0.5 * z;
    double term = 1.0;
    for (int k = 1; k <= n; ++k) term *= h / k; // (z/2)^n / n!
    const double q = -h * h;
    double sum = term;
    for (int k = 1; k < 200; ++k) {
        term *= q / (static_cast<double>(k) * (n + k));
        sum += term;
        if (std::abs(term) < 1e-17 * std::abs(sum)) break;
    }
    return sum;
}

inline int miller_start(int n_max, double z) {
    const double top = std::max(static_cast<double>(n_max), std::ceil(z));
    const int m = static_cast<int>(top) + 20 + static_cast<int>(std::ceil(std::sqrt(60.0 * std::max(top, 1.0))));
    return 2 * ((m + 1) / 2);
}

} // namespace detail

/// J_0(z) .. J_{out.size()-1}(z) in one downward sweep.
inline void bessel_j_all(double z, std::span<double> out) {
    if (out.empty()) return;
    const int n_max = static_cast<int>(out.size()) - 1;
    detail::check_bessel_domain(n_max, z);
    if (z == 0.0) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = 1.0;
        return;
    }
    const int start = detail::miller_start(n_max, z);
    const double two_over_z = 2.0 / z;
    double j_next = 0.0; // J_{k+1}
    double j_cur = 1e-30; // J_k, unnormalized
    double norm = 0.0;
    std::fill(out.begin(), out.end(), 0.0);
    for (int k = start; k >= 1; --k) {
        const double j_prev = k * two_over_z * j_cur - j_next; // J_{k-1}
        j_next = j_cur;
        j_cur = j_prev;
        const int idx = k - 1;
        if (idx <= n_max) out[idx] = j_cur;
        if (idx > 0 && idx % 2 == 0) norm += 2.0 * j_cur;
        if (std::abs(j_cur) > 1e250) {
            constexpr double s = 1e-250;
            j_cur *= s;
            j_next *= s;
            norm *= s;
            for (int i = idx; i <= n_max; ++i) out[i] *= s;
        }
    }
    norm += j_cur; // J_0
    const double inv = 1.0 / norm;
    for (double& v : out) v *= inv;
}

inline double bessel_j(int n, double z) {
    detail::check_bessel_domain(n, z);
    if (z == 0.0) return n == 0 ? 1.0 : 0.0;
    if (z <= n && n <= 12) return detail::bessel_series(n, z);
    std::vector<double> buf(static_cast<std::size_t>(n) + 1);
    bessel_j_all(z, buf);
    return buf[n];
}

} // namespace mossfloq::floquet
