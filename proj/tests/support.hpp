#pragma once

// Shared numeric helpers for the test oracles.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

namespace onell::testing {

/// Regularized upper incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
    if (x <= 0.0) return 1.0;
    const double lg = std::lgamma(a);
    if (x < a + 1.0) {
        double sum = 1.0 / a;
        double term = sum;
        for (int k = 1; k < 10000; ++k) {
            term *= x / (a + k);
            sum += term;
            if (std::abs(term) < std::abs(sum) * 1e-15) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
    }
    // Lentz continued fraction.
    double b = x + 1.0 - a;
    double c = 1e300;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - lg) * h;
}

/// Upper tail probability of a chi-square statistic.
inline double chi_square_p(double stat, double dof) { return gamma_q(dof / 2.0, stat / 2.0); }

/**
 * Pearson goodness-of-fit p-value of observed counts against expected
 * probabilities. Categories with zero probability must stay empty.
 */
inline double goodness_of_fit(std::span<const double> counts, std::span<const double> probs) {
    if (counts.size() != probs.size()) throw std::invalid_argument("goodness_of_fit: size mismatch");
    double total = 0.0;
    for (double c : counts) total += c;
    double stat = 0.0;
    std::size_t cells = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (probs[i] <= 0.0) {
            if (counts[i] > 0.0) return 0.0;
            continue;
        }
        const double e = total * probs[i];
        stat += (counts[i] - e) * (counts[i] - e) / e;
        ++cells;
    }
    return cells < 2 ? 1.0 : chi_square_p(stat, static_cast<double>(cells - 1));
}

}  // namespace onell::testing
