#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>

#include "onell/error.hpp"

namespace onell {

/// Rounds a real-valued population size to the nearest integer, at least 1.
inline int round_lambda(double value) {
    if (!(value >= 1.0)) return 1;
    return static_cast<int>(std::lround(value));
}

/**
 * The four controllable parameters of one iteration.
 *
 * Mutation rate and crossover bias are derived on demand because they
 * depend on the problem size:
 *   p = alpha * lambda_m / n,  c = beta / lambda_c,
 * both capped at 1.
 */
struct ParameterSet {
    int lambda_m = 1;
    double alpha = 1.0;
    int lambda_c = 1;
    double beta = 1.0;

    double mutation_rate(std::size_t n) const {
        return std::min(alpha * lambda_m / static_cast<double>(n), 1.0);
    }

    double crossover_bias() const { return std::min(beta / lambda_c, 1.0); }

    void validate() const {
        require(lambda_m >= 1 && lambda_c >= 1, "ParameterSet: population sizes must be >= 1");
        require(alpha > 0.0 && std::isfinite(alpha), "ParameterSet: alpha must be positive");
        require(beta > 0.0 && std::isfinite(beta), "ParameterSet: beta must be positive");
    }

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

/// How the best offspring y compared with the parent x before the update.
enum class Comparison { improved, equal, worse };

struct IterationOutcome {
    int delta_f = 0;   // f(x_{t+1}) - f(x_t), never negative
    int evals_used = 0;  // lambda_m + |Y|
    Comparison comparison = Comparison::worse;
};

/**
 * Parameter control policy. Selects parameters from the current fitness
 * and may adapt internal state from the outcome of each iteration.
 */
class Policy {
public:
    virtual ~Policy() = default;

    virtual ParameterSet select(int fx, std::size_t n) = 0;
    virtual void observe(const IterationOutcome& /*outcome*/) {}
    virtual void reset() {}

    /// Fresh copy in the current state, for running episodes concurrently.
    virtual std::unique_ptr<Policy> clone() const = 0;
    virtual std::string name() const = 0;
};

using PolicyPtr = std::unique_ptr<Policy>;

}  // namespace onell
