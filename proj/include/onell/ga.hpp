#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include "onell/bitstring.hpp"
#include "onell/detail/format.hpp"
#include "onell/error.hpp"
#include "onell/rng.hpp"
#include "onell/types.hpp"

namespace onell {

/**
 * Samples Bin(n, p) conditioned on a positive result.
 *
 * When a zero is unlikely this literally redraws until positive. When
 * zeros dominate (tiny p), it samples the same distribution directly: the
 * index K of the first success is drawn from a geometric law truncated to
 * [1, n], and the remaining n - K trials contribute Bin(n - K, p).
 */
inline int sample_conditional_binomial(std::size_t n, double p, RngStream& rng) {
    require(p > 0.0 && p <= 1.0, "sample_conditional_binomial: p must lie in (0, 1]");
    require(n >= 1, "sample_conditional_binomial: n must be at least 1");
    if (p == 1.0) return static_cast<int>(n);
    const double log_q = std::log1p(-p);
    const double p_zero = std::exp(static_cast<double>(n) * log_q);
    if (p_zero < 0.5) {
        std::binomial_distribution<int> bin(static_cast<int>(n), p);
        int ell = 0;
        while (ell == 0) ell = bin(rng);
        return ell;
    }
    // P(K <= k | K <= n) = (1 - q^k) / (1 - q^n)
    const double u = rng.uniform();
    const double mass = -std::expm1(static_cast<double>(n) * log_q);
    double k = std::ceil(std::log1p(-u * mass) / log_q);
    k = std::clamp(k, 1.0, static_cast<double>(n));
    const auto rest = static_cast<int>(n) - static_cast<int>(k);
    int ell = 1;
    if (rest > 0) {
        std::binomial_distribution<int> bin(rest, p);
        ell += bin(rng);
    }
    return ell;
}

/// Flips exactly `ell` positions of x chosen uniformly without replacement.
inline BitVector flip_exact(const BitVector& x, std::size_t ell, RngStream& rng) {
    const std::size_t n = x.size();
    require(ell <= n, "flip_exact: ell exceeds the problem size");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    BitVector out = x;
    for (std::size_t i = 0; i < ell; ++i) {
        std::size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
        out.flip(idx[i]);
    }
    return out;
}

/// Each position takes x_prime's bit with probability c, else x's bit.
inline BitVector biased_crossover(const BitVector& x, const BitVector& x_prime, double c,
                                  RngStream& rng) {
    require(x.size() == x_prime.size(), "biased_crossover: length mismatch");
    require(c >= 0.0 && c <= 1.0, "biased_crossover: c must lie in [0, 1]");
    BitVector out = x;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (rng.bernoulli(c)) out.set(i, x_prime[i]);
    return out;
}

/**
 * Mutable state of one GA run. `fx` always equals fitness(x, z) and
 * `evaluations` only grows. `index_pool` is scratch storage for sampling
 * flip positions; its contents carry no meaning between iterations.
 */
struct GaState {
    BitVector x;
    int fx = 0;
    std::size_t n = 0;
    std::uint64_t evaluations = 0;
    std::uint64_t iterations = 0;
    std::vector<std::uint32_t> index_pool;

    GaState() = default;
    GaState(BitVector start, const Target& z)
        : x(std::move(start)), fx(fitness(x, z)), n(x.size()) {
        index_pool.resize(n);
        std::iota(index_pool.begin(), index_pool.end(), std::uint32_t{0});
    }
};

namespace detail {

// Every offspring of one iteration differs from x only inside a set of
// positions, so offspring are stored as position lists and scored by
// fitness deltas. This keeps an iteration at O(lambda * ell) instead of
// O(lambda * n) while producing the same distribution as the dense
// operators above.
struct Offspring {
    std::vector<std::uint32_t> positions;
    int f = 0;
};

inline int flip_gain(const BitVector& x, const Target& z, std::uint32_t pos) {
    return x[pos] == z[pos] ? -1 : 1;
}

}  // namespace detail

/**
 * One mutation + crossover + selection round.
 *
 * Offspring identical to x or x' in the crossover phase are neither
 * evaluated nor added to Y. Ties among best offspring are resolved
 * uniformly by reservoir sampling from `rng`. The parent is replaced
 * when f(y) >= f(x).
 */
inline IterationOutcome run_iteration(GaState& state, const ParameterSet& params,
                                      const Target& z, RngStream& rng) {
    const std::size_t n = state.n;
    require(z.size() == n, "run_iteration: target length differs from state");
    require(state.fx < static_cast<int>(n), "run_iteration: called at the optimum");
    params.validate();
    if (state.index_pool.size() != n) {
        state.index_pool.resize(n);
        std::iota(state.index_pool.begin(), state.index_pool.end(), std::uint32_t{0});
    }

    const int ell = sample_conditional_binomial(n, params.mutation_rate(n), rng);
    const int fx = state.fx;
    int evals = 0;

    // Mutation phase.
    detail::Offspring best;
    detail::Offspring cand;
    cand.positions.resize(static_cast<std::size_t>(ell));
    int ties = 0;
    auto& pool = state.index_pool;
    for (int i = 0; i < params.lambda_m; ++i) {
        int f = fx;
        for (int k = 0; k < ell; ++k) {
            auto j = static_cast<std::size_t>(k) + rng.below(n - static_cast<std::size_t>(k));
            std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
            const std::uint32_t pos = pool[static_cast<std::size_t>(k)];
            cand.positions[static_cast<std::size_t>(k)] = pos;
            f += detail::flip_gain(state.x, z, pos);
        }
        ++evals;
        if (i == 0 || f > best.f) {
            best.f = f;
            best.positions = cand.positions;
            ties = 1;
        } else if (f == best.f) {
            ++ties;
            if (rng.below(static_cast<std::uint64_t>(ties)) == 0) best.positions = cand.positions;
        }
    }

    // Crossover phase: y starts as x' and competes with every evaluated
    // crossover offspring.
    const double c = params.crossover_bias();
    detail::Offspring y = best;
    ties = 1;
    std::vector<std::uint32_t> taken;
    taken.reserve(static_cast<std::size_t>(ell));
    for (int i = 0; i < params.lambda_c; ++i) {
        taken.clear();
        int f = fx;
        for (std::uint32_t pos : best.positions) {
            if (rng.bernoulli(c)) {
                taken.push_back(pos);
                f += detail::flip_gain(state.x, z, pos);
            }
        }
        if (taken.empty() || taken.size() == best.positions.size()) continue;
        ++evals;
        if (f > y.f) {
            y.f = f;
            y.positions = taken;
            ties = 1;
        } else if (f == y.f) {
            ++ties;
            if (rng.below(static_cast<std::uint64_t>(ties)) == 0) y.positions = taken;
        }
    }

    IterationOutcome out;
    out.evals_used = evals;
    out.comparison = y.f > fx ? Comparison::improved
                   : y.f == fx ? Comparison::equal
                               : Comparison::worse;
    if (y.f >= fx) {
        for (std::uint32_t pos : y.positions) state.x.flip(pos);
        state.fx = y.f;
    }
    out.delta_f = state.fx - fx;
    state.evaluations += static_cast<std::uint64_t>(evals);
    ++state.iterations;
    return out;
}

struct TrajectoryPoint {
    std::uint64_t iteration = 0;
    int fx = 0;
    ParameterSet params;
    std::uint64_t evals_cum = 0;
};

struct RunResult {
    std::uint64_t evaluations_total = 0;
    bool success = false;
    std::uint64_t iterations = 0;
    int final_fx = 0;
    std::optional<std::vector<TrajectoryPoint>> trajectory;
};

struct EpisodeOptions {
    std::uint64_t cutoff = 0;
    bool record_trajectory = false;
    std::optional<BitVector> initial_point;
};

/// Cutoff used throughout training and evaluation: 0.8 n^2 evaluations.
inline std::uint64_t default_cutoff(std::size_t n, double factor = 0.8) {
    return static_cast<std::uint64_t>(std::ceil(factor * static_cast<double>(n) * static_cast<double>(n)));
}

/**
 * Runs the GA from a uniform (or injected) start until the optimum is
 * found or the evaluation budget is spent. The initial point costs no
 * evaluation. An iteration that crosses the cutoff is completed before
 * the run stops.
 */
inline RunResult run_episode(Policy& policy, std::size_t n, const Target& z,
                             const EpisodeOptions& opts, RngStream& rng) {
    require(opts.cutoff > 0, "run_episode: cutoff must be positive");
    require(z.size() == n, "run_episode: target length differs from n");
    BitVector start = opts.initial_point ? *opts.initial_point : sample_uniform(n, rng);
    require(start.size() == n, "run_episode: initial point length differs from n");
    GaState state(std::move(start), z);
    policy.reset();

    RunResult result;
    if (opts.record_trajectory) result.trajectory.emplace();
    while (state.fx < static_cast<int>(n) && state.evaluations < opts.cutoff) {
        const int fx_before = state.fx;
        const ParameterSet params = policy.select(state.fx, n);
        const IterationOutcome outcome = run_iteration(state, params, z, rng);
        policy.observe(outcome);
        if (result.trajectory)
            result.trajectory->push_back({state.iterations, fx_before, params, state.evaluations});
    }
    result.evaluations_total = state.evaluations;
    result.iterations = state.iterations;
    result.final_fx = state.fx;
    result.success = state.fx == static_cast<int>(n);
    return result;
}

inline RunResult run_episode(Policy& policy, std::size_t n, std::uint64_t cutoff, RngStream& rng) {
    EpisodeOptions opts;
    opts.cutoff = cutoff;
    return run_episode(policy, n, Target(n), opts, rng);
}

/// CSV columns: iteration,fx,lambda_m,alpha,lambda_c,beta,evals_cum
inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryPoint>& trajectory) {
    os << "iteration,fx,lambda_m,alpha,lambda_c,beta,evals_cum\n";
    for (const auto& t : trajectory) {
        os << t.iteration << ',' << t.fx << ',' << t.params.lambda_m << ','
           << detail::format_real(t.params.alpha) << ',' << t.params.lambda_c << ','
           << detail::format_real(t.params.beta) << ',' << t.evals_cum << '\n';
    }
}

}  // namespace onell
