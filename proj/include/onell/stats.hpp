#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "onell/detail/format.hpp"
#include "onell/error.hpp"
#include "onell/ga.hpp"
#include "onell/rng.hpp"
#include "onell/types.hpp"

namespace onell {

struct ErtSummary {
    std::size_t n = 0;
    std::size_t runs = 0;
    std::size_t successes = 0;
    double ert = std::numeric_limits<double>::infinity();
    double normalized_ert = std::numeric_limits<double>::infinity();
    double std = 0.0;  // per-run evaluations over successful runs

    bool infinite() const { return successes == 0; }
};

/// ERT = total evaluations of all runs (failures included) / successes.
inline ErtSummary summarize_runs(std::size_t n, std::span<const std::uint64_t> evaluations,
                                 std::span<const std::uint8_t> success) {
    require(evaluations.size() == success.size(), "summarize_runs: length mismatch");
    require(n >= 1, "summarize_runs: n must be positive");
    ErtSummary s;
    s.n = n;
    s.runs = evaluations.size();
    double total = 0.0;
    double ok_sum = 0.0;
    double ok_sq = 0.0;
    for (std::size_t i = 0; i < evaluations.size(); ++i) {
        const auto e = static_cast<double>(evaluations[i]);
        total += e;
        if (success[i]) {
            ++s.successes;
            ok_sum += e;
            ok_sq += e * e;
        }
    }
    if (s.successes > 0) {
        const auto k = static_cast<double>(s.successes);
        s.ert = total / k;
        s.normalized_ert = s.ert / static_cast<double>(n);
        const double mean = ok_sum / k;
        s.std = std::sqrt(std::max(0.0, ok_sq / k - mean * mean));
    }
    return s;
}

struct EvaluationResult {
    ErtSummary summary;
    std::vector<std::uint64_t> seeds;
    std::vector<std::uint64_t> evaluations;
    std::vector<std::uint8_t> success;
};

inline unsigned default_parallelism() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

/**
 * One episode per seed, run with RngStream(master_seed, seed) and a fresh
 * clone of `policy`. Results are stored by seed position, so the output
 * does not depend on `parallel`.
 */
inline EvaluationResult evaluate_policy(const Policy& policy, std::size_t n, std::span<const std::uint64_t> seeds,
                                        std::uint64_t master_seed, std::uint64_t cutoff, unsigned parallel = 1) {
    require(n >= 1, "evaluate_policy: n must be positive");
    require(cutoff > 0, "evaluate_policy: cutoff must be positive");
    {
        std::unordered_set<std::uint64_t> seen(seeds.begin(), seeds.end());
        require(seen.size() == seeds.size(), "evaluate_policy: seeds must be distinct");
    }
    EvaluationResult res;
    res.seeds.assign(seeds.begin(), seeds.end());
    res.evaluations.assign(seeds.size(), 0);
    res.success.assign(seeds.size(), 0);

    auto worker = [&](std::size_t begin, std::size_t stride) {
        PolicyPtr local = policy.clone();
        for (std::size_t i = begin; i < seeds.size(); i += stride) {
            RngStream rng(master_seed, seeds[i]);
            const RunResult r = run_episode(*local, n, cutoff, rng);
            res.evaluations[i] = r.evaluations_total;
            res.success[i] = r.success ? 1 : 0;
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(parallel == 0 ? 1 : parallel, 1, std::max<std::size_t>(1, seeds.size()));
    if (threads == 1) {
        worker(0, 1);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
        for (auto& th : pool) th.join();
    }
    res.summary = summarize_runs(n, res.evaluations, res.success);
    return res;
}

/// Seeds 0..count-1.
inline std::vector<std::uint64_t> seed_range(std::size_t count, std::uint64_t first = 0) {
    std::vector<std::uint64_t> s(count);
    std::iota(s.begin(), s.end(), first);
    return s;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
    double statistic = 0.0;  // W+, sum of ranks of positive differences a - b
    double p_value = 1.0;    // two-sided
    double z = 0.0;          // normal-approximation score (0 in exact mode)
    std::size_t nonzero = 0;
    bool exact = false;
    bool degenerate = false;  // every difference was zero
};

inline constexpr std::size_t kWilcoxonExactLimit = 25;

namespace detail {

struct SignedRanks {
    std::vector<double> ranks;  // average ranks of |d|, aligned with signs
    std::vector<bool> positive;
    double tie_term = 0.0;  // sum of t^3 - t over tie groups
};

inline SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
    std::vector<double> d;
    d.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        if (diff != 0.0) d.push_back(diff);
    }
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
    SignedRanks sr;
    sr.ranks.resize(d.size());
    sr.positive.resize(d.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        const auto t = static_cast<double>(j - i + 1);
        sr.tie_term += t * t * t - t;
        for (std::size_t k = i; k <= j; ++k) sr.ranks[order[k]] = avg;
        i = j + 1;
    }
    for (std::size_t i = 0; i < d.size(); ++i) sr.positive[i] = d[i] > 0;
    return sr;
}

// Exact null distribution of W+ under random signs. Average ranks are
// half-integers, so the DP runs over doubled ranks.
inline double exact_two_sided_p(const SignedRanks& sr, double w_plus) {
    std::vector<int> r2(sr.ranks.size());
    int total = 0;
    for (std::size_t i = 0; i < r2.size(); ++i) {
        r2[i] = static_cast<int>(std::lround(2.0 * sr.ranks[i]));
        total += r2[i];
    }
    std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
    ways[0] = 1.0;
    int reach = 0;
    for (int r : r2) {
        for (int s = reach; s >= 0; --s)
            if (ways[static_cast<std::size_t>(s)] != 0.0) ways[static_cast<std::size_t>(s + r)] += ways[static_cast<std::size_t>(s)];
        reach += r;
    }
    const double all = std::ldexp(1.0, static_cast<int>(r2.size()));
    const int w2 = static_cast<int>(std::lround(2.0 * w_plus));
    double lower = 0.0;
    double upper = 0.0;
    for (int s = 0; s <= total; ++s) {
        if (s <= w2) lower += ways[static_cast<std::size_t>(s)];
        if (s >= w2) upper += ways[static_cast<std::size_t>(s)];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

}  // namespace detail

/**
 * Paired two-sided Wilcoxon signed-rank test on a - b. Zero differences
 * are dropped and tied magnitudes share average ranks. Up to 25 nonzero
 * pairs use the exact distribution; larger samples use the normal
 * approximation with tie and continuity corrections.
 */
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                           WilcoxonMethod method = WilcoxonMethod::automatic) {
    require(a.size() == b.size(), "wilcoxon_signed_rank: samples must have equal length");
    const detail::SignedRanks sr = detail::signed_ranks(a, b);
    WilcoxonResult res;
    res.nonzero = sr.ranks.size();
    if (res.nonzero == 0) {
        res.degenerate = true;
        return res;
    }
    require(res.nonzero >= 5, "wilcoxon_signed_rank: need at least 5 nonzero differences, got " +
                                  std::to_string(res.nonzero));
    for (std::size_t i = 0; i < sr.ranks.size(); ++i)
        if (sr.positive[i]) res.statistic += sr.ranks[i];

    const bool exact = method == WilcoxonMethod::exact ||
                       (method == WilcoxonMethod::automatic && res.nonzero <= kWilcoxonExactLimit);
    if (exact) {
        res.exact = true;
        res.p_value = detail::exact_two_sided_p(sr, res.statistic);
        return res;
    }
    const auto m = static_cast<double>(res.nonzero);
    const double mean = m * (m + 1.0) / 4.0;
    const double var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - sr.tie_term / 48.0;
    if (var <= 0.0) {
        res.p_value = 1.0;
        return res;
    }
    const double dev = std::max(0.0, std::abs(res.statistic - mean) - 0.5);
    res.z = std::copysign(dev / std::sqrt(var), res.statistic - mean);
    res.p_value = std::min(1.0, std::erfc(std::abs(res.z) / std::sqrt(2.0)));
    return res;
}

// ---------------------------------------------------------------------------
// Holm-Bonferroni step-down

struct HolmResult {
    std::vector<bool> reject;
    std::vector<double> adjusted;
};

inline HolmResult holm_bonferroni(std::span<const double> p_values, double level) {
    require(level > 0.0 && level < 1.0, "holm_bonferroni: level must lie in (0, 1)");
    const std::size_t m = p_values.size();
    HolmResult res;
    res.reject.assign(m, false);
    res.adjusted.assign(m, 1.0);
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
    double running = 0.0;
    bool stopped = false;
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t i = order[k];
        const auto factor = static_cast<double>(m - k);
        running = std::max(running, std::min(1.0, p_values[i] * factor));
        res.adjusted[i] = running;
        if (!stopped && p_values[i] <= level / factor)
            res.reject[i] = true;
        else
            stopped = true;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Comparison tables

struct TableCell {
    std::string policy;
    std::size_t n = 0;
    ErtSummary summary;
    std::vector<std::uint64_t> seeds;
    std::vector<std::uint64_t> evaluations;
    bool best = false;
    bool tested = false;
    double p_value = 1.0;   // raw, against the best policy at this n
    double p_adjusted = 1.0;
    bool not_significant = false;  // indistinguishable from the best after Holm
};

struct ComparisonTable {
    std::vector<std::string> policies;
    std::vector<std::size_t> sizes;
    std::vector<TableCell> cells;  // policy-major: cells[p * sizes.size() + k]
    double level = 0.01;

    const TableCell& cell(std::size_t policy_index, std::size_t size_index) const {
        return cells.at(policy_index * sizes.size() + size_index);
    }

    void write_csv(std::ostream& os) const {
        os << "policy,n,runs,successes,ert,normalized_ert,std,best,not_significant,p_value,p_adjusted\n";
        for (const auto& c : cells) {
            os << c.policy << ',' << c.n << ',' << c.summary.runs << ',' << c.summary.successes << ','
               << detail::format_real(c.summary.ert) << ',' << detail::format_real(c.summary.normalized_ert) << ','
               << detail::format_real(c.summary.std) << ',' << (c.best ? 1 : 0) << ',' << (c.not_significant ? 1 : 0)
               << ',';
            if (c.tested) os << detail::format_real(c.p_value) << ',' << detail::format_real(c.p_adjusted);
            else os << ',';
            os << '\n';
        }
    }

    /// Normalized ERT (std/n) per cell. **bold** marks the best policy at
    /// each n, __underline__ marks policies not significantly worse.
    void write_text(std::ostream& os) const {
        std::vector<std::vector<std::string>> grid;
        std::vector<std::string> header{"policy"};
        for (auto n : sizes) header.push_back("n=" + std::to_string(n));
        grid.push_back(header);
        for (std::size_t p = 0; p < policies.size(); ++p) {
            std::vector<std::string> row{policies[p]};
            for (std::size_t k = 0; k < sizes.size(); ++k) {
                const auto& c = cell(p, k);
                std::string v = detail::format_fixed(c.summary.normalized_ert, 3) + " (" +
                                detail::format_fixed(c.summary.std / static_cast<double>(c.n), 2) + ")";
                if (c.best) v = "**" + v + "**";
                else if (c.not_significant) v = "__" + v + "__";
                row.push_back(v);
            }
            grid.push_back(row);
        }
        std::vector<std::size_t> width(header.size(), 0);
        for (const auto& row : grid)
            for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
        for (const auto& row : grid) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                os << row[i];
                if (i + 1 < row.size()) os << std::string(width[i] - row[i].size() + 2, ' ');
            }
            os << '\n';
        }
    }
};

/// Per-(policy, n) evaluation results to be arranged into a table.
struct TableInput {
    std::string policy;
    std::size_t n = 0;
    EvaluationResult result;
};

/**
 * For each n: marks the policy with the lowest ERT as best, runs a
 * paired Wilcoxon test of every other policy against it (pairing by seed)
 * and applies Holm-Bonferroni across the tests at that n.
 */
inline ComparisonTable comparison_table(const std::vector<TableInput>& inputs, double level = 0.01) {
    require(level > 0.0 && level < 1.0, "comparison_table: level must lie in (0, 1)");
    ComparisonTable t;
    t.level = level;
    for (const auto& in : inputs) {
        if (std::find(t.policies.begin(), t.policies.end(), in.policy) == t.policies.end()) t.policies.push_back(in.policy);
        if (std::find(t.sizes.begin(), t.sizes.end(), in.n) == t.sizes.end()) t.sizes.push_back(in.n);
    }
    t.cells.resize(t.policies.size() * t.sizes.size());
    std::vector<bool> filled(t.cells.size(), false);
    for (const auto& in : inputs) {
        const auto p = static_cast<std::size_t>(std::find(t.policies.begin(), t.policies.end(), in.policy) - t.policies.begin());
        const auto k = static_cast<std::size_t>(std::find(t.sizes.begin(), t.sizes.end(), in.n) - t.sizes.begin());
        const std::size_t idx = p * t.sizes.size() + k;
        require(!filled[idx], "comparison_table: duplicate entry for " + in.policy + " at n=" + std::to_string(in.n));
        filled[idx] = true;
        auto& c = t.cells[idx];
        c.policy = in.policy;
        c.n = in.n;
        c.summary = in.result.summary;
        c.seeds = in.result.seeds;
        c.evaluations = in.result.evaluations;
    }
    for (std::size_t i = 0; i < filled.size(); ++i)
        require(filled[i], "comparison_table: missing cell for " + t.policies[i / t.sizes.size()] + " at n=" +
                               std::to_string(t.sizes[i % t.sizes.size()]));

    for (std::size_t k = 0; k < t.sizes.size(); ++k) {
        std::size_t best = 0;
        for (std::size_t p = 1; p < t.policies.size(); ++p)
            if (t.cell(p, k).summary.ert < t.cell(best, k).summary.ert) best = p;
        auto& b = t.cells[best * t.sizes.size() + k];
        b.best = true;

        std::vector<std::size_t> others;
        std::vector<double> pvals;
        for (std::size_t p = 0; p < t.policies.size(); ++p) {
            if (p == best) continue;
            auto& c = t.cells[p * t.sizes.size() + k];
            if (c.seeds != b.seeds)
                throw ValidationError("comparison_table: " + c.policy + " and " + b.policy + " at n=" +
                                      std::to_string(c.n) + " were not run on the same seeds (" +
                                      std::to_string(c.seeds.size()) + " vs " + std::to_string(b.seeds.size()) + ")");
            std::vector<double> x(c.evaluations.begin(), c.evaluations.end());
            std::vector<double> y(b.evaluations.begin(), b.evaluations.end());
            const detail::SignedRanks sr = detail::signed_ranks(x, y);
            double pv = 1.0;
            if (sr.ranks.size() >= 5) {
                pv = wilcoxon_signed_rank(x, y).p_value;
            } else if (!sr.ranks.empty()) {
                double w = 0.0;
                for (std::size_t i = 0; i < sr.ranks.size(); ++i)
                    if (sr.positive[i]) w += sr.ranks[i];
                pv = detail::exact_two_sided_p(sr, w);
            }
            c.tested = true;
            c.p_value = pv;
            others.push_back(p);
            pvals.push_back(pv);
        }
        const HolmResult h = holm_bonferroni(pvals, level);
        for (std::size_t i = 0; i < others.size(); ++i) {
            auto& c = t.cells[others[i] * t.sizes.size() + k];
            c.p_adjusted = h.adjusted[i];
            c.not_significant = !h.reject[i];
        }
    }
    return t;
}

}  // namespace onell
