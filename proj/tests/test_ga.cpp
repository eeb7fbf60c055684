#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <vector>

#include "onell/ga.hpp"
#include "onell/policy.hpp"
#include "ga_oracles.hpp"
#include "support.hpp"

using namespace onell;
using namespace onell::testing;

namespace {

// Goodness of fit with the far tail pooled so every cell has a usable expectation.
double pooled_fit(const std::vector<double>& counts, const std::vector<double>& pmf) {
    double draws = 0.0;
    for (double c : counts) draws += c;
    std::vector<double> pc;
    std::vector<double> cc;
    double tail_p = 0.0;
    double tail_c = 0.0;
    for (std::size_t k = 0; k < pmf.size(); ++k) {
        if (pmf[k] * draws >= 20) {
            pc.push_back(pmf[k]);
            cc.push_back(counts[k]);
        } else {
            tail_p += pmf[k];
            tail_c += counts[k];
        }
    }
    if (tail_p > 0) {
        pc.push_back(tail_p);
        cc.push_back(tail_c);
    }
    return goodness_of_fit(cc, pc);
}

}  // namespace

// ---------------------------------------------------------------------------
// Conditional binomial sampler

TEST(ConditionalBinomial, AlwaysPositive) {
    RngStream rng(1, 0);
    for (double p : {1e-9, 1e-4, 0.01, 0.3, 0.9})
        for (int i = 0; i < 20000; ++i) ASSERT_GE(sample_conditional_binomial(37, p, rng), 1);
}

TEST(ConditionalBinomial, FullRateFlipsEverything) {
    RngStream rng(2, 0);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_conditional_binomial(17, 1.0, rng), 17);
}

TEST(ConditionalBinomial, RejectsRateOutsideUnitInterval) {
    RngStream rng(3, 0);
    EXPECT_THROW(sample_conditional_binomial(10, 0.0, rng), ContractViolation);
    EXPECT_THROW(sample_conditional_binomial(10, -0.1, rng), ContractViolation);
    EXPECT_THROW(sample_conditional_binomial(10, 1.5, rng), ContractViolation);
}

TEST(ConditionalBinomial, SingleFlipProbabilityMatchesClosedForm) {
    RngStream rng(4, 0);
    const int draws = 1000000;
    std::vector<double> counts(11, 0.0);
    for (int i = 0; i < draws; ++i) counts[static_cast<std::size_t>(sample_conditional_binomial(10, 0.1, rng))] += 1;
    const auto pmf = truncated_binomial_pmf(10, 0.1);
    EXPECT_NEAR(pmf[1], 0.5948, 5e-5);
    EXPECT_NEAR(counts[1] / draws, 0.5948, 0.003);
    EXPECT_GT(pooled_fit(counts, pmf), 0.001);
}

TEST(ConditionalBinomial, PmfMatchesInBothSamplingRegimes) {
    // The first two cases take the redraw path, the others the direct
    // truncated-geometric path.
    struct Case { int n; double p; };
    for (Case cs : {Case{20, 0.2}, Case{100, 0.05}, Case{30, 0.01}, Case{3000, 1e-5}, Case{5, 0.1}}) {
        RngStream rng(5, static_cast<std::uint64_t>(cs.n));
        const int draws = 400000;
        std::vector<double> counts(static_cast<std::size_t>(cs.n) + 1, 0.0);
        for (int i = 0; i < draws; ++i)
            counts[static_cast<std::size_t>(sample_conditional_binomial(static_cast<std::size_t>(cs.n), cs.p, rng))] += 1;
        EXPECT_GT(pooled_fit(counts, truncated_binomial_pmf(cs.n, cs.p)), 0.001) << "n=" << cs.n << " p=" << cs.p;
    }
}

// ---------------------------------------------------------------------------
// Operators

TEST(FlipExact, ZeroFlipsIsIdentity) {
    RngStream rng(6, 0);
    const BitVector x = sample_uniform(30, rng);
    EXPECT_EQ(flip_exact(x, 0, rng), x);
}

TEST(FlipExact, FullFlipIsComplement) {
    RngStream rng(7, 0);
    const BitVector x = sample_uniform(30, rng);
    EXPECT_EQ(flip_exact(x, 30, rng), x.complement());
}

TEST(FlipExact, HammingDistanceIsExact) {
    RngStream rng(8, 0);
    const BitVector x = sample_uniform(20, rng);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(flip_exact(x, 5, rng).hamming(x), 5u);
}

TEST(FlipExact, PositionsAreUniform) {
    RngStream rng(9, 0);
    const BitVector x = BitVector::zeros(10);
    std::vector<double> counts(10, 0.0);
    for (int i = 0; i < 200000; ++i) {
        const BitVector y = flip_exact(x, 3, rng);
        for (std::size_t j = 0; j < 10; ++j) counts[j] += y[j];
    }
    EXPECT_GT(goodness_of_fit(counts, std::vector<double>(10, 0.1)), 0.001);
}

TEST(FlipExact, TooManyFlipsIsContractViolation) {
    RngStream rng(10, 0);
    EXPECT_THROW(flip_exact(BitVector::zeros(4), 5, rng), ContractViolation);
}

TEST(Crossover, EndpointBiases) {
    RngStream rng(11, 0);
    const BitVector x = sample_uniform(25, rng);
    const BitVector xp = sample_uniform(25, rng);
    EXPECT_EQ(biased_crossover(x, xp, 0.0, rng), x);
    EXPECT_EQ(biased_crossover(x, xp, 1.0, rng), xp);
}

TEST(Crossover, MeanInheritanceMatchesBias) {
    RngStream rng(12, 0);
    const BitVector x = BitVector::zeros(20);
    const BitVector xp = BitVector::ones(20);
    const Target z(20);
    double sum = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) sum += fitness(biased_crossover(x, xp, 0.3, rng), z);
    EXPECT_NEAR(sum / draws, 6.0, 0.05);
}

TEST(Crossover, LengthMismatchIsContractViolation) {
    RngStream rng(13, 0);
    EXPECT_THROW(biased_crossover(BitVector::zeros(3), BitVector::zeros(4), 0.5, rng), ContractViolation);
}

// ---------------------------------------------------------------------------
// One iteration

TEST(Iteration, SkippedOffspringAreNotEvaluated) {
    // With c = 1 every crossover offspring equals x'.
    const ParameterSet ps{2, 0.5, 3, 3.0};
    RngStream rng(14, 0);
    for (int rep = 0; rep < 200; ++rep) {
        GaState s(sample_uniform(50, rng), Target(50));
        if (s.fx == 50) continue;
        EXPECT_EQ(run_iteration(s, ps, Target(50), rng).evals_used, 2);
    }
    // With n = 1 the single flip makes every offspring equal x or x'.
    GaState one(BitVector::zeros(1), Target(1));
    EXPECT_EQ(run_iteration(one, {2, 1.0, 3, 1.0}, Target(1), rng).evals_used, 2);
    EXPECT_EQ(one.fx, 1);
}

TEST(Iteration, AtOptimumIsContractViolation) {
    RngStream rng(15, 0);
    GaState s(BitVector::ones(8), Target(8));
    EXPECT_THROW(run_iteration(s, ParameterSet{}, Target(8), rng), ContractViolation);
}

TEST(Iteration, StateStaysConsistent) {
    RngStream rng(16, 0);
    const Target z(sample_uniform(64, rng));
    GaState s(sample_uniform(64, rng), z);
    std::uint64_t evals = 0;
    for (int i = 0; i < 300 && s.fx < 64; ++i) {
        const int before = s.fx;
        const ParameterSet ps{1 + static_cast<int>(rng.below(6)), 0.5 + rng.uniform(), 1 + static_cast<int>(rng.below(6)),
                              0.5 + rng.uniform()};
        const auto out = run_iteration(s, ps, z, rng);
        evals += static_cast<std::uint64_t>(out.evals_used);
        ASSERT_EQ(s.fx, fitness(s.x, z));
        ASSERT_GE(out.delta_f, 0);
        ASSERT_EQ(s.fx - before, out.delta_f);
        ASSERT_GE(out.evals_used, ps.lambda_m);
        ASSERT_LE(out.evals_used, ps.lambda_m + ps.lambda_c);
        ASSERT_EQ(out.comparison == Comparison::improved, out.delta_f > 0);
    }
    EXPECT_EQ(s.evaluations, evals);
}

TEST(Iteration, TransitionKernelMatchesExhaustiveEnumeration) {
    struct Case { int x; int z; ParameterSet ps; };
    const std::vector<Case> cases = {
        {0, 3, {1, 1.0, 1, 1.0}},
        {0, 3, {2, 0.5, 2, 1.0}},
        {1, 3, {2, 0.5, 2, 1.0}},
        {0, 3, {1, 0.6, 2, 1.2}},
        {2, 1, {2, 0.25, 3, 1.5}},
        {1, 2, {3, 0.4, 2, 0.7}},
    };
    const int trials = 1000000;
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const Case& cs = cases[ci];
        const Kernel2 k = exhaustive_kernel(cs.x, cs.z, cs.ps);
        double mass = 0;
        for (double v : k.prob) mass += v;
        ASSERT_NEAR(mass, 1.0, 1e-12);

        const Target z(from_code(cs.z));
        RngStream rng(17, ci);
        std::vector<double> counts(k.prob.size(), 0.0);
        for (int t = 0; t < trials; ++t) {
            GaState s(from_code(cs.x), z);
            const auto out = run_iteration(s, cs.ps, z, rng);
            counts[static_cast<std::size_t>(to_code(s.x) * (k.max_evals + 1) + out.evals_used)] += 1;
        }
        EXPECT_GT(goodness_of_fit(counts, k.prob), 0.001) << "case " << ci;
    }
}

TEST(Iteration, MatchesDenseReferenceInDistribution) {
    // Two-sample homogeneity test on (delta_f, evals) from a mid-run state.
    const std::size_t n = 12;
    const ParameterSet ps{3, 0.8, 4, 1.3};
    RngStream setup(18, 0);
    const Target z(sample_uniform(n, setup));
    BitVector start = z.bits();
    for (std::size_t i = 0; i < 4; ++i) start.flip(i * 3);

    const int trials = 300000;
    std::map<std::pair<int, int>, std::pair<double, double>> counts;
    RngStream ra(18, 1);
    RngStream rb(18, 2);
    for (int t = 0; t < trials; ++t) {
        GaState s(start, z);
        const auto a = run_iteration(s, ps, z, ra);
        counts[{a.delta_f, a.evals_used}].first += 1;
        BitVector x = start;
        const auto b = dense_iteration(x, z, ps, rb);
        counts[{b.delta_f, b.evals_used}].second += 1;
    }
    double stat = 0;
    int cells = 0;
    for (const auto& [key, c] : counts) {
        if (c.first + c.second < 10) continue;
        stat += (c.first - c.second) * (c.first - c.second) / (c.first + c.second);
        ++cells;
    }
    EXPECT_GT(onell::testing::chi_square_p(stat, cells - 1), 0.001);
}

// ---------------------------------------------------------------------------
// Episodes

TEST(Episode, SingleBitMeanEvaluations) {
    // x = 1 costs nothing; x = 0 is fixed by the one forced flip.
    RngStream rng(19, 0);
    auto policy = make_theory_policy();
    const int runs = 100000;
    double sum = 0;
    for (int i = 0; i < runs; ++i) {
        const RunResult r = run_episode(*policy, 1, default_cutoff(1), rng);
        ASSERT_TRUE(r.success);
        ASSERT_LE(r.evaluations_total, 1u);
        sum += static_cast<double>(r.evaluations_total);
    }
    EXPECT_NEAR(sum / runs, 0.5, 0.005);
}

TEST(Episode, TwoBitMeanEvaluationsMatchMarkovChain) {
    // Expected evaluations to the optimum from each start, solved from
    // the exhaustive kernel, averaged over the uniform start.
    for (const ParameterSet& ps : {ParameterSet{1, 1.0, 1, 1.0}, ParameterSet{2, 0.5, 2, 1.0}, ParameterSet{1, 0.3, 3, 1.4}}) {
        const int z = 3;
        Eigen::Matrix3d a = Eigen::Matrix3d::Identity();
        Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
        for (int x = 0; x < 3; ++x) {
            const Kernel2 k = exhaustive_kernel(x, z, ps);
            for (int nx = 0; nx < 4; ++nx)
                for (int e = 0; e <= k.max_evals; ++e) {
                    const double pr = k.at(nx, e);
                    rhs(x) += pr * e;
                    if (nx != 3) a(x, nx) -= pr;
                }
        }
        const Eigen::Vector3d t = a.partialPivLu().solve(rhs);
        const double expected = (t(0) + t(1) + t(2)) / 4.0;

        ConstantPolicy policy(ps);
        RngStream rng(20, static_cast<std::uint64_t>(ps.lambda_c));
        const int runs = 200000;
        double sum = 0;
        double sq = 0;
        for (int i = 0; i < runs; ++i) {
            const auto e = static_cast<double>(run_episode(policy, 2, 1000000, rng).evaluations_total);
            sum += e;
            sq += e * e;
        }
        const double mean = sum / runs;
        const double se = std::sqrt((sq / runs - mean * mean) / runs);
        EXPECT_NEAR(mean, expected, 4 * se) << "lambda_m=" << ps.lambda_m;
    }
}

TEST(Episode, CutoffStopsAfterFirstIteration) {
    RngStream rng(21, 0);
    auto policy = make_theory_policy();
    for (int i = 0; i < 50; ++i) {
        const RunResult r = run_episode(*policy, 1000, 1, rng);
        EXPECT_FALSE(r.success);
        EXPECT_EQ(r.iterations, 1u);
        EXPECT_GE(r.evaluations_total, 1u);
        EXPECT_LE(r.evaluations_total, 2u);  // lambda_m + lambda_c = 1 + 1 near f = n/2
    }
}

TEST(Episode, InitialPointCostsNothingAtOptimum) {
    RngStream rng(22, 0);
    auto policy = make_theory_policy();
    EpisodeOptions opts;
    opts.cutoff = 100;
    opts.initial_point = BitVector::ones(10);
    const RunResult r = run_episode(*policy, 10, Target(10), opts, rng);
    EXPECT_TRUE(r.success);
    EXPECT_EQ(r.evaluations_total, 0u);
    EXPECT_EQ(r.iterations, 0u);
}

TEST(Episode, TrajectoryIsMonotoneAndConsistent) {
    RngStream rng(23, 0);
    auto policy = make_dmp_policy();
    EpisodeOptions opts;
    opts.cutoff = default_cutoff(200);
    opts.record_trajectory = true;
    const RunResult r = run_episode(*policy, 200, Target(200), opts, rng);
    ASSERT_TRUE(r.trajectory);
    ASSERT_EQ(r.trajectory->size(), r.iterations);
    for (std::size_t i = 1; i < r.trajectory->size(); ++i) {
        EXPECT_GE((*r.trajectory)[i].fx, (*r.trajectory)[i - 1].fx);
        EXPECT_GT((*r.trajectory)[i].evals_cum, (*r.trajectory)[i - 1].evals_cum);
    }
    EXPECT_EQ(r.trajectory->back().evals_cum, r.evaluations_total);
    EXPECT_TRUE(!r.success || r.final_fx == 200);
    EXPECT_TRUE(r.success);
}

TEST(Episode, ConjugatedTargetGivesIdenticalTrajectory) {
    const std::size_t n = 150;
    for (auto make : {&make_theory_policy, &make_irace_policy}) {
        RngStream setup(24, 0);
        const BitVector z = sample_uniform(n, setup);
        const BitVector x0 = sample_uniform(n, setup);
        auto p1 = make();
        auto p2 = make();
        EpisodeOptions a;
        a.cutoff = default_cutoff(n);
        a.record_trajectory = true;
        a.initial_point = x0;
        EpisodeOptions b = a;
        b.initial_point = x0 ^ z.complement();
        RngStream r1(25, 0);
        RngStream r2(25, 0);
        const RunResult ra = run_episode(*p1, n, Target(z), a, r1);
        const RunResult rb = run_episode(*p2, n, Target(n), b, r2);
        ASSERT_EQ(ra.trajectory->size(), rb.trajectory->size());
        for (std::size_t i = 0; i < ra.trajectory->size(); ++i) {
            EXPECT_EQ((*ra.trajectory)[i].fx, (*rb.trajectory)[i].fx);
            EXPECT_EQ((*ra.trajectory)[i].evals_cum, (*rb.trajectory)[i].evals_cum);
        }
        EXPECT_EQ(ra.evaluations_total, rb.evaluations_total);
    }
}

TEST(Episode, FixedSeedIsReproducible) {
    auto policy = make_theory_policy();
    RngStream r1(26, 4);
    RngStream r2(26, 4);
    const RunResult a = run_episode(*policy, 300, default_cutoff(300), r1);
    const RunResult b = run_episode(*policy, 300, default_cutoff(300), r2);
    EXPECT_EQ(a.evaluations_total, b.evaluations_total);
    EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Episode, DefaultCutoffRoundsUp) {
    EXPECT_EQ(default_cutoff(100), 8000u);
    EXPECT_EQ(default_cutoff(3), 8u);  // ceil(7.2)
    EXPECT_EQ(default_cutoff(1), 1u);
}

TEST(Episode, TrajectoryCsvHeader) {
    RngStream rng(27, 0);
    auto policy = make_theory_policy();
    EpisodeOptions opts;
    opts.cutoff = 1000;
    opts.record_trajectory = true;
    const RunResult r = run_episode(*policy, 20, Target(20), opts, rng);
    std::ostringstream os;
    write_trajectory_csv(os, *r.trajectory);
    const std::string s = os.str();
    EXPECT_EQ(s.substr(0, s.find('\n')), "iteration,fx,lambda_m,alpha,lambda_c,beta,evals_cum");
    EXPECT_EQ(static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')), r.trajectory->size() + 1);
}
