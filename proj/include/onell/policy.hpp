#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "onell/detail/format.hpp"
#include "onell/error.hpp"
#include "onell/types.hpp"

namespace onell {

namespace detail {

inline void require_below_optimum(int fx, std::size_t n, const char* who) {
    require(n >= 1, std::string(who) + ": n must be at least 1");
    require(fx >= 0 && fx < static_cast<int>(n),
            std::string(who) + ": fitness must lie in [0, n)");
}

/// sqrt(n / (n - fx)), the theory-recommended population size.
inline double theory_lambda(int fx, std::size_t n) {
    return std::sqrt(static_cast<double>(n) / static_cast<double>(static_cast<int>(n) - fx));
}

/// True on the early branch of the derived policy: f(x)/n <= 0.95.
inline bool dmp_early_phase(int fx, std::size_t n) {
    return static_cast<double>(fx) / static_cast<double>(n) <= 0.95;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pure fitness-based policies.

/// lambda_m = lambda_c = sqrt(n/(n - f(x))), alpha = beta = 1.
inline ParameterSet theory_policy(int fx, std::size_t n) {
    detail::require_below_optimum(fx, n, "theory_policy");
    const int lambda = round_lambda(detail::theory_lambda(fx, n));
    return {lambda, 1.0, lambda, 1.0};
}

/// The derived multi-parameter policy.
inline ParameterSet dmp_policy(int fx, std::size_t n) {
    detail::require_below_optimum(fx, n, "dmp_policy");
    const double root = detail::theory_lambda(fx, n);
    const bool early = detail::dmp_early_phase(fx, n);
    ParameterSet ps;
    ps.lambda_m = early ? 1 : round_lambda(root);
    ps.alpha = early ? 0.001 : 1.0;
    ps.lambda_c = round_lambda(2.0 * root);
    ps.beta = 1.0;
    return ps;
}

/// dmp_policy with the U-shaped alpha schedule (0.5 / 0.001 / 1).
inline ParameterSet ushape_alpha_policy(int fx, std::size_t n) {
    detail::require_below_optimum(fx, n, "ushape_alpha_policy");
    ParameterSet ps = dmp_policy(fx, n);
    const double nd = static_cast<double>(n);
    if (fx < 0.85 * nd)
        ps.alpha = 0.5;
    else if (fx <= 0.95 * nd)
        ps.alpha = 0.001;
    else
        ps.alpha = 1.0;
    return ps;
}

/// Adapts a pure function of (fx, n) to the Policy interface.
class FunctionPolicy final : public Policy {
public:
    using Fn = ParameterSet (*)(int, std::size_t);

    FunctionPolicy(Fn fn, std::string id) : fn_(fn), id_(std::move(id)) {}

    ParameterSet select(int fx, std::size_t n) override { return fn_(fx, n); }
    std::unique_ptr<Policy> clone() const override { return std::make_unique<FunctionPolicy>(*this); }
    std::string name() const override { return id_; }

private:
    Fn fn_;
    std::string id_;
};

inline PolicyPtr make_theory_policy() { return std::make_unique<FunctionPolicy>(&theory_policy, "theory"); }
inline PolicyPtr make_dmp_policy() { return std::make_unique<FunctionPolicy>(&dmp_policy, "dmp"); }
inline PolicyPtr make_ushape_policy() {
    return std::make_unique<FunctionPolicy>(&ushape_alpha_policy, "ushape");
}

/// Returns the same parameters at every fitness.
class ConstantPolicy final : public Policy {
public:
    explicit ConstantPolicy(ParameterSet ps) : ps_(ps) { ps_.validate(); }

    ParameterSet select(int, std::size_t) override { return ps_; }
    std::unique_ptr<Policy> clone() const override { return std::make_unique<ConstantPolicy>(*this); }
    std::string name() const override { return "constant"; }

private:
    ParameterSet ps_;
};

// ---------------------------------------------------------------------------
// Self-adjusting family.

struct SelfAdjustConfig {
    double alpha = 1.0;
    double beta = 1.0;
    double crossover_ratio = 1.0;  // lambda_c = crossover_ratio * lambda_m
    double A = 1.5;                // growth factor after a non-improving iteration, > 1
    double b = 2.0 / 3.0;          // shrink factor after a strict improvement, in (0, 1)
    double lambda_init = 1.0;

    void validate() const {
        require(A > 1.0, "SelfAdjustConfig: A must exceed 1");
        require(b > 0.0 && b < 1.0, "SelfAdjustConfig: b must lie in (0, 1)");
        require(alpha > 0.0 && beta > 0.0 && crossover_ratio > 0.0,
                "SelfAdjustConfig: alpha, beta and crossover_ratio must be positive");
        require(lambda_init >= 1.0, "SelfAdjustConfig: lambda_init must be at least 1");
    }
};

/**
 * Multiplicative update of a real-valued lambda_m: times b after a strict
 * improvement, times A after an equal or worse iteration, clamped to
 * [1, n - 1]. The value is rounded only when parameters are selected.
 *
 * With A = F^(1/4) and b = 1/F, lambda_m is stationary when one iteration
 * in five improves (b * A^4 = 1).
 */
class SelfAdjustingPolicy final : public Policy {
public:
    explicit SelfAdjustingPolicy(SelfAdjustConfig cfg, std::string id = "self_adjusting")
        : cfg_(cfg), id_(std::move(id)), lambda_(cfg.lambda_init) {
        cfg_.validate();
    }

    ParameterSet select(int /*fx*/, std::size_t n) override {
        n_ = n;
        ParameterSet ps;
        ps.lambda_m = std::clamp(round_lambda(lambda_), 1, upper_int(n));
        ps.lambda_c = round_lambda(cfg_.crossover_ratio * lambda_);
        ps.alpha = cfg_.alpha;
        ps.beta = cfg_.beta;
        return ps;
    }

    void observe(const IterationOutcome& outcome) override {
        const double factor = outcome.comparison == Comparison::improved ? cfg_.b : cfg_.A;
        lambda_ = std::clamp(factor * lambda_, 1.0, upper_real(n_));
    }

    void reset() override { lambda_ = cfg_.lambda_init; }

    std::unique_ptr<Policy> clone() const override {
        return std::make_unique<SelfAdjustingPolicy>(*this);
    }
    std::string name() const override { return id_; }

    double lambda() const noexcept { return lambda_; }
    void set_lambda(double v) { lambda_ = v; }
    void set_problem_size(std::size_t n) { n_ = n; }
    const SelfAdjustConfig& config() const noexcept { return cfg_; }

private:
    static int upper_int(std::size_t n) { return std::max(1, static_cast<int>(n) - 1); }
    static double upper_real(std::size_t n) {
        return n == 0 ? 1e300 : std::max(1.0, static_cast<double>(n) - 1.0);
    }

    SelfAdjustConfig cfg_;
    std::string id_;
    double lambda_;
    std::size_t n_ = 0;  // unknown until the first select
};

constexpr double kDefaultOneFifthF = 1.5;

inline SelfAdjustConfig one_fifth_config(double F = kDefaultOneFifthF) {
    require(F > 1.0, "one_fifth_policy: F must exceed 1");
    SelfAdjustConfig cfg;
    cfg.A = std::pow(F, 0.25);
    cfg.b = 1.0 / F;
    return cfg;
}

inline PolicyPtr make_one_fifth_policy(double F = kDefaultOneFifthF) {
    return std::make_unique<SelfAdjustingPolicy>(one_fifth_config(F), "one_fifth");
}

/// Statically tuned constants of the irace-configured self-adjusting GA.
inline SelfAdjustConfig irace_config() {
    SelfAdjustConfig cfg;
    cfg.alpha = 0.3594;
    cfg.beta = 1.4128;
    cfg.crossover_ratio = 1.2379;
    cfg.A = 1.1672;
    cfg.b = 0.691;
    return cfg;
}

inline PolicyPtr make_irace_policy() {
    return std::make_unique<SelfAdjustingPolicy>(irace_config(), "irace");
}

// ---------------------------------------------------------------------------
// Lookup tables.

/// Fitness-indexed parameter table. Row fx holds the parameters for f(x) = fx.
class TablePolicy final : public Policy {
public:
    TablePolicy() = default;
    explicit TablePolicy(std::vector<ParameterSet> rows, std::string id = "table")
        : rows_(std::move(rows)), id_(std::move(id)) {
        require(!rows_.empty(), "TablePolicy: table must not be empty");
        for (const auto& r : rows_) r.validate();
    }

    /// Materializes any policy's selection at every fitness below n. The
    /// policy is reset before each query, so only pure policies give a
    /// faithful table.
    static TablePolicy from_policy(Policy& policy, std::size_t n, std::string id = "table") {
        std::vector<ParameterSet> rows;
        rows.reserve(n);
        for (std::size_t fx = 0; fx < n; ++fx) {
            policy.reset();
            rows.push_back(policy.select(static_cast<int>(fx), n));
        }
        return TablePolicy(std::move(rows), std::move(id));
    }

    ParameterSet select(int fx, std::size_t n) override { return lookup(fx, n); }

    ParameterSet lookup(int fx, std::size_t n) const {
        require(n == rows_.size(), "TablePolicy: table was built for n = " +
                                       std::to_string(rows_.size()) + ", queried with n = " +
                                       std::to_string(n));
        require(fx >= 0 && static_cast<std::size_t>(fx) < rows_.size(),
                "TablePolicy: fitness outside the table");
        return rows_[static_cast<std::size_t>(fx)];
    }

    std::unique_ptr<Policy> clone() const override { return std::make_unique<TablePolicy>(*this); }
    std::string name() const override { return id_; }

    std::size_t problem_size() const noexcept { return rows_.size(); }
    const std::vector<ParameterSet>& rows() const noexcept { return rows_; }

    /// CSV with header "fx,lambda_m,alpha,lambda_c,beta", one row per fitness.
    void write_csv(std::ostream& os) const {
        os << "fx,lambda_m,alpha,lambda_c,beta\n";
        for (std::size_t fx = 0; fx < rows_.size(); ++fx) {
            const auto& r = rows_[fx];
            os << fx << ',' << r.lambda_m << ',' << detail::format_real(r.alpha) << ','
               << r.lambda_c << ',' << detail::format_real(r.beta) << '\n';
        }
    }

    /// Parses the CSV schema above. Rows may come in any order but every
    /// fitness in [0, n) must appear exactly once, where n is the row count.
    static TablePolicy read_csv(std::istream& is, std::string id = "table") {
        std::string line;
        if (!std::getline(is, line)) throw LoadError("policy table: empty input");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line != "fx,lambda_m,alpha,lambda_c,beta")
            throw LoadError("policy table: bad header '" + line + "'");

        std::map<long long, ParameterSet> by_fx;
        std::size_t row_no = 1;
        while (std::getline(is, line)) {
            ++row_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            auto fail = [&](const std::string& why) {
                throw LoadError("policy table: row " + std::to_string(row_no) + ": " + why);
            };
            if (cells.size() != 5) fail("expected 5 fields, got " + std::to_string(cells.size()));
            long long fx = 0, lm = 0, lc = 0;
            double alpha = 0, beta = 0;
            if (!detail::parse_int(cells[0], fx) || fx < 0) fail("invalid fx '" + cells[0] + "'");
            if (!detail::parse_int(cells[1], lm) || lm < 1) fail("invalid lambda_m '" + cells[1] + "'");
            if (!detail::parse_real(cells[2], alpha) || !(alpha > 0) || !std::isfinite(alpha))
                fail("invalid alpha '" + cells[2] + "'");
            if (!detail::parse_int(cells[3], lc) || lc < 1) fail("invalid lambda_c '" + cells[3] + "'");
            if (!detail::parse_real(cells[4], beta) || !(beta > 0) || !std::isfinite(beta))
                fail("invalid beta '" + cells[4] + "'");
            if (by_fx.count(fx)) fail("duplicate fx " + std::to_string(fx));
            by_fx[fx] = ParameterSet{static_cast<int>(lm), alpha, static_cast<int>(lc), beta};
        }
        if (by_fx.empty()) throw LoadError("policy table: no rows");
        const auto n = static_cast<long long>(by_fx.size());
        std::vector<ParameterSet> rows;
        rows.reserve(by_fx.size());
        for (long long fx = 0; fx < n; ++fx) {
            auto it = by_fx.find(fx);
            if (it == by_fx.end())
                throw LoadError("policy table: missing row for fx = " + std::to_string(fx));
            rows.push_back(it->second);
        }
        return TablePolicy(std::move(rows), std::move(id));
    }

    static TablePolicy load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("policy table: cannot open '" + path + "'");
        return read_csv(in, "table:" + path);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw LoadError("policy table: cannot write '" + path + "'");
        write_csv(out);
    }

private:
    std::vector<ParameterSet> rows_;
    std::string id_ = "table";
};

// ---------------------------------------------------------------------------
// Per-parameter composition (mix-and-match ablations).

enum class SourceKind { theory_default, dmp_formula, constant, rl_table };

struct ParameterSource {
    SourceKind kind = SourceKind::theory_default;
    double value = 1.0;  // used by `constant`

    static ParameterSource theory() { return {SourceKind::theory_default, 1.0}; }
    static ParameterSource dmp() { return {SourceKind::dmp_formula, 1.0}; }
    static ParameterSource constant(double v) { return {SourceKind::constant, v}; }
    static ParameterSource table() { return {SourceKind::rl_table, 1.0}; }
};

/**
 * One source per parameter. `theory_default` resolves lambda_m by the
 * theory formula, lambda_c to the resolved lambda_m, and alpha = beta = 1.
 * `rl_table` reads the parameter from a table policy supplied alongside.
 */
struct PerParameterSource {
    ParameterSource lambda_m;
    ParameterSource alpha;
    ParameterSource lambda_c;
    ParameterSource beta;
};

class CompositePolicy final : public Policy {
public:
    explicit CompositePolicy(PerParameterSource sources,
                             std::shared_ptr<const TablePolicy> table = nullptr,
                             std::string id = "composite")
        : src_(sources), table_(std::move(table)), id_(std::move(id)) {
        for (const auto* s : {&src_.lambda_m, &src_.alpha, &src_.lambda_c, &src_.beta}) {
            if (s->kind == SourceKind::rl_table)
                require(table_ != nullptr, "CompositePolicy: rl_table source needs a table");
            if (s->kind == SourceKind::constant)
                require(s->value > 0.0, "CompositePolicy: constant sources must be positive");
        }
    }

    ParameterSet select(int fx, std::size_t n) override {
        detail::require_below_optimum(fx, n, "CompositePolicy");
        const ParameterSet dmp = dmp_policy(fx, n);
        ParameterSet tab;
        if (table_) tab = table_->lookup(fx, n);

        ParameterSet ps;
        switch (src_.lambda_m.kind) {
            case SourceKind::theory_default: ps.lambda_m = round_lambda(detail::theory_lambda(fx, n)); break;
            case SourceKind::dmp_formula: ps.lambda_m = dmp.lambda_m; break;
            case SourceKind::constant: ps.lambda_m = round_lambda(src_.lambda_m.value); break;
            case SourceKind::rl_table: ps.lambda_m = tab.lambda_m; break;
        }
        switch (src_.lambda_c.kind) {
            case SourceKind::theory_default: ps.lambda_c = ps.lambda_m; break;
            case SourceKind::dmp_formula: ps.lambda_c = dmp.lambda_c; break;
            case SourceKind::constant: ps.lambda_c = round_lambda(src_.lambda_c.value); break;
            case SourceKind::rl_table: ps.lambda_c = tab.lambda_c; break;
        }
        ps.alpha = resolve_real(src_.alpha, dmp.alpha, tab.alpha);
        ps.beta = resolve_real(src_.beta, dmp.beta, tab.beta);
        return ps;
    }

    std::unique_ptr<Policy> clone() const override { return std::make_unique<CompositePolicy>(*this); }
    std::string name() const override { return id_; }
    const PerParameterSource& sources() const noexcept { return src_; }

private:
    static double resolve_real(const ParameterSource& s, double dmp_value, double table_value) {
        switch (s.kind) {
            case SourceKind::theory_default: return 1.0;
            case SourceKind::dmp_formula: return dmp_value;
            case SourceKind::constant: return s.value;
            case SourceKind::rl_table: return table_value;
        }
        return 1.0;
    }

    PerParameterSource src_;
    std::shared_ptr<const TablePolicy> table_;
    std::string id_;
};

}  // namespace onell
