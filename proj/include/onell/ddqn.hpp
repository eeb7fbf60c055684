#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "onell/bitstring.hpp"
#include "onell/detail/format.hpp"
#include "onell/error.hpp"
#include "onell/ga.hpp"
#include "onell/nn.hpp"
#include "onell/policy.hpp"
#include "onell/rng.hpp"
#include "onell/stats.hpp"
#include "onell/types.hpp"

namespace onell::rl {

inline constexpr std::array<int, 7> kLambdaGrid{1, 2, 4, 8, 16, 32, 64};
inline constexpr std::array<double, 7> kCoefficientGrid{0.25, 0.542, 0.833, 1.125, 1.417, 1.708, 2.0};
inline constexpr std::size_t kGridSize = 7;

enum class Param : int { lambda_m = 0, alpha = 1, lambda_c = 2, beta = 3 };
inline constexpr std::array<Param, 4> kAllParams{Param::lambda_m, Param::alpha, Param::lambda_c, Param::beta};

inline std::string param_name(Param p) {
    switch (p) {
        case Param::lambda_m: return "lambda_m";
        case Param::alpha: return "alpha";
        case Param::lambda_c: return "lambda_c";
        case Param::beta: return "beta";
    }
    return "?";
}

inline Param parse_param(const std::string& s) {
    for (Param p : kAllParams)
        if (param_name(p) == s) return p;
    throw ValidationError("unknown parameter '" + s + "' (expected lambda_m, alpha, lambda_c or beta)");
}

/// Parameters under RL control. The rest follow the theory defaults.
struct ControlMask {
    std::array<bool, 4> on{true, true, true, true};

    static ControlMask all() { return {}; }
    static ControlMask of(std::initializer_list<Param> ps) {
        ControlMask m{{false, false, false, false}};
        for (Param p : ps) m.on[static_cast<std::size_t>(p)] = true;
        return m;
    }
    static ControlMask parse(const std::vector<std::string>& names) {
        ControlMask m{{false, false, false, false}};
        for (const auto& n : names) m.on[static_cast<std::size_t>(parse_param(n))] = true;
        return m;
    }

    bool contains(Param p) const { return on[static_cast<std::size_t>(p)]; }
    bool empty() const { return std::none_of(on.begin(), on.end(), [](bool b) { return b; }); }

    std::vector<Param> params() const {
        std::vector<Param> out;
        for (Param p : kAllParams)
            if (contains(p)) out.push_back(p);
        return out;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (Param p : params()) out.push_back(param_name(p));
        return out;
    }

    std::string to_string() const {
        std::string s;
        for (Param p : params()) s += (s.empty() ? "" : "+") + param_name(p);
        return s;
    }

    friend bool operator==(const ControlMask&, const ControlMask&) = default;
};

enum class ActionMode { combinatorial, factored };

inline std::string to_string(ActionMode m) { return m == ActionMode::combinatorial ? "combinatorial" : "factored"; }

inline ActionMode parse_action_mode(const std::string& s) {
    if (s == "combinatorial") return ActionMode::combinatorial;
    if (s == "factored") return ActionMode::factored;
    throw ValidationError("unknown action mode '" + s + "' (expected combinatorial or factored)");
}

/// Grid index per controlled parameter, in canonical order.
struct Action {
    std::array<std::uint8_t, 4> index{};
    friend bool operator==(const Action&, const Action&) = default;
};

/**
 * Maps between grid actions and parameter sets. The joint index is
 * mixed-radix over the controlled parameters in the order
 * (lambda_m, alpha, lambda_c, beta), the first one most significant.
 */
class ActionCodec {
public:
    ActionCodec() : ActionCodec(ActionMode::factored, ControlMask::all()) {}
    ActionCodec(ActionMode mode, ControlMask mask) : mode_(mode), mask_(mask), dims_(mask.params()) {
        require(!dims_.empty(), "ActionCodec: at least one parameter must be controlled");
    }

    ActionMode mode() const { return mode_; }
    const ControlMask& mask() const { return mask_; }
    const std::vector<Param>& dims() const { return dims_; }
    std::size_t branches() const { return dims_.size(); }

    std::size_t joint_size() const {
        std::size_t s = 1;
        for (std::size_t i = 0; i < dims_.size(); ++i) s *= kGridSize;
        return s;
    }

    std::vector<int> head_widths() const {
        if (mode_ == ActionMode::combinatorial) return {static_cast<int>(joint_size())};
        return std::vector<int>(dims_.size(), static_cast<int>(kGridSize));
    }

    std::size_t heads() const { return mode_ == ActionMode::combinatorial ? 1 : dims_.size(); }

    std::size_t joint(const Action& a) const {
        std::size_t idx = 0;
        for (std::size_t d = 0; d < dims_.size(); ++d) {
            require(a.index[d] < kGridSize, "ActionCodec: branch index out of range");
            idx = idx * kGridSize + a.index[d];
        }
        return idx;
    }

    Action split(std::size_t joint_index) const {
        require(joint_index < joint_size(), "ActionCodec: joint index " + std::to_string(joint_index) +
                                                " out of range [0, " + std::to_string(joint_size()) + ")");
        Action a;
        for (std::size_t d = dims_.size(); d-- > 0;) {
            a.index[d] = static_cast<std::uint8_t>(joint_index % kGridSize);
            joint_index /= kGridSize;
        }
        return a;
    }

    /// Output row of head h that holds the Q-value of `a`.
    std::size_t output_row(const Action& a, std::size_t h) const {
        if (mode_ == ActionMode::combinatorial) return joint(a);
        return h * kGridSize + a.index[h];
    }

    Action encode(const ParameterSet& ps) const {
        Action a;
        for (std::size_t d = 0; d < dims_.size(); ++d) a.index[d] = grid_index(dims_[d], ps);
        return a;
    }

    std::size_t encode_joint(const ParameterSet& ps) const { return joint(encode(ps)); }

    /// Theory defaults fill the uncontrolled parameters: lambda_m from
    /// the theory formula, lambda_c = lambda_m, alpha = beta = 1.
    ParameterSet decode(const Action& a, int fx, std::size_t n) const {
        ParameterSet ps;
        ps.lambda_m = mask_.contains(Param::lambda_m) ? 0 : theory_policy(fx, n).lambda_m;
        return fill(a, ps);
    }

    /// Decode without a state; needs lambda_m under control.
    ParameterSet decode(const Action& a) const {
        require(mask_.contains(Param::lambda_m),
                "ActionCodec: decoding without a state requires lambda_m to be controlled");
        return fill(a, ParameterSet{});
    }

    ParameterSet decode_joint(std::size_t joint_index) const { return decode(split(joint_index)); }

    Action random_action(RngStream& rng) const {
        if (mode_ == ActionMode::combinatorial) return split(static_cast<std::size_t>(rng.below(joint_size())));
        Action a;
        for (std::size_t d = 0; d < dims_.size(); ++d) a.index[d] = static_cast<std::uint8_t>(rng.below(kGridSize));
        return a;
    }

    /// Greedy action from one column of stacked Q-values; lowest index wins ties.
    template <class Vec>
    Action greedy(const Vec& q) const {
        auto argmax = [&](std::size_t off, std::size_t width) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < width; ++i)
                if (q[static_cast<Eigen::Index>(off + i)] > q[static_cast<Eigen::Index>(off + best)]) best = i;
            return best;
        };
        if (mode_ == ActionMode::combinatorial) return split(argmax(0, joint_size()));
        Action a;
        for (std::size_t d = 0; d < dims_.size(); ++d) a.index[d] = static_cast<std::uint8_t>(argmax(d * kGridSize, kGridSize));
        return a;
    }

private:
    static std::uint8_t grid_index(Param p, const ParameterSet& ps) {
        if (p == Param::lambda_m || p == Param::lambda_c) {
            const int v = p == Param::lambda_m ? ps.lambda_m : ps.lambda_c;
            for (std::size_t i = 0; i < kGridSize; ++i)
                if (kLambdaGrid[i] == v) return static_cast<std::uint8_t>(i);
            throw ContractViolation("ActionCodec: " + param_name(p) + " = " + std::to_string(v) + " is not on the grid");
        }
        const double v = p == Param::alpha ? ps.alpha : ps.beta;
        for (std::size_t i = 0; i < kGridSize; ++i)
            if (std::abs(kCoefficientGrid[i] - v) < 1e-9) return static_cast<std::uint8_t>(i);
        throw ContractViolation("ActionCodec: " + param_name(p) + " = " + detail::format_real(v) + " is not on the grid");
    }

    ParameterSet fill(const Action& a, ParameterSet ps) const {
        ps.alpha = 1.0;
        ps.beta = 1.0;
        bool lc_set = false;
        for (std::size_t d = 0; d < dims_.size(); ++d) {
            require(a.index[d] < kGridSize, "ActionCodec: branch index out of range");
            switch (dims_[d]) {
                case Param::lambda_m: ps.lambda_m = kLambdaGrid[a.index[d]]; break;
                case Param::alpha: ps.alpha = kCoefficientGrid[a.index[d]]; break;
                case Param::lambda_c: ps.lambda_c = kLambdaGrid[a.index[d]]; lc_set = true; break;
                case Param::beta: ps.beta = kCoefficientGrid[a.index[d]]; break;
            }
        }
        if (!lc_set) ps.lambda_c = ps.lambda_m;
        return ps;
    }

    ActionMode mode_;
    ControlMask mask_;
    std::vector<Param> dims_;
};

// ---------------------------------------------------------------------------
// States and rewards

inline std::vector<double> encode_state(int fx, std::size_t n) {
    require(n >= 1 && fx >= 0 && static_cast<std::size_t>(fx) <= n, "encode_state: fx must lie in [0, n]");
    return {static_cast<double>(fx) / static_cast<double>(n)};
}

inline double reward_naive(std::int64_t evals, std::int64_t delta_f) {
    require(evals >= 1, "reward_naive: an iteration uses at least one evaluation");
    return static_cast<double>(-evals + delta_f);
}

inline double reward_shifted(std::int64_t evals, std::int64_t delta_f, double bias) {
    require(bias >= 0.0, "reward_shifted: bias must be non-negative");
    return reward_naive(evals, delta_f) + bias;
}

/// b = max(0, -mean of the warm-up rewards).
inline double compute_adaptive_bias(std::span<const double> warmup_rewards) {
    require(!warmup_rewards.empty(), "compute_adaptive_bias: warm-up buffer is empty");
    const double mean = std::accumulate(warmup_rewards.begin(), warmup_rewards.end(), 0.0) /
                        static_cast<double>(warmup_rewards.size());
    return std::max(0.0, -mean);
}

enum class RewardMode { naive, adaptive_shift };

inline std::string to_string(RewardMode m) { return m == RewardMode::naive ? "naive" : "adaptive_shift"; }

inline RewardMode parse_reward_mode(const std::string& s) {
    if (s == "naive") return RewardMode::naive;
    if (s == "adaptive_shift") return RewardMode::adaptive_shift;
    throw ValidationError("unknown reward mode '" + s + "' (expected naive or adaptive_shift)");
}

// ---------------------------------------------------------------------------
// Replay buffer

struct Transition {
    std::vector<float> state;
    Action action;
    float reward = 0.0f;
    std::vector<float> next_state;
    bool terminal = false;
};

namespace bin {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (static_cast<std::size_t>(is.gcount()) != sizeof v) throw LoadError("trainer state: truncated file");
    return v;
}

template <class T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
    write_pod<std::uint64_t>(os, v.size());
    if (!v.empty()) os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
std::vector<T> read_vec(std::istream& is, std::uint64_t max_len) {
    const auto len = read_pod<std::uint64_t>(is);
    if (len > max_len) throw LoadError("trainer state: implausible array length");
    std::vector<T> v(len);
    if (len) {
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(T)));
        if (static_cast<std::uint64_t>(is.gcount()) != len * sizeof(T)) throw LoadError("trainer state: truncated file");
    }
    return v;
}

}  // namespace bin

/// Fixed-capacity ring of transitions with uniform sampling.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 1000000, std::size_t state_dim = 1)
        : capacity_(capacity), dim_(state_dim) {
        require(capacity >= 1 && state_dim >= 1, "ReplayBuffer: capacity and state_dim must be positive");
    }

    std::size_t size() const { return rewards_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t state_dim() const { return dim_; }

    void push(const Transition& t) {
        require(t.state.size() == dim_ && t.next_state.size() == dim_, "ReplayBuffer: state dimension mismatch");
        require(std::isfinite(t.reward), "ReplayBuffer: reward must be finite");
        if (size() < capacity_) {
            states_.insert(states_.end(), t.state.begin(), t.state.end());
            next_states_.insert(next_states_.end(), t.next_state.begin(), t.next_state.end());
            actions_.push_back(t.action);
            rewards_.push_back(t.reward);
            terminals_.push_back(t.terminal ? 1 : 0);
        } else {
            std::copy(t.state.begin(), t.state.end(), states_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
            std::copy(t.next_state.begin(), t.next_state.end(), next_states_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
            actions_[head_] = t.action;
            rewards_[head_] = t.reward;
            terminals_[head_] = t.terminal ? 1 : 0;
        }
        head_ = (head_ + 1) % capacity_;
    }

    /// Transition i in insertion order, 0 = oldest retained.
    Transition at(std::size_t i) const {
        require(i < size(), "ReplayBuffer: index out of range");
        return slot(size() < capacity_ ? i : (head_ + i) % capacity_);
    }

    Transition slot(std::size_t s) const {
        Transition t;
        t.state.assign(state(s), state(s) + dim_);
        t.next_state.assign(next_state(s), next_state(s) + dim_);
        t.action = actions_[s];
        t.reward = rewards_[s];
        t.terminal = terminals_[s] != 0;
        return t;
    }

    /// Uniform slot indices, with replacement.
    std::vector<std::size_t> sample(std::size_t batch, RngStream& rng) const {
        require(size() > 0, "ReplayBuffer: cannot sample from an empty buffer");
        std::vector<std::size_t> idx(batch);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.below(size()));
        return idx;
    }

    const float* state(std::size_t s) const { return states_.data() + s * dim_; }
    const float* next_state(std::size_t s) const { return next_states_.data() + s * dim_; }
    const Action& action(std::size_t s) const { return actions_[s]; }
    float reward(std::size_t s) const { return rewards_[s]; }
    bool terminal(std::size_t s) const { return terminals_[s] != 0; }

    std::vector<double> rewards() const { return {rewards_.begin(), rewards_.end()}; }

    void add_to_rewards(double b) {
        for (auto& r : rewards_) r = static_cast<float>(r + b);
    }

    void save(std::ostream& os) const {
        bin::write_pod<std::uint64_t>(os, capacity_);
        bin::write_pod<std::uint64_t>(os, dim_);
        bin::write_pod<std::uint64_t>(os, head_);
        bin::write_vec(os, states_);
        bin::write_vec(os, next_states_);
        bin::write_vec(os, actions_);
        bin::write_vec(os, rewards_);
        bin::write_vec(os, terminals_);
    }

    static ReplayBuffer load(std::istream& is) {
        const auto cap = bin::read_pod<std::uint64_t>(is);
        const auto dim = bin::read_pod<std::uint64_t>(is);
        if (cap == 0 || dim == 0 || cap > (1ULL << 32) || dim > 4096) throw LoadError("trainer state: bad replay buffer header");
        ReplayBuffer b(cap, dim);
        b.head_ = bin::read_pod<std::uint64_t>(is);
        b.states_ = bin::read_vec<float>(is, cap * dim);
        b.next_states_ = bin::read_vec<float>(is, cap * dim);
        b.actions_ = bin::read_vec<Action>(is, cap);
        b.rewards_ = bin::read_vec<float>(is, cap);
        b.terminals_ = bin::read_vec<std::uint8_t>(is, cap);
        const std::size_t n = b.rewards_.size();
        if (b.states_.size() != n * dim || b.next_states_.size() != n * dim || b.actions_.size() != n ||
            b.terminals_.size() != n || b.head_ >= cap)
            throw LoadError("trainer state: inconsistent replay buffer");
        return b;
    }

private:
    std::size_t capacity_;
    std::size_t dim_;
    std::size_t head_ = 0;
    std::vector<float> states_;
    std::vector<float> next_states_;
    std::vector<Action> actions_;
    std::vector<float> rewards_;
    std::vector<std::uint8_t> terminals_;
};

// ---------------------------------------------------------------------------
// Action selection and targets

using Net = nn::NetworkParams<float>;

inline nn::NetworkSpec network_spec(const ActionCodec& codec, std::vector<int> trunk = {50, 50}) {
    nn::NetworkSpec s;
    s.input_dim = 1;
    s.trunk = std::move(trunk);
    s.heads = codec.head_widths();
    s.activation = nn::Activation::relu;
    s.validate();
    return s;
}

/// Epsilon-greedy. With probability epsilon a uniform action, otherwise
/// the greedy one (lowest index on ties). Draws nothing when epsilon = 0.
template <class Scalar>
Action select_action(const nn::NetworkParams<Scalar>& params, const nn::NetworkSpec& spec,
                     std::span<const Scalar> state, double epsilon, const ActionCodec& codec, RngStream& rng) {
    require(epsilon >= 0.0 && epsilon <= 1.0, "select_action: epsilon must lie in [0, 1]");
    if (epsilon > 0.0 && rng.uniform() < epsilon) return codec.random_action(rng);
    nn::Matrix<Scalar> x(spec.input_dim, 1);
    for (int i = 0; i < spec.input_dim; ++i) x(i, 0) = state[static_cast<std::size_t>(i)];
    const nn::Matrix<Scalar> q = nn::forward_batch(params, spec, x);
    return codec.greedy(q.col(0));
}

/**
 * Double-Q bootstrap value per head and column: Q_target(s', a*) where
 * a* is the online network's greedy action (per head when factored).
 */
template <class Scalar>
nn::Matrix<Scalar> bootstrap_values(const nn::NetworkParams<Scalar>& online, const nn::NetworkParams<Scalar>& target,
                                    const nn::NetworkSpec& spec, const ActionCodec& codec,
                                    const nn::Matrix<Scalar>& next_states) {
    require(online.same_shape(target), "bootstrap_values: online and target networks differ in shape");
    const nn::Matrix<Scalar> q_on = nn::forward_batch(online, spec, next_states);
    const nn::Matrix<Scalar> q_tg = nn::forward_batch(target, spec, next_states);
    const std::size_t heads = codec.heads();
    nn::Matrix<Scalar> out(static_cast<Eigen::Index>(heads), next_states.cols());
    for (Eigen::Index j = 0; j < next_states.cols(); ++j) {
        const Action a = codec.greedy(q_on.col(j));
        for (std::size_t h = 0; h < heads; ++h)
            out(static_cast<Eigen::Index>(h), j) = q_tg(static_cast<Eigen::Index>(codec.output_row(a, h)), j);
    }
    return out;
}

/// y = r for terminal transitions, else r + gamma * bootstrap (per head).
template <class Scalar>
nn::Matrix<Scalar> td_targets(const nn::NetworkParams<Scalar>& online, const nn::NetworkParams<Scalar>& target,
                              const nn::NetworkSpec& spec, const ActionCodec& codec,
                              const nn::Matrix<Scalar>& next_states, std::span<const Scalar> rewards,
                              std::span<const std::uint8_t> terminal, double gamma) {
    require(gamma >= 0.0 && gamma < 1.0, "td_targets: gamma must lie in [0, 1)");
    require(rewards.size() == static_cast<std::size_t>(next_states.cols()) && terminal.size() == rewards.size(),
            "td_targets: batch length mismatch");
    const nn::Matrix<Scalar> boot = bootstrap_values(online, target, spec, codec, next_states);
    nn::Matrix<Scalar> y(boot.rows(), boot.cols());
    const auto g = static_cast<Scalar>(gamma);
    for (Eigen::Index j = 0; j < boot.cols(); ++j)
        for (Eigen::Index h = 0; h < boot.rows(); ++h)
            y(h, j) = rewards[static_cast<std::size_t>(j)] + (terminal[static_cast<std::size_t>(j)] ? Scalar(0) : g * boot(h, j));
    return y;
}

struct MinibatchGradients {
    double loss = 0.0;
    Net gradients;
};

/**
 * Mean Huber TD loss over the taken action of every head, and its
 * gradient, for the transitions in `slots`.
 *
 * Columns are grouped by distinct state value so the network runs once
 * per distinct state; output gradients of samples sharing a state are
 * summed on that column. Loss and gradient equal the per-sample
 * computation.
 */
inline MinibatchGradients minibatch_gradients(const Net& online, const Net& target, const nn::NetworkSpec& spec,
                                              const ActionCodec& codec, const ReplayBuffer& buffer,
                                              std::span<const std::size_t> slots, double gamma) {
    require(!slots.empty(), "minibatch_gradients: empty batch");
    require(spec.input_dim == 1 && buffer.state_dim() == 1, "minibatch_gradients: expects one state feature");
    const std::size_t B = slots.size();

    auto group = [&](auto state_of, std::vector<float>& uniq, std::vector<std::uint32_t>& col) {
        std::vector<std::uint32_t> order(B);
        std::iota(order.begin(), order.end(), 0u);
        std::sort(order.begin(), order.end(),
                  [&](std::uint32_t i, std::uint32_t j) { return state_of(slots[i]) < state_of(slots[j]); });
        col.assign(B, 0);
        uniq.clear();
        for (std::uint32_t i : order) {
            const float v = state_of(slots[i]);
            if (uniq.empty() || uniq.back() != v) uniq.push_back(v);
            col[i] = static_cast<std::uint32_t>(uniq.size() - 1);
        }
    };
    std::vector<float> s_uniq;
    std::vector<float> sn_uniq;
    std::vector<std::uint32_t> s_col;
    std::vector<std::uint32_t> sn_col;
    group([&](std::size_t s) { return *buffer.state(s); }, s_uniq, s_col);
    group([&](std::size_t s) { return *buffer.next_state(s); }, sn_uniq, sn_col);

    const nn::Matrix<float> S = Eigen::Map<const nn::Matrix<float>>(s_uniq.data(), 1, static_cast<Eigen::Index>(s_uniq.size()));
    const nn::Matrix<float> SN = Eigen::Map<const nn::Matrix<float>>(sn_uniq.data(), 1, static_cast<Eigen::Index>(sn_uniq.size()));
    const nn::Matrix<float> q = nn::forward_batch(online, spec, S);
    const nn::Matrix<float> boot = bootstrap_values(online, target, spec, codec, SN);

    const std::size_t heads = codec.heads();
    const auto g = static_cast<float>(gamma);
    const auto delta = static_cast<float>(nn::kHuberDelta);
    nn::Matrix<float> G = nn::Matrix<float>::Zero(q.rows(), q.cols());
    double loss = 0.0;
    for (std::size_t j = 0; j < B; ++j) {
        const std::size_t slot = slots[j];
        const Action& a = buffer.action(slot);
        const float r = buffer.reward(slot);
        const bool term = buffer.terminal(slot);
        for (std::size_t h = 0; h < heads; ++h) {
            const float y = term ? r : r + g * boot(static_cast<Eigen::Index>(h), sn_col[j]);
            const auto row = static_cast<Eigen::Index>(codec.output_row(a, h));
            const float d = q(row, s_col[j]) - y;
            loss += nn::huber(static_cast<double>(d));
            G(row, s_col[j]) += std::clamp(d, -delta, delta);
        }
    }
    const double count = static_cast<double>(B * heads);
    G /= static_cast<float>(count);
    return {loss / count, nn::backprop(online, spec, S, std::move(G))};
}

// ---------------------------------------------------------------------------
// Greedy policy export

/// Greedy parameters for every fx in [0, n).
template <class Scalar>
TablePolicy greedy_table(const nn::NetworkParams<Scalar>& params, const nn::NetworkSpec& spec,
                         const ActionCodec& codec, std::size_t n, std::string id = "neural") {
    require(n >= 1, "greedy_table: n must be positive");
    require(spec.input_dim == 1, "greedy_table: expects the single-feature state encoding");
    nn::Matrix<Scalar> x(1, static_cast<Eigen::Index>(n));
    for (std::size_t fx = 0; fx < n; ++fx) x(0, static_cast<Eigen::Index>(fx)) = static_cast<Scalar>(encode_state(static_cast<int>(fx), n)[0]);
    const nn::Matrix<Scalar> q = nn::forward_batch(params, spec, x);
    std::vector<ParameterSet> rows;
    rows.reserve(n);
    for (std::size_t fx = 0; fx < n; ++fx)
        rows.push_back(codec.decode(codec.greedy(q.col(static_cast<Eigen::Index>(fx))), static_cast<int>(fx), n));
    return TablePolicy(std::move(rows), std::move(id));
}

/// Greedy network policy. The table is built once per problem size.
class NeuralPolicy : public Policy {
public:
    NeuralPolicy(Net params, nn::NetworkSpec spec, ActionCodec codec, std::string id = "neural")
        : params_(std::make_shared<const Net>(std::move(params))), spec_(std::move(spec)),
          codec_(std::move(codec)), id_(std::move(id)) {
        require(params_->matches(spec_), "NeuralPolicy: parameters do not match the network spec");
    }

    ParameterSet select(int fx, std::size_t n) override {
        if (!table_ || table_->problem_size() != n)
            table_ = std::make_shared<const TablePolicy>(greedy_table(*params_, spec_, codec_, n, id_));
        return table_->lookup(fx, n);
    }

    std::unique_ptr<Policy> clone() const override { return std::make_unique<NeuralPolicy>(*this); }
    std::string name() const override { return id_; }

private:
    std::shared_ptr<const Net> params_;
    nn::NetworkSpec spec_;
    ActionCodec codec_;
    std::string id_;
    std::shared_ptr<const TablePolicy> table_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t n = 100;
    double gamma = 0.9998;
    double epsilon = 0.2;
    std::uint64_t warmup = 10000;
    std::size_t batch_size = 2048;
    double learning_rate = 0.001;
    std::uint64_t budget = 200000;
    double cutoff_factor = 0.8;
    std::uint64_t eval_interval = 2000;
    std::size_t eval_runs = 100;
    std::size_t final_eval_runs = 1000;
    std::size_t top_k = 5;
    std::size_t repetitions = 5;
    RewardMode reward_mode = RewardMode::adaptive_shift;
    std::uint64_t target_update_period = 1000;
    std::size_t buffer_capacity = 1000000;
    ActionMode action_mode = ActionMode::factored;
    ControlMask controlled = ControlMask::all();
    std::vector<int> trunk{50, 50};

    /// Every invalid field, or empty when the config is usable.
    std::vector<std::string> problems() const {
        std::vector<std::string> p;
        if (n < 2) p.push_back("n must be at least 2");
        if (!(gamma > 0.0 && gamma < 1.0)) p.push_back("gamma must lie in (0, 1)");
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) p.push_back("epsilon must lie in [0, 1]");
        if (warmup < 1) p.push_back("warmup must be at least 1");
        if (batch_size < 1) p.push_back("batch_size must be at least 1");
        if (!(learning_rate > 0.0)) p.push_back("learning_rate must be positive");
        if (!(cutoff_factor > 0.0)) p.push_back("cutoff_factor must be positive");
        if (eval_interval < 1) p.push_back("eval_interval must be at least 1");
        if (eval_runs < 1) p.push_back("eval_runs must be at least 1");
        if (final_eval_runs < 1) p.push_back("final_eval_runs must be at least 1");
        if (top_k < 1) p.push_back("top_k must be at least 1");
        if (repetitions < 1) p.push_back("repetitions must be at least 1");
        if (target_update_period < 1) p.push_back("target_update_period must be at least 1");
        if (buffer_capacity < 1) p.push_back("buffer_capacity must be at least 1");
        if (controlled.empty()) p.push_back("controlled must name at least one parameter");
        if (trunk.empty() || std::any_of(trunk.begin(), trunk.end(), [](int w) { return w < 1; }))
            p.push_back("trunk must list positive layer widths");
        return p;
    }

    void validate() const {
        const auto p = problems();
        if (p.empty()) return;
        std::string msg = "invalid training config:";
        for (const auto& s : p) msg += "\n  - " + s;
        throw ValidationError(msg);
    }

    ActionCodec codec() const { return ActionCodec(action_mode, controlled); }
    std::uint64_t cutoff() const { return default_cutoff(n, cutoff_factor); }

    /// Stable key=value rendering, used to fingerprint resumable state.
    std::string canonical() const {
        std::ostringstream os;
        os << "n=" << n << ";gamma=" << detail::format_real(gamma) << ";epsilon=" << detail::format_real(epsilon)
           << ";warmup=" << warmup << ";batch_size=" << batch_size
           << ";learning_rate=" << detail::format_real(learning_rate) << ";budget=" << budget
           << ";cutoff_factor=" << detail::format_real(cutoff_factor) << ";eval_interval=" << eval_interval
           << ";eval_runs=" << eval_runs << ";final_eval_runs=" << final_eval_runs << ";top_k=" << top_k
           << ";reward_mode=" << to_string(reward_mode) << ";target_update_period=" << target_update_period
           << ";buffer_capacity=" << buffer_capacity << ";action_mode=" << to_string(action_mode)
           << ";controlled=" << controlled.to_string() << ";trunk=";
        for (std::size_t i = 0; i < trunk.size(); ++i) os << (i ? "," : "") << trunk[i];
        return os.str();
    }
};

struct Checkpoint {
    std::uint64_t step = 0;
    ErtSummary eval;
    Net params;
};

struct Finalist {
    std::size_t checkpoint = 0;
    ErtSummary summary;
};

struct TrainingArtifact {
    TrainConfig config;
    std::uint64_t seed = 0;
    nn::NetworkSpec spec;
    double reward_bias = 0.0;
    std::vector<Checkpoint> checkpoints;
    std::vector<Finalist> finalists;  // ordered by checkpoint ERT
    std::size_t best = 0;             // index into finalists

    ActionCodec codec() const { return config.codec(); }
    const Checkpoint& best_checkpoint() const { return checkpoints.at(finalists.at(best).checkpoint); }
    const ErtSummary& best_summary() const { return finalists.at(best).summary; }

    /// step,eval_ert_mean,eval_ert_std with ERT and std divided by n.
    void write_learning_curve(std::ostream& os) const {
        os << "step,eval_ert_mean,eval_ert_std\n";
        const auto n = static_cast<double>(config.n);
        for (const auto& c : checkpoints)
            os << c.step << ',' << detail::format_real(c.eval.normalized_ert) << ','
               << detail::format_real(c.eval.std / n) << '\n';
    }
};

/// Table of the best policy's greedy parameters for every fx in [0, n).
inline TablePolicy export_learned_policy(const TrainingArtifact& artifact, std::size_t n) {
    require(!artifact.finalists.empty(), "export_learned_policy: artifact holds no evaluated policy");
    return greedy_table(artifact.best_checkpoint().params, artifact.spec, artifact.codec(), n, "neural");
}

/// Training-time view of one GA run: a persistent episode that restarts
/// after reaching the optimum or the cutoff.
class GaEnvironment {
public:
    GaEnvironment(std::size_t n, std::uint64_t cutoff) : n_(n), cutoff_(cutoff), z_(n) {}

    bool needs_reset() const { return needs_reset_; }
    int fx() const { return state_.fx; }
    std::size_t n() const { return n_; }

    void reset(RngStream& rng) {
        BitVector x = sample_uniform(n_, rng);
        while (fitness(x, z_) == static_cast<int>(n_)) x = sample_uniform(n_, rng);
        state_ = GaState(std::move(x), z_);
        needs_reset_ = false;
    }

    struct Step {
        IterationOutcome outcome;
        bool terminal = false;   // optimum reached
        bool truncated = false;  // cutoff reached first
    };

    Step step(const ParameterSet& ps, RngStream& rng) {
        require(!needs_reset_, "GaEnvironment: episode finished, call reset()");
        Step s;
        s.outcome = run_iteration(state_, ps, z_, rng);
        s.terminal = state_.fx == static_cast<int>(n_);
        s.truncated = !s.terminal && state_.evaluations >= cutoff_;
        needs_reset_ = s.terminal || s.truncated;
        return s;
    }

    void save(std::ostream& os) const {
        bin::write_pod<std::uint8_t>(os, needs_reset_ ? 1 : 0);
        bin::write_pod<std::int32_t>(os, state_.fx);
        bin::write_pod<std::uint64_t>(os, state_.evaluations);
        bin::write_pod<std::uint64_t>(os, state_.iterations);
        std::vector<std::uint8_t> bits(state_.x.raw().begin(), state_.x.raw().end());
        bin::write_vec(os, bits);
        bin::write_vec(os, state_.index_pool);
    }

    void load(std::istream& is) {
        needs_reset_ = bin::read_pod<std::uint8_t>(is) != 0;
        const auto fx = bin::read_pod<std::int32_t>(is);
        const auto evals = bin::read_pod<std::uint64_t>(is);
        const auto iters = bin::read_pod<std::uint64_t>(is);
        const auto bits = bin::read_vec<std::uint8_t>(is, n_);
        auto pool = bin::read_vec<std::uint32_t>(is, n_);
        if (bits.empty()) {  // never reset before the save
            needs_reset_ = true;
            return;
        }
        if (bits.size() != n_ || pool.size() != n_) throw LoadError("trainer state: environment size mismatch");
        BitVector x(n_);
        for (std::size_t i = 0; i < n_; ++i) x.set(i, bits[i] != 0);
        state_ = GaState(std::move(x), z_);
        if (state_.fx != fx) throw LoadError("trainer state: environment fitness mismatch");
        state_.evaluations = evals;
        state_.iterations = iters;
        state_.index_pool = std::move(pool);
    }

private:
    std::size_t n_;
    std::uint64_t cutoff_;
    Target z_;
    GaState state_;
    bool needs_reset_ = true;
};

/**
 * DDQN trainer for one repetition.
 *
 * Warm-up fills the buffer with uniformly random actions (not counted in
 * the step budget). Every training step collects one epsilon-greedy
 * transition and performs one Adam update on a uniform minibatch. The
 * target network is copied every `target_update_period` updates. The
 * greedy policy is evaluated every `eval_interval` steps, or once at the
 * end when the budget is shorter than one interval.
 *
 * Truncation at the cutoff is stored as non-terminal so it bootstraps.
 */
class Trainer {
public:
    using EvalCallback = std::function<void(const Checkpoint&)>;

    Trainer(TrainConfig config, std::uint64_t seed, unsigned parallel = 1)
        : config_((config.validate(), std::move(config))), seed_(seed), parallel_(parallel),
          codec_(config_.codec()), spec_(network_spec(codec_, config_.trunk)),
          env_(config_.n, config_.cutoff()), env_rng_(seed, 1), agent_rng_(seed, 2),
          buffer_(config_.buffer_capacity, 1) {
        RngStream init_rng(seed, 0);
        online_ = nn::init<float>(spec_, init_rng);
        target_ = online_;
        adam_ = nn::AdamState<float>::for_spec(spec_, config_.learning_rate);
    }

    const TrainConfig& config() const { return config_; }
    const nn::NetworkSpec& spec() const { return spec_; }
    const ActionCodec& codec() const { return codec_; }
    const Net& online() const { return online_; }
    const Net& target() const { return target_; }
    const ReplayBuffer& buffer() const { return buffer_; }
    const std::vector<Checkpoint>& checkpoints() const { return checkpoints_; }
    std::uint64_t steps_done() const { return steps_; }
    std::uint64_t gradient_steps() const { return grad_steps_; }
    double reward_bias() const { return bias_; }
    bool warmed_up() const { return warmed_up_; }
    double last_loss() const { return last_loss_; }
    std::uint64_t episodes() const { return episodes_; }

    void on_evaluation(EvalCallback cb) { callback_ = std::move(cb); }

    void warm_up() {
        if (warmed_up_) return;
        for (std::uint64_t i = 0; i < config_.warmup; ++i) collect(codec_.random_action(agent_rng_), 0.0);
        if (config_.reward_mode == RewardMode::adaptive_shift) {
            const auto r = buffer_.rewards();
            bias_ = compute_adaptive_bias(r);
            buffer_.add_to_rewards(bias_);
        }
        warmed_up_ = true;
        if (config_.budget == 0) evaluate_now();
    }

    bool finished() const { return warmed_up_ && steps_ >= config_.budget; }

    /// One environment step and one gradient update.
    void step() {
        require(warmed_up_, "Trainer: warm_up() must run before training steps");
        require(!finished(), "Trainer: budget exhausted");
        if (env_.needs_reset()) begin_episode();
        const float s = state_value();
        const Action a = select_action<float>(online_, spec_, std::span<const float>(&s, 1), config_.epsilon, codec_, agent_rng_);
        collect(a, bias_);
        update();
        ++steps_;
        if (steps_ % config_.eval_interval == 0 || (steps_ == config_.budget && config_.budget < config_.eval_interval))
            evaluate_now();
    }

    /// Runs until the budget is spent or `max_steps` more steps were taken.
    void run(std::uint64_t max_steps = std::numeric_limits<std::uint64_t>::max()) {
        warm_up();
        for (std::uint64_t i = 0; i < max_steps && !finished(); ++i) step();
    }

    /// Re-evaluates the top-k checkpoints and picks the best one.
    TrainingArtifact finish() const {
        require(finished(), "Trainer: training is not finished");
        require(!checkpoints_.empty(), "Trainer: no evaluation was recorded");
        TrainingArtifact art;
        art.config = config_;
        art.seed = seed_;
        art.spec = spec_;
        art.reward_bias = bias_;
        art.checkpoints = checkpoints_;

        std::vector<std::size_t> order(checkpoints_.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return checkpoints_[a].eval.ert < checkpoints_[b].eval.ert;
        });
        order.resize(std::min(order.size(), config_.top_k));
        const auto seeds = seed_range(config_.final_eval_runs);
        const std::uint64_t master = derive_seed(seed_, kFinalEvalStream);
        for (std::size_t idx : order) {
            const TablePolicy table = greedy_table(checkpoints_[idx].params, spec_, codec_, config_.n);
            art.finalists.push_back({idx, evaluate_policy(table, config_.n, seeds, master, config_.cutoff(), parallel_).summary});
        }
        for (std::size_t i = 1; i < art.finalists.size(); ++i)
            if (art.finalists[i].summary.ert < art.finalists[art.best].summary.ert) art.best = i;
        return art;
    }

    // --- resumable state -------------------------------------------------

    void save_state(std::ostream& os) const {
        os.write(kStateMagic, sizeof kStateMagic);
        bin::write_pod<std::uint32_t>(os, kStateVersion);
        bin::write_pod<std::uint64_t>(os, fingerprint());
        bin::write_pod<std::uint64_t>(os, seed_);
        bin::write_pod<std::uint64_t>(os, steps_);
        bin::write_pod<std::uint64_t>(os, grad_steps_);
        bin::write_pod<std::uint64_t>(os, episodes_);
        bin::write_pod<std::uint8_t>(os, warmed_up_ ? 1 : 0);
        bin::write_pod<double>(os, bias_);
        bin::write_pod<double>(os, last_loss_);
        bin::write_pod(os, env_rng_.state());
        bin::write_pod(os, agent_rng_.state());
        nn::serialize(os, online_, spec_);
        nn::serialize(os, target_, spec_);
        nn::serialize(os, adam_.m, spec_);
        nn::serialize(os, adam_.v, spec_);
        bin::write_pod<std::uint64_t>(os, adam_.step);
        env_.save(os);
        buffer_.save(os);
        bin::write_pod<std::uint64_t>(os, checkpoints_.size());
        for (const auto& c : checkpoints_) {
            bin::write_pod<std::uint64_t>(os, c.step);
            bin::write_pod<std::uint64_t>(os, c.eval.runs);
            bin::write_pod<std::uint64_t>(os, c.eval.successes);
            bin::write_pod<double>(os, c.eval.ert);
            bin::write_pod<double>(os, c.eval.normalized_ert);
            bin::write_pod<double>(os, c.eval.std);
            nn::serialize(os, c.params, spec_);
        }
        if (!os) throw LoadError("trainer state: write failed");
    }

    /// Restores a trainer saved with the same config and seed.
    static Trainer resume(TrainConfig config, std::uint64_t seed, std::istream& is, unsigned parallel = 1) {
        Trainer t(std::move(config), seed, parallel);
        char magic[sizeof kStateMagic];
        is.read(magic, sizeof magic);
        if (is.gcount() != static_cast<std::streamsize>(sizeof magic) || std::memcmp(magic, kStateMagic, sizeof magic) != 0)
            throw LoadError("trainer state: bad magic");
        const auto version = bin::read_pod<std::uint32_t>(is);
        if (version != kStateVersion) throw LoadError("trainer state: unsupported version " + std::to_string(version));
        if (bin::read_pod<std::uint64_t>(is) != t.fingerprint())
            throw LoadError("trainer state: saved with a different training config");
        if (bin::read_pod<std::uint64_t>(is) != seed) throw LoadError("trainer state: saved with a different seed");
        t.steps_ = bin::read_pod<std::uint64_t>(is);
        t.grad_steps_ = bin::read_pod<std::uint64_t>(is);
        t.episodes_ = bin::read_pod<std::uint64_t>(is);
        t.warmed_up_ = bin::read_pod<std::uint8_t>(is) != 0;
        t.bias_ = bin::read_pod<double>(is);
        t.last_loss_ = bin::read_pod<double>(is);
        t.env_rng_.set_state(bin::read_pod<RngStream::State>(is));
        t.agent_rng_.set_state(bin::read_pod<RngStream::State>(is));
        t.online_ = nn::deserialize<float>(is, t.spec_);
        t.target_ = nn::deserialize<float>(is, t.spec_);
        t.adam_.m = nn::deserialize<float>(is, t.spec_);
        t.adam_.v = nn::deserialize<float>(is, t.spec_);
        t.adam_.step = bin::read_pod<std::uint64_t>(is);
        t.env_.load(is);
        t.buffer_ = ReplayBuffer::load(is);
        const auto count = bin::read_pod<std::uint64_t>(is);
        if (count > t.config_.budget / t.config_.eval_interval + 2) throw LoadError("trainer state: implausible checkpoint count");
        for (std::uint64_t i = 0; i < count; ++i) {
            Checkpoint c;
            c.step = bin::read_pod<std::uint64_t>(is);
            c.eval.n = t.config_.n;
            c.eval.runs = bin::read_pod<std::uint64_t>(is);
            c.eval.successes = bin::read_pod<std::uint64_t>(is);
            c.eval.ert = bin::read_pod<double>(is);
            c.eval.normalized_ert = bin::read_pod<double>(is);
            c.eval.std = bin::read_pod<double>(is);
            c.params = nn::deserialize<float>(is, t.spec_);
            t.checkpoints_.push_back(std::move(c));
        }
        return t;
    }

private:
    static constexpr char kStateMagic[8] = {'O', 'N', 'E', 'L', 'L', 'T', 'R', '\0'};
    static constexpr std::uint32_t kStateVersion = 1;
    static constexpr std::uint64_t kEvalStream = 101;
    static constexpr std::uint64_t kFinalEvalStream = 102;

    std::uint64_t fingerprint() const {
        nn::detail::Fnv1a h;
        const std::string c = config_.canonical();
        h.feed(c.data(), c.size());
        return h.h;
    }

    float state_value() const { return static_cast<float>(encode_state(env_.fx(), config_.n)[0]); }

    void begin_episode() {
        env_.reset(env_rng_);
        ++episodes_;
    }

    void collect(const Action& a, double bias) {
        if (env_.needs_reset()) begin_episode();
        const int fx = env_.fx();
        Transition t;
        t.state = {state_value()};
        t.action = a;
        const auto st = env_.step(codec_.decode(a, fx, config_.n), env_rng_);
        t.reward = static_cast<float>(reward_naive(st.outcome.evals_used, st.outcome.delta_f) + bias);
        t.next_state = {static_cast<float>(encode_state(env_.fx(), config_.n)[0])};
        t.terminal = st.terminal;
        buffer_.push(t);
    }

    void update() {
        const std::vector<std::size_t> slots = buffer_.sample(config_.batch_size, agent_rng_);
        MinibatchGradients mg = minibatch_gradients(online_, target_, spec_, codec_, buffer_, slots, config_.gamma);
        last_loss_ = mg.loss;
        nn::adam_step(online_, mg.gradients, adam_);
        if (!std::isfinite(last_loss_) || !online_.all_finite())
            throw std::runtime_error("DDQN training diverged at step " + std::to_string(steps_ + 1) +
                                     " (loss " + detail::format_real(last_loss_) + ")");
        ++grad_steps_;
        if (grad_steps_ % config_.target_update_period == 0) target_ = online_;
    }

    void evaluate_now() {
        const TablePolicy table = greedy_table(online_, spec_, codec_, config_.n);
        const auto seeds = seed_range(config_.eval_runs);
        Checkpoint c;
        c.step = steps_;
        c.eval = evaluate_policy(table, config_.n, seeds, derive_seed(seed_, kEvalStream), config_.cutoff(), parallel_).summary;
        c.params = online_;
        checkpoints_.push_back(std::move(c));
        if (callback_) callback_(checkpoints_.back());
    }

    TrainConfig config_;
    std::uint64_t seed_;
    unsigned parallel_;
    ActionCodec codec_;
    nn::NetworkSpec spec_;
    GaEnvironment env_;
    RngStream env_rng_;
    RngStream agent_rng_;
    ReplayBuffer buffer_;
    Net online_;
    Net target_;
    nn::AdamState<float> adam_;
    std::vector<Checkpoint> checkpoints_;
    std::uint64_t steps_ = 0;
    std::uint64_t grad_steps_ = 0;
    std::uint64_t episodes_ = 0;
    bool warmed_up_ = false;
    double bias_ = 0.0;
    double last_loss_ = 0.0;
    EvalCallback callback_;
};

/// One full repetition: warm-up, training, top-k re-evaluation.
inline TrainingArtifact train(const TrainConfig& config, std::uint64_t seed, unsigned parallel = 1,
                              Trainer::EvalCallback on_eval = {}) {
    Trainer t(config, seed, parallel);
    if (on_eval) t.on_evaluation(std::move(on_eval));
    t.run();
    return t.finish();
}

}  // namespace onell::rl
