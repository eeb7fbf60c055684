#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "onell/error.hpp"
#include "onell/rng.hpp"

namespace onell::nn {

enum class Activation : std::uint32_t { relu = 0, tanh = 1 };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

/**
 * Shape of a multi-head perceptron: a trunk of hidden layers followed by
 * one linear output layer whose rows are partitioned into heads.
 */
struct NetworkSpec {
    int input_dim = 1;
    std::vector<int> trunk{50, 50};
    std::vector<int> heads{1};
    Activation activation = Activation::relu;

    int total_outputs() const { return std::accumulate(heads.begin(), heads.end(), 0); }

    /// Row offset of head h inside the stacked output layer.
    int head_offset(std::size_t h) const {
        return std::accumulate(heads.begin(), heads.begin() + static_cast<std::ptrdiff_t>(h), 0);
    }

    void validate() const {
        require(input_dim >= 1, "NetworkSpec: input_dim must be at least 1");
        require(!heads.empty(), "NetworkSpec: at least one head is required");
        for (int w : trunk) require(w >= 1, "NetworkSpec: trunk widths must be at least 1");
        for (int w : heads) require(w >= 1, "NetworkSpec: head widths must be at least 1");
    }

    std::string describe() const {
        std::string s = "input=" + std::to_string(input_dim) + " trunk=[";
        for (std::size_t i = 0; i < trunk.size(); ++i) s += (i ? "," : "") + std::to_string(trunk[i]);
        s += "] heads=[";
        for (std::size_t i = 0; i < heads.size(); ++i) s += (i ? "," : "") + std::to_string(heads[i]);
        return s + "] activation=" + to_string(activation);
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
struct DenseLayer {
    Matrix<Scalar> weight;  // out x in
    Vector<Scalar> bias;    // out
};

/// Trunk layers followed by the stacked output layer. Also used for
/// gradients and Adam moments, which share the parameter shapes.
template <class Scalar>
struct NetworkParams {
    std::vector<DenseLayer<Scalar>> layers;

    static NetworkParams zeros(const NetworkSpec& spec) {
        spec.validate();
        NetworkParams p;
        int in = spec.input_dim;
        for (int w : spec.trunk) {
            p.layers.push_back({Matrix<Scalar>::Zero(w, in), Vector<Scalar>::Zero(w)});
            in = w;
        }
        const int out = spec.total_outputs();
        p.layers.push_back({Matrix<Scalar>::Zero(out, in), Vector<Scalar>::Zero(out)});
        return p;
    }

    std::size_t parameter_count() const {
        std::size_t c = 0;
        for (const auto& l : layers) c += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return c;
    }

    bool all_finite() const {
        for (const auto& l : layers)
            if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
        return true;
    }

    /// Visits every scalar, layer by layer (weights then bias).
    template <class Fn>
    void for_each(Fn&& fn) {
        for (std::size_t li = 0; li < layers.size(); ++li) {
            auto& l = layers[li];
            for (Eigen::Index i = 0; i < l.weight.size(); ++i) fn(l.weight.data()[i]);
            for (Eigen::Index i = 0; i < l.bias.size(); ++i) fn(l.bias.data()[i]);
        }
    }

    bool same_shape(const NetworkParams& o) const {
        if (layers.size() != o.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].weight.rows() != o.layers[i].weight.rows() ||
                layers[i].weight.cols() != o.layers[i].weight.cols() ||
                layers[i].bias.size() != o.layers[i].bias.size())
                return false;
        }
        return true;
    }

    bool matches(const NetworkSpec& spec) const { return same_shape(zeros(spec)); }

    friend bool operator==(const NetworkParams& a, const NetworkParams& b) {
        if (!a.same_shape(b)) return false;
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            if (a.layers[i].weight != b.layers[i].weight || a.layers[i].bias != b.layers[i].bias)
                return false;
        }
        return true;
    }
};

namespace detail {

template <class Scalar>
inline void activate(Matrix<Scalar>& z, Activation a) {
    if (a == Activation::relu)
        z = z.cwiseMax(Scalar(0));
    else
        z = z.array().tanh().matrix();
}

}  // namespace detail

/**
 * Batched forward pass. Columns of `inputs` are samples; the result has
 * one row per output unit (heads stacked in order).
 */
template <class Scalar>
Matrix<Scalar> forward_batch(const NetworkParams<Scalar>& params, const NetworkSpec& spec,
                             const Matrix<Scalar>& inputs) {
    require(inputs.rows() == spec.input_dim, "forward: input has " + std::to_string(inputs.rows()) +
                                                 " rows, spec expects " + std::to_string(spec.input_dim));
    require(params.matches(spec), "forward: parameters do not match the network spec");
    Matrix<Scalar> a = inputs;
    const std::size_t hidden = params.layers.size() - 1;
    for (std::size_t i = 0; i < hidden; ++i) {
        const auto& l = params.layers[i];
        Matrix<Scalar> z = l.weight * a;
        z.colwise() += l.bias;
        detail::activate(z, spec.activation);
        a = std::move(z);
    }
    const auto& out = params.layers.back();
    Matrix<Scalar> q = out.weight * a;
    q.colwise() += out.bias;
    return q;
}

/// Single-sample forward pass returning one vector per head.
template <class Scalar>
std::vector<Vector<Scalar>> forward(const NetworkParams<Scalar>& params, const NetworkSpec& spec,
                                    std::span<const Scalar> input) {
    require(static_cast<int>(input.size()) == spec.input_dim,
            "forward: input length " + std::to_string(input.size()) + " differs from input_dim " +
                std::to_string(spec.input_dim));
    Matrix<Scalar> x(spec.input_dim, 1);
    for (int i = 0; i < spec.input_dim; ++i) x(i, 0) = input[static_cast<std::size_t>(i)];
    const Matrix<Scalar> q = forward_batch(params, spec, x);
    std::vector<Vector<Scalar>> heads;
    int off = 0;
    for (int w : spec.heads) {
        heads.emplace_back(q.block(off, 0, w, 1));
        off += w;
    }
    return heads;
}

/**
 * Supervised batch for the masked Huber loss. `targets` and `mask` have
 * the output layout of forward_batch; mask entries are 0 or 1 and select
 * the outputs that contribute (the taken action of each head).
 */
template <class Scalar>
struct TrainingBatch {
    Matrix<Scalar> inputs;
    Matrix<Scalar> targets;
    Matrix<Scalar> mask;
};

template <class Scalar>
struct LossAndGradients {
    Scalar loss = 0;
    NetworkParams<Scalar> gradients;
};

inline constexpr double kHuberDelta = 1.0;

template <class Scalar>
Scalar huber(Scalar d, Scalar delta = Scalar(kHuberDelta)) {
    const Scalar ad = std::abs(d);
    return ad <= delta ? Scalar(0.5) * d * d : delta * (ad - Scalar(0.5) * delta);
}

/// Loss value only: mean Huber error over the masked outputs.
template <class Scalar>
Scalar masked_huber_loss(const NetworkParams<Scalar>& params, const NetworkSpec& spec,
                         const TrainingBatch<Scalar>& batch) {
    const Matrix<Scalar> q = forward_batch(params, spec, batch.inputs);
    const Scalar count = batch.mask.sum();
    require(count > 0, "masked_huber_loss: mask selects no outputs");
    Scalar total = 0;
    for (Eigen::Index j = 0; j < q.cols(); ++j)
        for (Eigen::Index i = 0; i < q.rows(); ++i)
            if (batch.mask(i, j) != Scalar(0)) total += huber(q(i, j) - batch.targets(i, j));
    return total / count;
}

/**
 * Parameter gradients for an arbitrary upstream gradient on the outputs.
 * `output_grad` has the shape of forward_batch(params, spec, inputs).
 */
template <class Scalar>
NetworkParams<Scalar> backprop(const NetworkParams<Scalar>& params, const NetworkSpec& spec,
                               const Matrix<Scalar>& inputs, Matrix<Scalar> output_grad) {
    require(params.matches(spec), "backprop: parameters do not match the network spec");
    require(inputs.rows() == spec.input_dim && output_grad.rows() == spec.total_outputs() &&
                output_grad.cols() == inputs.cols(),
            "backprop: input or gradient shape does not match the spec");
    const std::size_t hidden = params.layers.size() - 1;
    std::vector<Matrix<Scalar>> acts;  // acts[0] = input, acts[i+1] = output of hidden layer i
    acts.reserve(hidden + 1);
    acts.push_back(inputs);
    for (std::size_t i = 0; i < hidden; ++i) {
        const auto& l = params.layers[i];
        Matrix<Scalar> z = l.weight * acts.back();
        z.colwise() += l.bias;
        detail::activate(z, spec.activation);
        acts.push_back(std::move(z));
    }

    NetworkParams<Scalar> grads;
    grads.layers.resize(params.layers.size());
    Matrix<Scalar>& grad = output_grad;
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const Matrix<Scalar>& below = acts[li];
        auto& g = grads.layers[li];
        g.weight.noalias() = grad * below.transpose();
        g.bias = grad.rowwise().sum();
        if (li == 0) break;
        Matrix<Scalar> up = params.layers[li].weight.transpose() * grad;
        if (spec.activation == Activation::relu)
            grad = up.cwiseProduct(below.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); }));
        else
            grad = up.cwiseProduct(below.unaryExpr([](Scalar v) { return Scalar(1) - v * v; }));
    }
    return grads;
}

/// Backpropagation of the mean masked Huber loss.
template <class Scalar>
LossAndGradients<Scalar> backward(const NetworkParams<Scalar>& params, const NetworkSpec& spec,
                                  const TrainingBatch<Scalar>& batch) {
    require(batch.inputs.cols() > 0, "backward: empty batch");
    const Eigen::Index outputs = spec.total_outputs();
    require(batch.targets.rows() == outputs && batch.mask.rows() == outputs &&
                batch.targets.cols() == batch.inputs.cols() && batch.mask.cols() == batch.inputs.cols(),
            "backward: target/mask shape does not match outputs x batch");
    const Matrix<Scalar> q = forward_batch(params, spec, batch.inputs);
    const Scalar count = batch.mask.sum();
    require(count > 0, "backward: mask selects no outputs");
    const Scalar delta = Scalar(kHuberDelta);
    const Matrix<Scalar> diff = (q - batch.targets).cwiseProduct(batch.mask);

    LossAndGradients<Scalar> res;
    res.loss = diff.unaryExpr([&](Scalar d) { return huber(d, delta); }).sum() / count;
    res.gradients = backprop(params, spec, batch.inputs, Matrix<Scalar>(diff.cwiseMax(-delta).cwiseMin(delta) / count));
    return res;
}

/// Adam optimizer state with bias correction.
template <class Scalar>
struct AdamState {
    NetworkParams<Scalar> m;
    NetworkParams<Scalar> v;
    std::uint64_t step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_spec(const NetworkSpec& spec, double lr = 1e-3) {
        AdamState s;
        s.m = NetworkParams<Scalar>::zeros(spec);
        s.v = NetworkParams<Scalar>::zeros(spec);
        s.learning_rate = lr;
        return s;
    }
};

template <class Scalar>
void adam_step(NetworkParams<Scalar>& params, const NetworkParams<Scalar>& grads, AdamState<Scalar>& adam) {
    require(params.same_shape(grads) && params.same_shape(adam.m) && params.same_shape(adam.v),
            "adam_step: shape mismatch between parameters, gradients and moments");
    ++adam.step;
    const double t = static_cast<double>(adam.step);
    const auto c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(adam.beta1, t)));
    const auto c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(adam.beta2, t)));
    const auto b1 = static_cast<Scalar>(adam.beta1);
    const auto b2 = static_cast<Scalar>(adam.beta2);
    const auto lr = static_cast<Scalar>(adam.learning_rate);
    const auto eps = static_cast<Scalar>(adam.epsilon);

    auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
        p.array() -= lr * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
    };
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        update(params.layers[i].weight, grads.layers[i].weight, adam.m.layers[i].weight, adam.v.layers[i].weight);
        update(params.layers[i].bias, grads.layers[i].bias, adam.m.layers[i].bias, adam.v.layers[i].bias);
    }
}

/// Fan-in scaled uniform weights, zero biases. Hidden layers use the
/// ReLU gain (limit sqrt(6/fan_in)); the linear output layer uses
/// limit sqrt(3/fan_in).
template <class Scalar>
NetworkParams<Scalar> init(const NetworkSpec& spec, RngStream& rng) {
    NetworkParams<Scalar> p = NetworkParams<Scalar>::zeros(spec);
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        auto& w = p.layers[li].weight;
        const double fan_in = static_cast<double>(w.cols());
        const bool hidden = li + 1 < p.layers.size();
        const double gain = hidden && spec.activation == Activation::relu ? 6.0 : 3.0;
        const double limit = std::sqrt(gain / fan_in);
        for (Eigen::Index i = 0; i < w.size(); ++i)
            w.data()[i] = static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * limit);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Model files.
//
// Layout (all integers little-endian):
//   magic     8 bytes  "ONELLNN\0"
//   version   u32      = 1
//   scalar    u32      bytes per parameter (4 = float, 8 = double)
//   input     u32
//   activation u32     0 = relu, 1 = tanh
//   trunk     u32 count, then count x u32 widths
//   heads     u32 count, then count x u32 widths
//   per layer (trunk..., output): weight column-major (out*in scalars), bias (out scalars)
//   checksum  u64      FNV-1a over every preceding byte

inline constexpr char kModelMagic[8] = {'O', 'N', 'E', 'L', 'L', 'N', 'N', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void feed(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    }
};

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    void bytes(const void* data, std::size_t n) {
        hash_.feed(data, n);
        os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    std::uint64_t digest() const { return hash_.h; }
    std::ostream& stream() { return os_; }

private:
    std::ostream& os_;
    Fnv1a hash_;
};

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}
    void bytes(void* data, std::size_t n, const char* what) {
        is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n)
            throw LoadError(std::string("model file truncated while reading ") + what);
        hash_.feed(data, n);
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v = 0;
        bytes(&v, sizeof v, what);
        return v;
    }
    std::uint64_t digest() const { return hash_.h; }
    std::istream& stream() { return is_; }

private:
    std::istream& is_;
    Fnv1a hash_;
};

}  // namespace detail

template <class Scalar>
void serialize(std::ostream& os, const NetworkParams<Scalar>& params, const NetworkSpec& spec) {
    require(params.matches(spec), "serialize: parameters do not match the network spec");
    detail::Writer w(os);
    w.bytes(kModelMagic, sizeof kModelMagic);
    w.u32(kModelVersion);
    w.u32(sizeof(Scalar));
    w.u32(static_cast<std::uint32_t>(spec.input_dim));
    w.u32(static_cast<std::uint32_t>(spec.activation));
    w.u32(static_cast<std::uint32_t>(spec.trunk.size()));
    for (int t : spec.trunk) w.u32(static_cast<std::uint32_t>(t));
    w.u32(static_cast<std::uint32_t>(spec.heads.size()));
    for (int h : spec.heads) w.u32(static_cast<std::uint32_t>(h));
    for (const auto& l : params.layers) {
        w.bytes(l.weight.data(), sizeof(Scalar) * static_cast<std::size_t>(l.weight.size()));
        w.bytes(l.bias.data(), sizeof(Scalar) * static_cast<std::size_t>(l.bias.size()));
    }
    const std::uint64_t digest = w.digest();
    os.write(reinterpret_cast<const char*>(&digest), sizeof digest);
    if (!os) throw LoadError("serialize: write failed");
}

template <class Scalar>
struct LoadedModel {
    NetworkSpec spec;
    NetworkParams<Scalar> params;
};

/// Reads a model file. Nothing is returned unless the whole file parses
/// and its checksum matches.
template <class Scalar>
LoadedModel<Scalar> deserialize(std::istream& is) {
    detail::Reader r(is);
    char magic[8];
    r.bytes(magic, sizeof magic, "magic");
    if (std::memcmp(magic, kModelMagic, sizeof magic) != 0) throw LoadError("model file: bad magic");
    const std::uint32_t version = r.u32("version");
    if (version != kModelVersion)
        throw LoadError("model file: version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kModelVersion) + ")");
    const std::uint32_t scalar = r.u32("scalar width");
    if (scalar != sizeof(Scalar))
        throw LoadError("model file: stores " + std::to_string(scalar) + "-byte parameters, loader expects " +
                        std::to_string(sizeof(Scalar)));
    LoadedModel<Scalar> m;
    m.spec.input_dim = static_cast<int>(r.u32("input_dim"));
    const std::uint32_t act = r.u32("activation");
    if (act > 1) throw LoadError("model file: unknown activation " + std::to_string(act));
    m.spec.activation = static_cast<Activation>(act);
    constexpr std::uint32_t kMaxLayers = 64;
    constexpr std::uint32_t kMaxWidth = 1u << 20;
    const std::uint32_t n_trunk = r.u32("trunk count");
    if (n_trunk > kMaxLayers) throw LoadError("model file: implausible trunk depth");
    m.spec.trunk.resize(n_trunk);
    for (auto& t : m.spec.trunk) {
        t = static_cast<int>(r.u32("trunk width"));
        if (t < 1 || static_cast<std::uint32_t>(t) > kMaxWidth) throw LoadError("model file: bad trunk width");
    }
    const std::uint32_t n_heads = r.u32("head count");
    if (n_heads == 0 || n_heads > kMaxLayers) throw LoadError("model file: bad head count");
    m.spec.heads.resize(n_heads);
    for (auto& h : m.spec.heads) {
        h = static_cast<int>(r.u32("head width"));
        if (h < 1 || static_cast<std::uint32_t>(h) > kMaxWidth) throw LoadError("model file: bad head width");
    }
    if (m.spec.input_dim < 1 || static_cast<std::uint32_t>(m.spec.input_dim) > kMaxWidth)
        throw LoadError("model file: bad input_dim");
    m.params = NetworkParams<Scalar>::zeros(m.spec);
    for (auto& l : m.params.layers) {
        r.bytes(l.weight.data(), sizeof(Scalar) * static_cast<std::size_t>(l.weight.size()), "weights");
        r.bytes(l.bias.data(), sizeof(Scalar) * static_cast<std::size_t>(l.bias.size()), "biases");
    }
    const std::uint64_t expected = r.digest();
    std::uint64_t stored = 0;
    is.read(reinterpret_cast<char*>(&stored), sizeof stored);
    if (static_cast<std::size_t>(is.gcount()) != sizeof stored)
        throw LoadError("model file truncated while reading checksum");
    if (stored != expected) throw LoadError("model file: checksum mismatch");
    return m;
}

/// Loads and checks the stored spec against the one the caller expects.
template <class Scalar>
NetworkParams<Scalar> deserialize(std::istream& is, const NetworkSpec& expected) {
    LoadedModel<Scalar> m = deserialize<Scalar>(is);
    if (!(m.spec == expected))
        throw LoadError("model file: spec mismatch, file has {" + m.spec.describe() + "}, expected {" +
                        expected.describe() + "}");
    return std::move(m.params);
}

}  // namespace onell::nn
