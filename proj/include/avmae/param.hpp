#pragma once

#include "avmae/core.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace avmae {

/// Controls how blocks allocate their parameters.  With `allocate == false`
/// every parameter records its shape only, which is how the large presets are
/// counted without materializing hundreds of millions of weights.
struct InitContext {
    Rng rng{0};
    bool allocate = true;

    explicit InitContext(std::uint64_t seed = 0, bool alloc = true) : rng(seed), allocate(alloc) {}
};

enum class ParamKind : std::uint8_t {
    weight,  // matrices; weight decay applies
    vector,  // biases, norm scales, tokens; no weight decay
    buffer,  // non-trainable state (running statistics)
};

template <typename Scalar>
struct Param {
    Index rows = 0;
    Index cols = 0;
    ParamKind kind = ParamKind::weight;
    Mat<Scalar> value;
    Mat<Scalar> grad;

    Param() = default;
    Param(Index r, Index c, ParamKind k) : rows(r), cols(c), kind(k) {}

    Index size() const { return rows * cols; }
    bool allocated() const { return value.rows() == rows && value.cols() == cols; }
    bool trainable() const { return kind != ParamKind::buffer; }

    /// Gradient slot, created zeroed on first use.
    Mat<Scalar>& g()
    {
        if (grad.rows() != rows || grad.cols() != cols)
            grad = Mat<Scalar>::Zero(rows, cols);
        return grad;
    }

    void zero_grad()
    {
        if (grad.size() > 0)
            grad.setZero();
    }

    static Param zeros(Index r, Index c, ParamKind k, const InitContext& ctx)
    {
        Param p(r, c, k);
        if (ctx.allocate)
            p.value = Mat<Scalar>::Zero(r, c);
        return p;
    }

    static Param constant(Index r, Index c, ParamKind k, Scalar v, const InitContext& ctx)
    {
        Param p(r, c, k);
        if (ctx.allocate)
            p.value = Mat<Scalar>::Constant(r, c, v);
        return p;
    }

    // Glorot-uniform over (fan_in, fan_out) = (rows, cols).
    static Param xavier(Index r, Index c, InitContext& ctx)
    {
        Param p(r, c, ParamKind::weight);
        if (ctx.allocate) {
            const double bound = std::sqrt(6.0 / static_cast<double>(r + c));
            p.value.resize(r, c);
            for (Index i = 0; i < p.value.size(); ++i)
                p.value.data()[i] = static_cast<Scalar>((2.0 * uniform01(ctx.rng) - 1.0) * bound);
        }
        return p;
    }

    // Normal(0, std) truncated at two standard deviations.
    static Param trunc_normal(Index r, Index c, double std, ParamKind k, InitContext& ctx)
    {
        Param p(r, c, k);
        if (ctx.allocate) {
            p.value.resize(r, c);
            for (Index i = 0; i < p.value.size(); ++i) {
                double z = normal01(ctx.rng);
                while (std::abs(z) > 2.0)
                    z = normal01(ctx.rng);
                p.value.data()[i] = static_cast<Scalar>(z * std);
            }
        }
        return p;
    }
};

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string&, Param<Scalar>&)>;

inline std::string join_name(const std::string& prefix, const std::string& name)
{
    return prefix.empty() ? name : prefix + "." + name;
}

/// Number of trainable scalars reachable from `block.visit`.
template <typename Block>
Index count_parameters(Block& block)
{
    using Scalar = typename Block::scalar_type;
    Index n = 0;
    block.visit("", [&](const std::string&, Param<Scalar>& p) {
        if (p.trainable())
            n += p.size();
    });
    return n;
}

template <typename Block>
void zero_grads(Block& block)
{
    using Scalar = typename Block::scalar_type;
    block.visit("", [](const std::string&, Param<Scalar>& p) { p.zero_grad(); });
}

template <typename Scalar>
using NamedParams = std::vector<std::pair<std::string, Param<Scalar>*>>;

/// Every parameter of `block` in visit order, buffers included.
template <typename Block>
NamedParams<typename Block::scalar_type> param_list(Block& block, const std::string& prefix = "")
{
    using Scalar = typename Block::scalar_type;
    NamedParams<Scalar> out;
    block.visit(prefix, [&](const std::string& name, Param<Scalar>& p) { out.emplace_back(name, &p); });
    return out;
}

} // namespace avmae
