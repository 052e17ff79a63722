#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace avmae {

using Index = Eigen::Index;

// Row-major dense matrix; every token sequence is a Mat with one token per row.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Thrown by backward passes that were not preceded by a recorded forward pass.
class StateError : public Error {
public:
    using Error::Error;
};

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view what)
{
    if (!m.derived().allFinite())
        throw NonFiniteError("non-finite value in " + std::string(what));
}

inline void require_shape(bool ok, std::string_view msg)
{
    if (!ok)
        throw ShapeError(std::string(msg));
}

inline std::string shape_str(Index rows, Index cols)
{
    return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m)
{
    return shape_str(m.rows(), m.cols());
}

// splitmix64 finalizer; used to derive independent per-sample RNG streams.
inline std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0)
{
    return mix_seed(mix_seed(mix_seed(mix_seed(seed) ^ a) ^ b) ^ c);
}

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits; platform independent.
inline double uniform01(Rng& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Box-Muller normal; used instead of std::normal_distribution so streams are
/// identical across standard library implementations.
inline double normal01(Rng& rng)
{
    double u1 = uniform01(rng);
    while (u1 <= 0.0)
        u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n)
{
    return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Fisher-Yates shuffle driven by uniform_index (std::shuffle is not portable).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

} // namespace avmae
