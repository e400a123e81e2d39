#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <Eigen/Dense>

namespace petal {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps these onto exit codes (see tools/petal_cli.cpp).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct GatingError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct IncompatibleError : Error { using Error::Error; };
struct CorruptionError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };
struct ProtocolError : Error { using Error::Error; };
struct ManifestError : Error { using Error::Error; };

/// splitmix64 finalizer; used to derive independent stream seeds from a
/// (seed, tag...) tuple so results never depend on evaluation order.
inline std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a)
{
    return mix_seed(mix_seed(seed) ^ mix_seed(a + 0x51ed27f1ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b)
{
    return derive_seed(derive_seed(seed, a), b);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return derive_seed(seed, h);
}

/// A named tensor with an optional gradient slot. Frozen parameters never
/// allocate a gradient: `grad` stays empty so "no gradient" is observable.
template <typename Scalar>
struct Param {
    std::string name;
    Mat<Scalar> value;
    Mat<Scalar> grad;
    bool trainable = false;

    Param() = default;
    Param(std::string n, Mat<Scalar> v, bool t = false)
        : name(std::move(n)), value(std::move(v)), trainable(t)
    {}

    Eigen::Index size() const { return value.size(); }

    bool has_grad() const { return grad.size() != 0; }

    void zero_grad()
    {
        if (trainable)
            grad.setZero(value.rows(), value.cols());
        else
            grad.resize(0, 0);
    }

    template <typename Derived>
    void accumulate(const Eigen::MatrixBase<Derived>& g)
    {
        if (!trainable)
            return;
        if (grad.size() == 0)
            grad.setZero(value.rows(), value.cols());
        grad += g;
    }
};

template <typename Scalar>
Mat<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::uint64_t seed)
{
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            m(i, j) = static_cast<Scalar>(dist(rng));
    return m;
}

} // namespace petal
