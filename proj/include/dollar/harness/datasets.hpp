#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dollar/netcore/tensor.hpp"

namespace dollar {

enum class DomainKind { gauss2d, sprites8 };

std::string to_string(DomainKind k);
DomainKind domain_from_string(const std::string& s);

struct ToyDataset {
    DomainKind kind = DomainKind::gauss2d;
    std::uint64_t seed = 0;
    /// gauss2d: [n, 2] coordinates divided by `scale`; sprites8: [n, 64]
    /// pixels in [0, 1] (row-major 8x8).
    Tensor x;
    std::vector<int> c;
    /// Raw-to-stored divisor (1 for sprites).
    double scale = 1.0;

    std::size_t size() const { return c.size(); }
    /// Subset of rows [begin, end).
    ToyDataset slice(std::size_t begin, std::size_t end) const;
};

namespace gauss2d {
inline constexpr int kModes = 8;
inline constexpr double kRadius = 4.0;
inline constexpr double kStd = 0.1;
/// sqrt(r^2 / 2 + std^2): the global per-coordinate std of the mixture.
double global_scale();
/// Mode means in stored (rescaled) coordinates, [8, 2].
Tensor stored_means();
}  // namespace gauss2d

/// Eight Gaussians on the radius-4 circle, std 0.1, class = mode index with
/// exactly balanced counts (shuffled), stored rescaled to unit global std.
ToyDataset gen_gauss2d(std::uint64_t seed, std::size_t n);

namespace sprites8 {
inline constexpr int kClasses = 8;
inline constexpr std::size_t kSide = 8;
inline constexpr std::size_t kPixels = kSide * kSide;
inline constexpr double kMinBrightness = 0.5;
inline constexpr double kMaxBrightness = 1.0;
/// Binary class templates [8, 64]: hbar, vbar, plus, X, box outline,
/// filled square, corner blocks, dot lattice.
Tensor templates();
}  // namespace sprites8

/// Template times a uniform brightness in [0.5, 1], uniformly drawn class.
ToyDataset gen_sprites8(std::uint64_t seed, std::size_t n);

ToyDataset generate(DomainKind kind, std::uint64_t seed, std::size_t n);

}  // namespace dollar
