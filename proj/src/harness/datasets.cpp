#include "dollar/harness/datasets.hpp"

#include <cmath>
#include <numbers>

#include "dollar/error.hpp"
#include "dollar/netcore/rng.hpp"

namespace dollar {

std::string to_string(DomainKind k) {
    return k == DomainKind::gauss2d ? "gauss2d" : "sprites8";
}

DomainKind domain_from_string(const std::string& s) {
    if (s == "gauss2d") {
        return DomainKind::gauss2d;
    }
    if (s == "sprites8") {
        return DomainKind::sprites8;
    }
    throw ContractViolation("unknown domain '" + s + "' (expected gauss2d or sprites8)");
}

ToyDataset ToyDataset::slice(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= size(), "ToyDataset::slice: range out of bounds");
    ToyDataset d = *this;
    d.x = x.rows_slice(begin, end);
    d.c.assign(c.begin() + static_cast<std::ptrdiff_t>(begin), c.begin() + static_cast<std::ptrdiff_t>(end));
    return d;
}

namespace gauss2d {

double global_scale() {
    return std::sqrt(kRadius * kRadius / 2.0 + kStd * kStd);
}

Tensor stored_means() {
    Tensor m({kModes, 2});
    const double s = global_scale();
    for (int k = 0; k < kModes; ++k) {
        const double th = 2.0 * std::numbers::pi * k / kModes;
        m.at(k, 0) = kRadius * std::cos(th) / s;
        m.at(k, 1) = kRadius * std::sin(th) / s;
    }
    return m;
}

}  // namespace gauss2d

ToyDataset gen_gauss2d(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    ToyDataset d;
    d.kind = DomainKind::gauss2d;
    d.seed = seed;
    d.scale = gauss2d::global_scale();
    d.c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        d.c[i] = static_cast<int>(i % gauss2d::kModes);
    }
    for (std::size_t i = n; i > 1; --i) {
        std::swap(d.c[i - 1], d.c[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
    }
    const Tensor means = gauss2d::stored_means();
    const double sd = gauss2d::kStd / d.scale;
    d.x = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(d.c[i]);
        d.x.at(i, 0) = means.at(k, 0) + sd * rng.normal();
        d.x.at(i, 1) = means.at(k, 1) + sd * rng.normal();
    }
    return d;
}

namespace sprites8 {

Tensor templates() {
    Tensor t({kClasses, kPixels});
    auto set = [&](int k, auto pred) {
        for (int r = 0; r < static_cast<int>(kSide); ++r) {
            for (int c = 0; c < static_cast<int>(kSide); ++c) {
                if (pred(r, c)) {
                    t.at(static_cast<std::size_t>(k), static_cast<std::size_t>(r) * kSide + c) = 1.0;
                }
            }
        }
    };
    auto inner = [](int v) { return v >= 1 && v <= 6; };
    set(0, [&](int r, int c) { return (r == 3 || r == 4) && inner(c); });
    set(1, [&](int r, int c) { return (c == 3 || c == 4) && inner(r); });
    set(2, [&](int r, int c) { return ((r == 3 || r == 4) && inner(c)) || ((c == 3 || c == 4) && inner(r)); });
    set(3, [](int r, int c) { return r == c || r + c == 7; });
    set(4, [&](int r, int c) { return inner(r) && inner(c) && (r == 1 || r == 6 || c == 1 || c == 6); });
    set(5, [](int r, int c) { return r >= 2 && r <= 5 && c >= 2 && c <= 5; });
    set(6, [](int r, int c) {
        return (r == 1 || r == 2 || r == 5 || r == 6) && (c == 1 || c == 2 || c == 5 || c == 6);
    });
    set(7, [](int r, int c) { return r % 3 == 1 && c % 3 == 1; });
    return t;
}

}  // namespace sprites8

ToyDataset gen_sprites8(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    const Tensor tmpl = sprites8::templates();
    ToyDataset d;
    d.kind = DomainKind::sprites8;
    d.seed = seed;
    d.x = Tensor({n, sprites8::kPixels});
    d.c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(rng.uniform_int(0, sprites8::kClasses - 1));
        const double b =
            sprites8::kMinBrightness + (sprites8::kMaxBrightness - sprites8::kMinBrightness) * rng.uniform();
        d.c[i] = k;
        for (std::size_t p = 0; p < sprites8::kPixels; ++p) {
            d.x.at(i, p) = b * tmpl.at(static_cast<std::size_t>(k), p);
        }
    }
    return d;
}

ToyDataset generate(DomainKind kind, std::uint64_t seed, std::size_t n) {
    return kind == DomainKind::gauss2d ? gen_gauss2d(seed, n) : gen_sprites8(seed, n);
}

}  // namespace dollar
