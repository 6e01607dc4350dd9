#include "dollar/reward/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "dollar/error.hpp"

namespace dollar {

double PixelReward::evaluate(const Tensor& row, int c) const {
    return fn(row.data(), row.size(), c);
}

Tensor PixelReward::evaluate_batch(const Tensor& pixels, const std::vector<int>& c) const {
    require(pixels.rank() >= 2, "PixelReward: expected [n, D] pixels");
    const std::size_t n = pixels.rows(), D = pixels.size() / n;
    require(c.size() == n, "PixelReward: one condition per row");
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = fn(pixels.data() + i * D, D, c[i]);
    }
    if (group > 1) {
        require(n % group == 0, "PixelReward: rows must split into whole groups");
        for (std::size_t g = 0; g < n; g += group) {
            double m = 0.0;
            for (std::size_t i = g; i < g + group; ++i) {
                m += out[i];
            }
            for (std::size_t i = g; i < g + group; ++i) {
                out[i] = m / static_cast<double>(group);
            }
        }
    }
    return out;
}

PixelReward reward_brightness() {
    return {"brightness",
            [](const double* x, std::size_t d, int) {
                double s = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    s += x[i];
                }
                return s / static_cast<double>(d);
            },
            true, false};
}

PixelReward reward_compressibility() {
    return {"compressibility",
            [](const double* x, std::size_t d, int) {
                std::set<int> levels;
                for (std::size_t i = 0; i < d; ++i) {
                    const double v = std::clamp(x[i], 0.0, 1.0);
                    levels.insert(std::min(3, static_cast<int>(std::floor(v * 4.0))));
                }
                return -static_cast<double>(levels.size());
            },
            false, false};
}

PixelReward reward_mode_affinity(Tensor targets) {
    require(targets.rank() == 2 && targets.rows() > 0, "mode_affinity: targets must be [K, D]");
    return {"mode_affinity",
            [targets = std::move(targets)](const double* x, std::size_t d, int c) {
                require(d == targets.cols(), "mode_affinity: dimension mismatch");
                auto dist = [&](std::size_t k) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double e = x[i] - targets.at(k, i);
                        s += e * e;
                    }
                    return std::sqrt(s);
                };
                if (c >= 0 && static_cast<std::size_t>(c) < targets.rows()) {
                    return -dist(static_cast<std::size_t>(c));
                }
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < targets.rows(); ++k) {
                    best = std::min(best, dist(k));
                }
                return -best;
            },
            true, true};
}

PixelReward reward_constant(double value) {
    return {"constant", [value](const double*, std::size_t, int) { return value; }, true, false};
}

PixelReward make_pixel_reward(const std::string& name, DomainKind domain) {
    if (name == "brightness") {
        return reward_brightness();
    }
    if (name == "compressibility") {
        return reward_compressibility();
    }
    if (name == "mode_affinity") {
        return reward_mode_affinity(domain == DomainKind::gauss2d ? gauss2d::stored_means() : sprites8::templates());
    }
    if (name.rfind("constant:", 0) == 0) {
        return reward_constant(std::stod(name.substr(9)));
    }
    throw ContractViolation("unknown reward '" + name + "'");
}

std::vector<std::string> pixel_reward_names() {
    return {"brightness", "compressibility", "mode_affinity", "constant:<value>"};
}

PixelReward group_average(PixelReward base, std::size_t group) {
    require(group > 0, "group_average: group size must be positive");
    base.name += "@group" + std::to_string(group);
    base.group = group;
    return base;
}

}  // namespace dollar
