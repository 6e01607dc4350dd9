#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dollar/netcore/tensor.hpp"
#include "dollar/schedule/schedule.hpp"

namespace dollar {

enum class FeatureKind { raw, embedded };

/// Rows of `samples` are the points (flattened).
struct SampleSet {
    Tensor samples;
    std::optional<int> condition;
    FeatureKind feature_kind = FeatureKind::raw;

    std::size_t size() const { return samples.empty() ? 0 : samples.rows(); }
};

enum class KernelKind { cosine, rbf };

struct VendiKernel {
    KernelKind kind = KernelKind::cosine;
    /// rbf bandwidth; <= 0 picks the median pairwise distance of the set.
    double sigma = 0.0;
    /// Subtract the set mean before the cosine kernel.
    bool center = false;
};

struct VendiResult {
    double score = 1.0;
    /// Negative eigenvalues were clamped to zero.
    bool clamped = false;
    double min_eigenvalue = 0.0;
};

VendiResult vendi_details(const Tensor& samples, const VendiKernel& kernel = {});
double vendi_score(const Tensor& samples, const VendiKernel& kernel = {});
double vendi_score(const SampleSet& set, const VendiKernel& kernel = {});

/// Mean Vendi score over equally sized groups.
double diversity(const std::vector<SampleSet>& groups, const VendiKernel& kernel = {});

/// Median of pairwise Euclidean distances between rows.
double median_bandwidth(const Tensor& samples);

/// Squared 2-Wasserstein distance between two 1-D empirical distributions
/// (exact, via the quantile functions; sizes may differ).
double wasserstein2_squared_1d(std::vector<double> a, std::vector<double> b);

/// Exact for one column. For D > 1 this is the sliced distance
/// sqrt(D * mean_k W2^2(a.u_k, b.u_k)); the sqrt(D) factor makes it exact
/// for translations. 2-D uses evenly spaced angles, higher dimensions use
/// seeded random directions.
double wasserstein2(const Tensor& a, const Tensor& b, int projections = 128, std::uint64_t seed = 0);
double wasserstein2(const SampleSet& a, const SampleSet& b, int projections = 128, std::uint64_t seed = 0);

/// Biased (V-statistic) squared MMD under an rbf kernel.
double mmd2_rbf(const Tensor& a, const Tensor& b, double sigma);

struct Summary {
    double mean = 0.0;
    double std = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};
Summary summarize(const std::vector<double>& values);

struct TimingRow {
    std::size_t steps = 0;
    double diffusion_ms = 0.0;
    double diffusion_std_ms = 0.0;
    double total_ms = 0.0;
    double total_std_ms = 0.0;
    /// Percentages of the reference (most steps, 50 when present) grid.
    double diffusion_pct = 0.0;
    double total_pct = 0.0;
};

/// Draws one latent batch on the given grid.
using GridSampler = std::function<Tensor(const TimeGrid&)>;
using TensorMap = std::function<Tensor(const Tensor&)>;

/// Wall-clock sampling cost per grid, one warm-up call per grid first.
/// `decode` (may be empty) is applied to the latents and only counted in the
/// end-to-end column.
std::vector<TimingRow> timing_report(const GridSampler& sample, const std::vector<TimeGrid>& grids, int trials,
                                     const TensorMap& decode = {});

std::string format_timing(const std::vector<TimingRow>& rows);

}  // namespace dollar
