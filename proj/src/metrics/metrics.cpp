#include "dollar/metrics/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>
#include <sstream>

#include "dollar/error.hpp"
#include "dollar/netcore/rng.hpp"

namespace dollar {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> as_matrix(const Tensor& x) {
    return {x.data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.size() / x.rows())};
}

Eigen::MatrixXd sq_dists(const RowMat& x) {
    const Eigen::VectorXd n2 = x.rowwise().squaredNorm();
    Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + n2;
    d.rowwise() += n2.transpose();
    return d.cwiseMax(0.0);
}

Eigen::MatrixXd kernel_matrix(const Tensor& samples, const VendiKernel& k) {
    RowMat x = as_matrix(samples);
    const Eigen::Index n = x.rows();
    if (k.kind == KernelKind::cosine) {
        if (k.center) {
            x.rowwise() -= x.colwise().mean();
        }
        Eigen::VectorXd norms = x.rowwise().norm();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (norms(i) > 1e-12) {
                x.row(i) /= norms(i);
            }
        }
        Eigen::MatrixXd K = x * x.transpose();
        K.diagonal().setOnes();
        return K;
    }
    const double sigma = k.sigma > 0.0 ? k.sigma : median_bandwidth(samples);
    require(sigma > 0.0, "vendi: rbf bandwidth is zero (all samples identical?)");
    return (-sq_dists(x) / (2.0 * sigma * sigma)).array().exp().matrix();
}

}  // namespace

VendiResult vendi_details(const Tensor& samples, const VendiKernel& kernel) {
    require(samples.rank() >= 2 && samples.rows() >= 1, "vendi_score: need a nonempty [n, ...] sample set");
    const double n = static_cast<double>(samples.rows());
    const Eigen::MatrixXd K = kernel_matrix(samples, kernel) / n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K, Eigen::EigenvaluesOnly);
    VendiResult r;
    r.min_eigenvalue = es.eigenvalues().minCoeff();
    double h = 0.0;
    for (double l : es.eigenvalues()) {
        if (l < 0.0) {
            r.clamped = true;
            continue;
        }
        if (l > 0.0) {
            h -= l * std::log(l);
        }
    }
    if (r.min_eigenvalue < -1e-8) {
        std::cerr << "warning: vendi kernel not PSD (min eigenvalue " << r.min_eigenvalue << "), clamped\n";
    }
    r.score = std::exp(h);
    return r;
}

double vendi_score(const Tensor& samples, const VendiKernel& kernel) {
    return vendi_details(samples, kernel).score;
}

double vendi_score(const SampleSet& set, const VendiKernel& kernel) {
    return vendi_score(set.samples, kernel);
}

double diversity(const std::vector<SampleSet>& groups, const VendiKernel& kernel) {
    require(!groups.empty(), "diversity: no groups");
    double s = 0.0;
    for (const auto& g : groups) {
        require(g.size() == groups.front().size(), "diversity: groups differ in size");
        s += vendi_score(g, kernel);
    }
    return s / static_cast<double>(groups.size());
}

double median_bandwidth(const Tensor& samples) {
    const Eigen::MatrixXd d = sq_dists(as_matrix(samples));
    std::vector<double> v;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < d.cols(); ++j) {
            v.push_back(std::sqrt(d(i, j)));
        }
    }
    if (v.empty()) {
        return 0.0;
    }
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

double wasserstein2_squared_1d(std::vector<double> a, std::vector<double> b) {
    require(!a.empty() && !b.empty(), "wasserstein2: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    // Walk the merged quantile breakpoints i/na and j/nb.
    std::size_t i = 0, j = 0;
    double u = 0.0, s = 0.0;
    while (i < a.size() && j < b.size()) {
        const double ua = static_cast<double>(i + 1) / na, ub = static_cast<double>(j + 1) / nb;
        const double next = std::min(ua, ub);
        const double d = a[i] - b[j];
        s += (next - u) * d * d;
        u = next;
        if (ua <= next) {
            ++i;
        }
        if (ub <= next) {
            ++j;
        }
    }
    return s;
}

double wasserstein2(const Tensor& a, const Tensor& b, int projections, std::uint64_t seed) {
    require(a.rank() >= 2 && b.rank() >= 2, "wasserstein2: need [n, ...] sample sets");
    const std::size_t D = a.size() / a.rows();
    require(D == b.size() / b.rows(), "wasserstein2: dimension mismatch");
    require(projections >= 2, "wasserstein2: need at least two projections");
    const auto A = as_matrix(a);
    const auto B = as_matrix(b);
    auto project = [](const Eigen::Map<const RowMat>& m, const Eigen::VectorXd& u) {
        const Eigen::VectorXd p = m * u;
        return std::vector<double>(p.data(), p.data() + p.size());
    };
    if (D == 1) {
        const Eigen::VectorXd u = Eigen::VectorXd::Ones(1);
        return std::sqrt(wasserstein2_squared_1d(project(A, u), project(B, u)));
    }
    Rng rng(seed);
    double s = 0.0;
    for (int k = 0; k < projections; ++k) {
        Eigen::VectorXd u(static_cast<Eigen::Index>(D));
        if (D == 2) {
            const double th = std::numbers::pi * k / projections;
            u << std::cos(th), std::sin(th);
        } else {
            for (auto& v : u) {
                v = rng.normal();
            }
            u.normalize();
        }
        s += wasserstein2_squared_1d(project(A, u), project(B, u));
    }
    return std::sqrt(static_cast<double>(D) * s / projections);
}

double wasserstein2(const SampleSet& a, const SampleSet& b, int projections, std::uint64_t seed) {
    return wasserstein2(a.samples, b.samples, projections, seed);
}

double mmd2_rbf(const Tensor& a, const Tensor& b, double sigma) {
    require(sigma > 0.0, "mmd2_rbf: sigma must be positive");
    const auto A = as_matrix(a);
    const auto B = as_matrix(b);
    require(A.cols() == B.cols(), "mmd2_rbf: dimension mismatch");
    auto mean_k = [&](const RowMat& x, const RowMat& y) {
        const Eigen::VectorXd nx = x.rowwise().squaredNorm(), ny = y.rowwise().squaredNorm();
        Eigen::MatrixXd d = (-2.0 * x * y.transpose()).colwise() + nx;
        d.rowwise() += ny.transpose();
        return (-d.cwiseMax(0.0) / (2.0 * sigma * sigma)).array().exp().mean();
    };
    const RowMat ra = A, rb = B;
    return mean_k(ra, ra) + mean_k(rb, rb) - 2.0 * mean_k(ra, rb);
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.n = values.size();
    if (values.empty()) {
        return s;
    }
    for (double v : values) {
        s.mean += v;
    }
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) {
            ss += (v - s.mean) * (v - s.mean);
        }
        s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
        s.stderr_ = s.std / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

std::vector<TimingRow> timing_report(const GridSampler& sample, const std::vector<TimeGrid>& grids, int trials,
                                     const TensorMap& decode) {
    require(trials >= 2, "timing_report: need at least two trials");
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
    std::vector<TimingRow> rows;
    for (const auto& grid : grids) {
        Tensor warm = sample(grid);
        if (decode) {
            warm = decode(warm);
        }
        std::vector<double> diff, total;
        for (int k = 0; k < trials; ++k) {
            const auto t0 = clock::now();
            Tensor z = sample(grid);
            const auto t1 = clock::now();
            if (decode) {
                z = decode(z);
            }
            const auto t2 = clock::now();
            diff.push_back(ms(t1 - t0));
            total.push_back(ms(t2 - t0));
        }
        const Summary d = summarize(diff), t = summarize(total);
        rows.push_back({grid.size(), d.mean, d.std, t.mean, t.std, 0.0, 0.0});
    }
    if (rows.empty()) {
        return rows;
    }
    auto ref = std::find_if(rows.begin(), rows.end(), [](const TimingRow& r) { return r.steps == 50; });
    if (ref == rows.end()) {
        ref = std::max_element(rows.begin(), rows.end(),
                               [](const TimingRow& a, const TimingRow& b) { return a.steps < b.steps; });
    }
    const double rd = ref->diffusion_ms, rt = ref->total_ms;
    for (auto& r : rows) {
        r.diffusion_pct = 100.0 * r.diffusion_ms / rd;
        r.total_pct = 100.0 * r.total_ms / rt;
    }
    return rows;
}

std::string format_timing(const std::vector<TimingRow>& rows) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << "steps  diffusion_ms (pct)        total_ms (pct)\n";
    for (const auto& r : rows) {
        os << r.steps << "  " << r.diffusion_ms << "+-" << r.diffusion_std_ms << " (" << r.diffusion_pct << "%)  "
           << r.total_ms << "+-" << r.total_std_ms << " (" << r.total_pct << "%)\n";
    }
    return os.str();
}

}  // namespace dollar
