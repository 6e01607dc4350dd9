#include "dollar/netcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dollar/error.hpp"

namespace dollar {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(shape_),
            "Tensor: data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const { return shape_.empty() ? 0 : shape_[0]; }

std::size_t Tensor::cols() const {
    if (shape_.empty()) {
        return 0;
    }
    std::size_t n = 1;
    for (std::size_t i = 1; i < shape_.size(); ++i) {
        n *= shape_[i];
    }
    return n;
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == data_.size(), "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::row(std::size_t r) const { return rows_slice(r, r + 1); }

Tensor Tensor::rows_slice(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= rows(), "rows_slice out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t c = cols();
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                                    data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    Shape s = parts.front().shape();
    std::size_t rows = 0;
    std::vector<double> data;
    for (const auto& p : parts) {
        require(p.cols() == parts.front().cols() && p.rank() == s.size(), "concat_rows: trailing shape mismatch");
        rows += p.rows();
        data.insert(data.end(), p.values().begin(), p.values().end());
    }
    s[0] = rows;
    return Tensor(std::move(s), std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace dollar
