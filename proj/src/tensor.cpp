#include "medt/tensor.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>

namespace medt {

std::string shape_str(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
{
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values))
{
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
    }
}

Tensor Tensor::matrix(int rows, int cols, std::initializer_list<double> values)
{
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::identity(int n)
{
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

int Tensor::rows() const
{
    if (shape_.empty()) return 0;
    if (shape_.size() == 1) return 1;
    int r = 1;
    for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
    return r;
}

std::span<const double> Tensor::row(int r) const
{
    const auto c = static_cast<std::size_t>(cols());
    return {data_.data() + static_cast<std::size_t>(r) * c, c};
}

std::span<double> Tensor::row(int r)
{
    const auto c = static_cast<std::size_t>(cols());
    return {data_.data() + static_cast<std::size_t>(r) * c, c};
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v)
{
    std::fill(data_.begin(), data_.end(), v);
}

} // namespace medt
