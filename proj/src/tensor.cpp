#include "hnf/tensor.hpp"

#include <cmath>
#include <sstream>

namespace hnf {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    const auto n = static_cast<std::size_t>(shape_numel(shape_));
    if (dtype_ == DType::F32) {
        data_ = std::vector<float>(n, 0.0f);
    } else {
        data_ = std::vector<double>(n, 0.0);
    }
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t(std::move(shape), dtype);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, value);
    return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dtype) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeMismatch("Tensor::from: " + shape_str(shape) + " vs " +
                            std::to_string(values.size()) + " values");
    Tensor t(std::move(shape), dtype);
    for (std::size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

int64_t Tensor::numel() const { return shape_numel(shape_); }

double Tensor::at(int64_t i) const {
    if (dtype_ == DType::F32) return static_cast<double>(std::get<std::vector<float>>(data_)[static_cast<std::size_t>(i)]);
    return std::get<std::vector<double>>(data_)[static_cast<std::size_t>(i)];
}

double Tensor::at(int64_t r, int64_t c) const { return at(r * shape_[1] + c); }

void Tensor::set(int64_t i, double v) {
    if (dtype_ == DType::F32) {
        std::get<std::vector<float>>(data_)[static_cast<std::size_t>(i)] = static_cast<float>(v);
    } else {
        std::get<std::vector<double>>(data_)[static_cast<std::size_t>(i)] = v;
    }
}

void Tensor::set(int64_t r, int64_t c, double v) { set(r * shape_[1] + c, v); }

bool Tensor::all_finite() const {
    if (dtype_ == DType::F32) {
        for (float v : std::get<std::vector<float>>(data_))
            if (!std::isfinite(v)) return false;
    } else {
        for (double v : std::get<std::vector<double>>(data_))
            if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    const int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) out.set(i, at(i));
    return out;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(static_cast<int64_t>(i));
    return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    return data_ == other.data_;
}

const Tensor& param_ref(const ParamSet& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw UnknownName(name);
    return it->second;
}

}  // namespace hnf
