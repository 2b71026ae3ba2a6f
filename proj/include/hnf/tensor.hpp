#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hnf/errors.hpp"

namespace hnf {

enum class DType { F32, F64 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor. Values live in a single contiguous buffer whose
/// element type is selected by the dtype tag.
class Tensor {
  public:
    Tensor() : shape_{0}, dtype_(DType::F64), data_(std::vector<double>{}) {}
    Tensor(Shape shape, DType dtype);

    static Tensor zeros(Shape shape, DType dtype = DType::F64);
    static Tensor full(Shape shape, double value, DType dtype = DType::F64);
    static Tensor scalar(double value, DType dtype = DType::F64);
    static Tensor from(Shape shape, const std::vector<double>& values, DType dtype = DType::F64);

    const Shape& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int64_t numel() const;
    bool empty() const { return numel() == 0; }

    double at(int64_t i) const;
    double at(int64_t r, int64_t c) const;  // rank-2 convenience
    void set(int64_t i, double v);
    void set(int64_t r, int64_t c, double v);

    template <typename T>
    std::span<const T> data() const {
        return std::span<const T>(std::get<std::vector<T>>(data_));
    }
    template <typename T>
    std::span<T> data() {
        return std::span<T>(std::get<std::vector<T>>(data_));
    }

    bool all_finite() const;
    Tensor astype(DType dt) const;
    std::vector<double> to_vector() const;

    /// Exact element-wise equality (shape, dtype and bits).
    bool bit_equal(const Tensor& other) const;

  private:
    Shape shape_;
    DType dtype_;
    std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Trainable tensors addressable by hierarchical dot-separated name.
/// std::map keeps iteration deterministic (lexicographic).
using ParamSet = std::map<std::string, Tensor>;

const Tensor& param_ref(const ParamSet& params, const std::string& name);

}  // namespace hnf
