#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "atm/error.hpp"

namespace atm {

// Dense row-major matrix. float carries model activations, double backs the
// theory checks.
template <typename T>
struct BasicMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;  // rows * cols, row-major

    BasicMatrix() = default;

    BasicMatrix(std::size_t r, std::size_t c, T fill = T{0})
        : rows(r), cols(c), data(r * c, fill) {}

    static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> init) {
        BasicMatrix m;
        m.rows = init.size();
        m.cols = init.size() ? init.begin()->size() : 0;
        m.data.reserve(m.rows * m.cols);
        for (const auto& row : init) {
            if (row.size() != m.cols) {
                throw ShapeError("from_rows: ragged initializer");
            }
            m.data.insert(m.data.end(), row.begin(), row.end());
        }
        return m;
    }

    T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const BasicMatrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

}  // namespace atm
