#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "atm/matrix.hpp"

// Minimal dense kernels. Everything here is a pure function over immutable
// inputs with a fixed accumulation order: identical inputs give bit-identical
// outputs, which the test suite relies on.

namespace atm {

// a (m x k) times b (k x n). The i-k-j loop order streams b row-wise; each
// output element still accumulates its partial sums in ascending k, so the
// result matches a naive i-j-k triple loop bit for bit.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
    }
    BasicMatrix<T> out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        T* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T aik = a.at(i, k);
            const T* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

// a (m x k) times b^T where b is (n x k). Row-by-row dot products, ascending
// index accumulation.
template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols != b.cols) {
        throw ShapeError("matmul_nt: " + a.shape_str() + " x " + b.shape_str() + "^T");
    }
    BasicMatrix<T> out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const T* arow = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const T* brow = b.data.data() + j * b.cols;
            T acc = T{0};
            for (std::size_t k = 0; k < a.cols; ++k) {
                acc += arow[k] * brow[k];
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

// m (n x k) times w (k x d) plus a per-row bias of length d.
template <typename T>
BasicMatrix<T> linear(const BasicMatrix<T>& m, const BasicMatrix<T>& w, std::span<const T> bias) {
    if (bias.size() != w.cols) {
        throw ShapeError("linear: bias length " + std::to_string(bias.size()) +
                         " vs weight " + w.shape_str());
    }
    BasicMatrix<T> out = matmul(m, w);
    for (std::size_t i = 0; i < out.rows; ++i) {
        T* orow = out.data.data() + i * out.cols;
        for (std::size_t j = 0; j < out.cols; ++j) {
            orow[j] += bias[j];
        }
    }
    return out;
}

// Row-wise softmax with per-row max subtraction, so large logits do not
// overflow.
template <typename T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& m) {
    BasicMatrix<T> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const auto row = m.row(i);
        T max = row[0];
        for (std::size_t j = 1; j < row.size(); ++j) {
            if (row[j] > max) max = row[j];
        }
        T sum = T{0};
        auto orow = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            orow[j] = std::exp(row[j] - max);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < row.size(); ++j) {
            orow[j] /= sum;
        }
    }
    return out;
}

// Per-row standardization followed by the affine map gamma * x + beta_shift.
// eps sits inside the square root; variance is the population variance.
template <typename T>
BasicMatrix<T> layer_norm(const BasicMatrix<T>& m, std::span<const T> gamma,
                          std::span<const T> beta_shift, T eps) {
    if (gamma.size() != m.cols || beta_shift.size() != m.cols) {
        throw ShapeError("layer_norm: affine length vs " + m.shape_str());
    }
    BasicMatrix<T> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const auto row = m.row(i);
        T mean = T{0};
        for (T v : row) mean += v;
        mean /= static_cast<T>(m.cols);
        T var = T{0};
        for (T v : row) {
            const T d = v - mean;
            var += d * d;
        }
        var /= static_cast<T>(m.cols);
        const T inv = T{1} / std::sqrt(var + eps);
        auto orow = out.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) {
            orow[j] = gamma[j] * ((row[j] - mean) * inv) + beta_shift[j];
        }
    }
    return out;
}

// Exact (erf-based) GELU.
template <typename T>
BasicMatrix<T> gelu(const BasicMatrix<T>& m) {
    BasicMatrix<T> out(m.rows, m.cols);
    const T inv_sqrt2 = T{1} / std::sqrt(T{2});
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const T x = m.data[i];
        out.data[i] = T{0.5} * x * (T{1} + std::erf(x * inv_sqrt2));
    }
    return out;
}

// Cosine similarity clamped to [-1, 1]. Identical inputs short-circuit to
// exactly 1 so fixed-point cases (merging a token with its twin) stay exact.
template <typename T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: length mismatch");
    }
    T dot = T{0}, nu = T{0}, nv = T{0};
    for (std::size_t k = 0; k < u.size(); ++k) {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    if (nu == T{0} || nv == T{0}) {
        throw DegenerateInputError("cosine_similarity: zero-norm vector");
    }
    if (std::equal(u.begin(), u.end(), v.begin())) {
        return T{1};
    }
    const T c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, T{-1}, T{1});
}

template <typename T>
T l2_norm(std::span<const T> u) {
    T s = T{0};
    for (T x : u) s += x * x;
    return std::sqrt(s);
}

// Indices of `keys` in ascending key order; equal keys keep their original
// relative order.
template <typename T>
std::vector<std::size_t> argsort_by_key(std::span<const T> keys) {
    std::vector<std::size_t> idx(keys.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    return idx;
}

}  // namespace atm
