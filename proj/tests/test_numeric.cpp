#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "atm/kernels.hpp"
#include "atm/rng.hpp"

using namespace atm;

namespace {

// Independent oracle: textbook i-j-k triple loop.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            float acc = 0.0f;
            for (std::size_t k = 0; k < a.cols; ++k) {
                acc += a.at(i, k) * b.at(k, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& v : m.data) v = static_cast<float>(rng.gaussian());
    return m;
}

}  // namespace

TEST_CASE("matmul identity and hand-checked products") {
    const Matrix eye = Matrix::from_rows({{1.0f, 0.0f}, {0.0f, 1.0f}});
    const Matrix m = Matrix::from_rows({{3.0f, -2.5f}, {0.125f, 7.0f}});
    const Matrix got = matmul(eye, m);
    CHECK(got.data == m.data);

    const Matrix a = Matrix::from_rows({{1.0f, 2.0f}, {3.0f, 4.0f}});
    const Matrix b = Matrix::from_rows({{0.0f}, {1.0f}});
    const Matrix ab = matmul(a, b);
    CHECK(ab.rows == 2);
    CHECK(ab.cols == 1);
    CHECK(ab.at(0, 0) == 2.0f);
    CHECK(ab.at(1, 0) == 4.0f);
}

TEST_CASE("matmul shape mismatch throws") {
    const Matrix a(2, 3);
    const Matrix b(2, 2);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul matches the naive oracle to 0 ULP") {
    Rng rng(7);
    const Matrix a = random_matrix(rng, 8, 8);
    const Matrix b = random_matrix(rng, 8, 8);
    const Matrix fast = matmul(a, b);
    const Matrix slow = naive_matmul(a, b);
    for (std::size_t i = 0; i < fast.data.size(); ++i) {
        CHECK(fast.data[i] == slow.data[i]);  // bitwise
    }
}

TEST_CASE("matmul oracle agreement across shapes up to 32x32") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.below(32);
        const std::size_t k = 1 + rng.below(32);
        const std::size_t n = 1 + rng.below(32);
        const Matrix a = random_matrix(rng, m, k);
        const Matrix b = random_matrix(rng, k, n);
        const Matrix fast = matmul(a, b);
        const Matrix slow = naive_matmul(a, b);
        REQUIRE(fast.data == slow.data);
    }
}

TEST_CASE("matmul is deterministic") {
    Rng rng(13);
    const Matrix a = random_matrix(rng, 9, 17);
    const Matrix b = random_matrix(rng, 17, 5);
    CHECK(matmul(a, b).data == matmul(a, b).data);
}

TEST_CASE("softmax of a constant row is uniform") {
    const Matrix m = Matrix::from_rows({{0.0f, 0.0f, 0.0f}});
    const Matrix s = softmax_rows(m);
    for (float v : s.data) CHECK(v == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax survives huge logits via max subtraction") {
    const Matrix m = Matrix::from_rows({{1000.0f, 0.0f}});
    const Matrix s = softmax_rows(m);
    CHECK(s.at(0, 0) == doctest::Approx(1.0f).epsilon(1e-6));
    CHECK(s.at(0, 1) == doctest::Approx(0.0f).epsilon(1e-6));
    CHECK(std::isfinite(s.at(0, 0)));
}

TEST_CASE("softmax [1,2,3] matches direct evaluation") {
    // oracle: exp(x_i) / sum exp(x_j) computed in double
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    const Matrix s = softmax_rows(Matrix::from_rows({{1.0f, 2.0f, 3.0f}}));
    CHECK(s.at(0, 0) == doctest::Approx(e1 / z).epsilon(1e-5));
    CHECK(s.at(0, 1) == doctest::Approx(e2 / z).epsilon(1e-5));
    CHECK(s.at(0, 2) == doctest::Approx(e3 / z).epsilon(1e-5));
    CHECK(s.at(0, 0) == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(s.at(0, 1) == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(s.at(0, 2) == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax rows sum to one and shift-invariance holds") {
    Rng rng(17);
    Matrix m(6, 9);
    for (auto& v : m.data) v = static_cast<float>(4.0 * rng.gaussian());
    const Matrix s = softmax_rows(m);
    for (std::size_t i = 0; i < s.rows; ++i) {
        float sum = 0.0f;
        for (float v : s.row(i)) {
            CHECK(v >= 0.0f);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
    }
    Matrix shifted = m;
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (auto& v : shifted.row(i)) v += 3.25f;
    }
    const Matrix s2 = softmax_rows(shifted);
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        CHECK(s2.data[i] == doctest::Approx(s.data[i]).epsilon(1e-6));
    }
}

TEST_CASE("layer_norm maps a constant row to the shift") {
    const Matrix m = Matrix::from_rows({{5.0f, 5.0f, 5.0f, 5.0f}});
    const std::vector<float> gamma(4, 1.0f), beta(4, 0.0f);
    const Matrix out = layer_norm<float>(m, gamma, beta, 1e-6f);
    for (float v : out.data) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("layer_norm standardizes a two-point row") {
    const Matrix m = Matrix::from_rows({{1.0f, 3.0f}});
    const std::vector<float> gamma(2, 1.0f), beta(2, 0.0f);
    const Matrix out = layer_norm<float>(m, gamma, beta, 0.0f);
    CHECK(out.at(0, 0) == doctest::Approx(-1.0f));
    CHECK(out.at(0, 1) == doctest::Approx(1.0f));
}

TEST_CASE("layer_norm matches a 64-bit reference") {
    Rng rng(23);
    const std::size_t cols = 12;
    Matrix m(3, cols);
    for (auto& v : m.data) v = static_cast<float>(2.0 * rng.gaussian() + 0.5);
    std::vector<float> gamma(cols), beta(cols);
    for (auto& g : gamma) g = static_cast<float>(rng.gaussian());
    for (auto& b : beta) b = static_cast<float>(rng.gaussian());

    const Matrix out = layer_norm<float>(m, gamma, beta, 1e-6f);

    // oracle: the same definition recomputed in double
    for (std::size_t i = 0; i < m.rows; ++i) {
        double mean = 0.0;
        for (float v : m.row(i)) mean += v;
        mean /= cols;
        double var = 0.0;
        for (float v : m.row(i)) var += (v - mean) * (v - mean);
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (std::size_t j = 0; j < cols; ++j) {
            const double expect = gamma[j] * ((m.at(i, j) - mean) * inv) + beta[j];
            CHECK(out.at(i, j) == doctest::Approx(expect).epsilon(1e-5));
        }
    }
}

TEST_CASE("cosine similarity basics") {
    const std::vector<float> u{1.0f, 0.0f}, v{0.0f, 1.0f}, w{1.0f, 1.0f};
    CHECK(cosine_similarity<float>(u, u) == 1.0f);
    CHECK(cosine_similarity<float>(u, v) == 0.0f);
    CHECK(cosine_similarity<float>(w, u) == doctest::Approx(0.70711).epsilon(1e-5));
}

TEST_CASE("cosine similarity rejects zero vectors") {
    const std::vector<float> z{0.0f, 0.0f}, u{1.0f, 0.0f};
    CHECK_THROWS_AS(cosine_similarity<float>(z, u), DegenerateInputError);
    CHECK_THROWS_AS(cosine_similarity<float>(u, z), DegenerateInputError);
}

TEST_CASE("cosine similarity of positive scalings stays 1") {
    Rng rng(29);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> u(8);
        for (auto& x : u) x = static_cast<float>(rng.gaussian());
        const float c = static_cast<float>(0.01 + 5.0 * rng.next_unit());
        std::vector<float> cu(u);
        for (auto& x : cu) x *= c;
        CHECK(cosine_similarity<float>(u, cu) == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("cosine similarity stays within [-1, 1]") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> u(4), v(4);
        for (auto& x : u) x = static_cast<float>(rng.gaussian());
        for (auto& x : v) x = static_cast<float>(rng.gaussian());
        const float s = cosine_similarity<float>(u, v);
        CHECK(s >= -1.0f);
        CHECK(s <= 1.0f);
    }
}

TEST_CASE("gelu fixed points and sign behavior") {
    const Matrix m = Matrix::from_rows({{0.0f, 10.0f, -10.0f, 1.0f}});
    const Matrix out = gelu(m);
    CHECK(out.at(0, 0) == 0.0f);
    CHECK(out.at(0, 1) == doctest::Approx(10.0f));
    CHECK(out.at(0, 2) == doctest::Approx(0.0f).epsilon(1e-6));
    // 0.5 * 1 * (1 + erf(1/sqrt(2)))
    CHECK(out.at(0, 3) == doctest::Approx(0.8413447).epsilon(1e-5));
}

TEST_CASE("argsort_by_key is stable") {
    const std::vector<std::uint32_t> keys{3, 1, 1, 2, 7};
    const auto order = argsort_by_key<std::uint32_t>(keys);
    CHECK(order == std::vector<std::size_t>{1, 2, 3, 0, 4});
}
