#include "atm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "atm/kernels.hpp"
#include "atm/rng.hpp"

namespace atm::theory {

double MergeErrorCase::delta() const {
    return 1.0 - cosine_similarity<double>(x_i, x_j);
}

void MergeErrorCase::validate() const {
    if (x_i.size() != x_j.size() || x_i.empty()) {
        throw ShapeError("merge error case: vectors must share a nonzero dimension");
    }
    if (n_i < 1 || n_j < 1) {
        throw DegenerateInputError("merge error case: merging sizes must be >= 1");
    }
    for (const auto* v : {&x_i, &x_j}) {
        const double norm = l2_norm<double>(*v);
        if (std::abs(norm - 1.0) > 1e-12) {
            throw DegenerateInputError("merge error case: input is not a unit vector (norm " +
                                       std::to_string(norm) + ")");
        }
    }
}

double merging_error_direct(const MergeErrorCase& c) {
    c.validate();
    const double ni = static_cast<double>(c.n_i);
    const double nj = static_cast<double>(c.n_j);
    std::vector<double> merged(c.x_i.size());
    for (std::size_t k = 0; k < merged.size(); ++k) {
        merged[k] = (ni * c.x_i[k] + nj * c.x_j[k]) / (ni + nj);
    }
    if (l2_norm<double>(merged) == 0.0) {
        throw DegenerateInputError("merging error: merged token is the zero vector");
    }
    const double di = 1.0 - cosine_similarity<double>(c.x_i, merged);
    const double dj = 1.0 - cosine_similarity<double>(c.x_j, merged);
    return ni * di + nj * dj;
}

double merging_error_closed(std::uint64_t n_i, std::uint64_t n_j, double cos_ij) {
    if (cos_ij < -1.0 || cos_ij > 1.0) {
        throw DegenerateInputError("merging_error_closed: cosine outside [-1, 1]");
    }
    const double ni = static_cast<double>(n_i);
    const double nj = static_cast<double>(n_j);
    return (ni + nj) - std::sqrt(ni * ni + nj * nj + 2.0 * ni * nj * cos_ij);
}

ErrorBounds merging_error_bounds(std::uint64_t n_i, std::uint64_t n_j, double delta) {
    if (delta < 0.0 || delta > 2.0) {
        throw DegenerateInputError("merging_error_bounds: delta outside [0, 2]");
    }
    const double m = static_cast<double>(n_i) * static_cast<double>(n_j);
    const double n = static_cast<double>(n_i) + static_cast<double>(n_j);
    ErrorBounds b;
    b.lower = (m / n) * delta;
    b.upper = 2.0 * b.lower;  // exact doubling keeps upper/lower == 2
    return b;
}

namespace {

std::vector<double> random_unit_vector(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        for (auto& x : v) x = rng.gaussian();
        norm = l2_norm<double>(v);
    } while (norm < 1e-12);
    for (auto& x : v) x /= norm;
    // One re-normalization pass absorbs the division rounding.
    const double n2 = l2_norm<double>(v);
    for (auto& x : v) x /= n2;
    return v;
}

MergeErrorCase random_case(std::uint64_t case_seed, std::size_t dim, std::uint64_t max_size) {
    Rng rng(case_seed);
    MergeErrorCase c;
    c.x_i = random_unit_vector(rng, dim);
    c.x_j = random_unit_vector(rng, dim);
    c.n_i = 1 + rng.below(max_size);
    c.n_j = 1 + rng.below(max_size);
    return c;
}

}  // namespace

VerifyReport verify_bounds(const VerifyOptions& opts) {
    if (opts.trials < 1) throw ConfigError("verify_bounds: trials must be >= 1");
    VerifyReport report;
    report.trials = opts.trials;
    report.min_ratio_to_lower = std::numeric_limits<double>::infinity();
    report.max_ratio_to_upper = 0.0;

    for (std::uint64_t t = 0; t < opts.trials; ++t) {
        const std::uint64_t case_seed = Rng::derive(opts.seed, t);
        const MergeErrorCase c = random_case(case_seed, opts.dim, opts.max_size);
        const double delta = c.delta();
        const double error = merging_error_direct(c);
        ErrorBounds b = merging_error_bounds(c.n_i, c.n_j, delta);
        b.upper = opts.upper_coefficient * b.lower;

        if (b.lower > 0.0) {
            report.min_ratio_to_lower = std::min(report.min_ratio_to_lower, error / b.lower);
            report.max_ratio_to_upper = std::max(report.max_ratio_to_upper, error / b.upper);
        }
        if (!(b.lower <= error) || !(error <= b.upper)) {
            ++report.violation_count;
            if (report.violations.size() < 16) {
                report.violations.push_back({t, case_seed, c, error, b.lower, b.upper});
            }
        }
    }
    return report;
}

AgreementReport verify_closed_form(std::uint64_t trials, std::uint64_t seed, std::size_t dim) {
    if (trials < 1) throw ConfigError("verify_closed_form: trials must be >= 1");
    AgreementReport report;
    report.trials = trials;
    for (std::uint64_t t = 0; t < trials; ++t) {
        const std::uint64_t case_seed = Rng::derive(seed ^ 0xA5A5A5A5A5A5A5A5ULL, t);
        const MergeErrorCase c = random_case(case_seed, dim, 1000);
        const double direct = merging_error_direct(c);
        const double closed =
            merging_error_closed(c.n_i, c.n_j, cosine_similarity<double>(c.x_i, c.x_j));
        const double rel = std::abs(direct - closed) / std::max(1e-300, std::abs(closed));
        if (rel > report.max_rel_diff) {
            report.max_rel_diff = rel;
            report.worst_case_seed = case_seed;
        }
    }
    return report;
}

MatrixD final_cls_rows(const ModelConfig& cfg, const ModelWeights& w, const TokenBatch& input,
                       const MergeSchedule& schedule) {
    if (!input.cls_index) {
        throw ConfigError("info loss probe requires a CLS token");
    }
    const ForwardResult res = forward(input, cfg, w, schedule);
    const std::size_t cls = res.tokens.cls_index.value();
    MatrixD out(res.tokens.batch_size(), res.tokens.dim());
    for (std::size_t img = 0; img < res.tokens.batch_size(); ++img) {
        const auto row = res.tokens.activations[img].row(cls);
        auto orow = out.row(img);
        for (std::size_t j = 0; j < row.size(); ++j) orow[j] = static_cast<double>(row[j]);
    }
    return out;
}

double mean_cls_distance(const MatrixD& a, const MatrixD& b) {
    if (!a.same_shape(b)) throw ShapeError("cls distance: shape mismatch");
    double sum = 0.0;
    for (std::size_t img = 0; img < a.rows; ++img) {
        sum += 1.0 - cosine_similarity<double>(a.row(img), b.row(img));
    }
    return sum / static_cast<double>(a.rows);
}

double info_loss_probe(const ModelConfig& cfg, const ModelWeights& w, const TokenBatch& input,
                       int layer, double theta) {
    if (layer < 1 || layer > cfg.depth) {
        throw ConfigError("info loss probe: layer out of range");
    }
    const MatrixD baseline = final_cls_rows(cfg, w, input, MergeSchedule::no_op());
    MergeSchedule probe = MergeSchedule::constant_threshold(theta);
    probe.only_layer = layer;
    const MatrixD merged = final_cls_rows(cfg, w, input, probe);
    return mean_cls_distance(baseline, merged);
}

}  // namespace atm::theory
