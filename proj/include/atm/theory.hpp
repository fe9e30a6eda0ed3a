#pragma once

#include <cstdint>
#include <vector>

#include "atm/model.hpp"

// Executable form of the merging-error analysis: exact evaluation, closed
// form, the two-sided bound, a randomized bound verifier, and the layer-wise
// information-loss probe. Everything here runs in 64-bit precision.

namespace atm::theory {

struct MergeErrorCase {
    std::vector<double> x_i, x_j;  // unit vectors
    std::uint64_t n_i = 1, n_j = 1;

    double delta() const;  // cosine distance 1 - cos(x_i, x_j), in [0, 2]

    // Inputs must already be unit vectors (within 1e-12) with sizes >= 1;
    // non-unit vectors are refused rather than silently normalized.
    void validate() const;
};

// Forms the size-weighted mean explicitly and sums the size-weighted cosine
// distances from both inputs to it. Antipodal equal-size inputs make the
// mean the zero vector, which is an error.
double merging_error_direct(const MergeErrorCase& c);

// (n_i + n_j) - sqrt(n_i^2 + n_j^2 + 2 n_i n_j cos_ij); equal to the direct
// evaluation in exact arithmetic.
double merging_error_closed(std::uint64_t n_i, std::uint64_t n_j, double cos_ij);

struct ErrorBounds {
    double lower = 0.0;
    double upper = 0.0;
};

// lower = (n_i n_j / (n_i + n_j)) * delta, upper = 2 * lower.
ErrorBounds merging_error_bounds(std::uint64_t n_i, std::uint64_t n_j, double delta);

struct BoundViolation {
    std::uint64_t trial = 0;
    std::uint64_t case_seed = 0;
    MergeErrorCase c;
    double error = 0.0, lower = 0.0, upper = 0.0;
};

struct VerifyReport {
    std::uint64_t trials = 0;
    std::uint64_t violation_count = 0;
    std::vector<BoundViolation> violations;  // capped at 16 stored examples
    double min_ratio_to_lower = 0.0;  // tightest observed E/lower
    double max_ratio_to_upper = 0.0;  // tightest observed E/upper

    bool ok() const { return violation_count == 0; }
};

struct VerifyOptions {
    std::uint64_t trials = 100000;
    std::uint64_t seed = 0;
    std::size_t dim = 64;
    std::uint64_t max_size = 1000;
    // Test seam for the harness mutation check; the real bound uses 2.
    double upper_coefficient = 2.0;
};

// Draws random unit-vector pairs and sizes, asserts
// lower <= direct error <= upper for every trial, and tracks the tightest
// ratios. Per-trial seeds derive deterministically from the base seed.
VerifyReport verify_bounds(const VerifyOptions& opts);

// Pair agreement between the direct and closed-form evaluations on one
// random case; used by the verification command.
struct AgreementReport {
    std::uint64_t trials = 0;
    double max_rel_diff = 0.0;
    std::uint64_t worst_case_seed = 0;
};
AgreementReport verify_closed_form(std::uint64_t trials, std::uint64_t seed, std::size_t dim);

// Cosine distance between the final CLS tokens of an unmerged forward and a
// forward that merges only in `layer` at constant threshold `theta`,
// averaged over the batch.
double info_loss_probe(const ModelConfig& cfg, const ModelWeights& w, const TokenBatch& input,
                       int layer, double theta);

// The probe half only: final CLS rows in double precision.
MatrixD final_cls_rows(const ModelConfig& cfg, const ModelWeights& w, const TokenBatch& input,
                       const MergeSchedule& schedule);
double mean_cls_distance(const MatrixD& a, const MatrixD& b);

}  // namespace atm::theory
