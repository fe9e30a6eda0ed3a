#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "atm/matrix.hpp"

namespace atm {

// Sorted set of original-token ids absorbed into one surviving token.
using ProvenanceSet = std::vector<std::uint32_t>;

// A batch of token activations plus the merging bookkeeping threaded through
// the forward pass. Token counts stay equal across the batch (the per-layer
// merge count is shared); which tokens got merged differs per image, so
// merging sizes and provenance are per image.
struct TokenBatch {
    std::vector<Matrix> activations;                        // B entries, each N x D
    std::vector<std::vector<std::uint32_t>> merging_sizes;  // B x N
    std::vector<std::vector<ProvenanceSet>> provenance;     // B x N
    std::optional<std::size_t> cls_index;
    std::size_t original_tokens = 0;  // N0 per image, fixed at creation
    bool cls_only = false;            // set once the final-layer drop ran

    std::size_t batch_size() const { return activations.size(); }
    std::size_t token_count() const { return activations.empty() ? 0 : activations[0].rows; }
    std::size_t dim() const { return activations.empty() ? 0 : activations[0].cols; }

    // Checks, per image: sizes sum to original_tokens, provenance sets are
    // disjoint, their union is [0, N0), and each size equals its set's
    // cardinality. After the CLS-only drop only the single CLS row remains
    // and the sum rule is waived. Throws InvariantViolation.
    void validate() const;

    // Wraps raw activations + sizes (a token dump). Provenance is
    // synthesized as contiguous id ranges so the invariants hold.
    static TokenBatch from_raw(std::vector<Matrix> acts,
                               std::vector<std::vector<std::uint32_t>> sizes,
                               std::optional<std::size_t> cls_index);
};

}  // namespace atm
