#include "atm/tokens.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace atm {

void TokenBatch::validate() const {
    const std::size_t b = batch_size();
    if (merging_sizes.size() != b || provenance.size() != b) {
        throw InvariantViolation("token batch: per-image arrays disagree on batch size");
    }
    for (std::size_t img = 0; img < b; ++img) {
        const std::size_t n = activations[img].rows;
        if (!activations[img].same_shape(activations[0])) {
            throw InvariantViolation("token batch: image " + std::to_string(img) +
                                     " has shape " + activations[img].shape_str() +
                                     ", expected " + activations[0].shape_str());
        }
        if (merging_sizes[img].size() != n || provenance[img].size() != n) {
            throw InvariantViolation("token batch: bookkeeping length mismatch at image " +
                                     std::to_string(img));
        }
        if (cls_index && *cls_index >= n) {
            throw InvariantViolation("token batch: cls index out of range");
        }

        std::uint64_t size_sum = 0;
        std::vector<std::uint32_t> all_ids;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& prov = provenance[img][i];
            if (merging_sizes[img][i] == 0) {
                throw InvariantViolation("token batch: zero merging size");
            }
            if (prov.size() != merging_sizes[img][i]) {
                throw InvariantViolation("token batch: provenance cardinality != merging size");
            }
            if (!std::is_sorted(prov.begin(), prov.end())) {
                throw InvariantViolation("token batch: provenance set not sorted");
            }
            size_sum += merging_sizes[img][i];
            all_ids.insert(all_ids.end(), prov.begin(), prov.end());
        }

        if (cls_only) {
            if (n != 1 || !cls_index || *cls_index != 0) {
                throw InvariantViolation("token batch: cls-only batch must hold exactly the CLS token");
            }
            continue;  // sum rule waived after the drop
        }

        if (size_sum != original_tokens) {
            throw InvariantViolation("token batch: merging sizes sum to " +
                                     std::to_string(size_sum) + ", expected " +
                                     std::to_string(original_tokens));
        }
        std::sort(all_ids.begin(), all_ids.end());
        for (std::size_t k = 0; k < all_ids.size(); ++k) {
            if (all_ids[k] != k) {
                throw InvariantViolation("token batch: provenance is not a partition of the originals");
            }
        }
    }
}

TokenBatch TokenBatch::from_raw(std::vector<Matrix> acts,
                                std::vector<std::vector<std::uint32_t>> sizes,
                                std::optional<std::size_t> cls_index) {
    if (acts.size() != sizes.size()) {
        throw ShapeError("token dump: activations and sizes disagree on batch size");
    }
    TokenBatch batch;
    batch.cls_index = cls_index;
    batch.provenance.resize(acts.size());
    for (std::size_t img = 0; img < acts.size(); ++img) {
        if (sizes[img].size() != acts[img].rows) {
            throw ShapeError("token dump: sizes length != token count at image " +
                             std::to_string(img));
        }
        const std::uint64_t total =
            std::accumulate(sizes[img].begin(), sizes[img].end(), std::uint64_t{0});
        if (img == 0) {
            batch.original_tokens = static_cast<std::size_t>(total);
        } else if (total != batch.original_tokens) {
            throw ShapeError("token dump: images disagree on original token count");
        }
        std::uint32_t next_id = 0;
        for (std::uint32_t s : sizes[img]) {
            ProvenanceSet prov(s);
            std::iota(prov.begin(), prov.end(), next_id);
            next_id += s;
            batch.provenance[img].push_back(std::move(prov));
        }
    }
    batch.activations = std::move(acts);
    batch.merging_sizes = std::move(sizes);
    batch.validate();
    return batch;
}

}  // namespace atm
