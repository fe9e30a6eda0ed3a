#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atm/tokens.hpp"

namespace atm {

// Parameters of the layer-dependent threshold decay
//   theta(l) = max(alpha - (e^(beta*(l-1)) - 1), theta_min).
struct ThresholdParams {
    double alpha = 0.99;
    double beta = 0.04;
    double theta_min = 0.88;

    void validate() const;  // requires 0 < theta_min <= alpha <= 1 and beta >= 0
};

enum class ScheduleKind {
    LayerDependentThreshold,
    ConstantThreshold,
    ConstantTopR,
    IncreasingTopR,
    DecreasingTopR,
    NoOp,
};

// A reduction schedule: either threshold-based (adaptive merge counts) or a
// top-r family (fixed counts). `only_layer` restricts merging to a single
// layer; the information-loss probe uses it.
struct MergeSchedule {
    ScheduleKind kind = ScheduleKind::NoOp;
    ThresholdParams params;             // LayerDependentThreshold
    double theta = 1.0;                 // ConstantThreshold
    std::size_t r = 0;                  // top-r family: fixed r or r0
    std::optional<int> only_layer;

    static MergeSchedule layer_dependent(ThresholdParams p);
    static MergeSchedule constant_threshold(double theta);
    static MergeSchedule constant_top_r(std::size_t r);
    static MergeSchedule increasing_top_r(std::size_t r0);
    static MergeSchedule decreasing_top_r(std::size_t r0);
    static MergeSchedule no_op();
    static MergeSchedule from_kind_name(const std::string& name);

    const char* kind_name() const;
    bool threshold_based() const {
        return kind == ScheduleKind::LayerDependentThreshold ||
               kind == ScheduleKind::ConstantThreshold;
    }
    void validate() const;
};

struct MergePair {
    std::size_t src = 0;
    std::size_t dst = 0;
};

// Pair set for one image at one layer. Each src token appears in exactly one
// pair; dst tokens may repeat. CLS never appears.
struct MergePlan {
    std::vector<MergePair> pairs;
    std::vector<double> similarities;  // parallel to pairs
    std::size_t r = 0;                 // resolved merge count
    std::optional<double> theta;       // absent for top-r kinds
};

struct SplitIndices {
    std::vector<std::size_t> src;
    std::vector<std::size_t> dst;
};

// Eq-style threshold decay; non-increasing in `layer`, clamped to
// [theta_min, alpha]. `layer` is 1-based.
double layer_threshold(int layer, const ThresholdParams& p);

// Even positions -> src, odd -> dst, counted over non-CLS tokens in order.
SplitIndices alternate_split(std::size_t token_count, std::optional<std::size_t> cls_index);

// Non-CLS tokens stably sorted ascending by merging size (ties keep index
// order); first half -> src, second half -> dst. Odd counts give dst the
// extra token, so large-size tokens never land in src.
SplitIndices size_distinctive_split(std::span<const std::uint32_t> sizes,
                                    std::optional<std::size_t> cls_index);

// For each src token, one pair with the most similar dst (cosine over the
// key rows). Argmax ties resolve to the lowest dst index.
MergePlan pair_tokens(const Matrix& keys, const SplitIndices& split);

// Floor of the batch-mean count of pairs with similarity strictly greater
// than theta. With a single image this is the exact per-image count.
std::size_t batch_adaptive_r(std::span<const MergePlan> plans, double theta);

// Merges each image's r most similar pairs (ties: lower src index first).
// Several srcs targeting one dst collapse in a single size-weighted mean.
// Token count drops by exactly r per image.
void merge_tokens(TokenBatch& x, std::span<const MergePlan> plans, std::size_t r);

// What one layer did, for traces and cost accounting.
struct LayerRecord {
    int layer = 0;
    std::size_t tokens_before = 0;
    std::size_t tokens_after = 0;
    std::optional<double> theta;
    std::size_t r = 0;
    std::size_t pair_count = 0;
    std::string strategy = "none";  // alternate | size_distinctive | none | cls_drop
    bool cls_drop = false;
};

// One full merging step: choose the split by layer depth vs splitting_depth,
// build per-image plans from the keys, resolve r per the schedule, merge.
LayerRecord step(TokenBatch& x, std::span<const Matrix> keys, int layer,
                 const MergeSchedule& schedule, int splitting_depth);

}  // namespace atm
