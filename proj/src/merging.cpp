#include "atm/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atm/kernels.hpp"

namespace atm {

void ThresholdParams::validate() const {
    if (!(theta_min > 0.0) || !(theta_min <= alpha) || !(alpha <= 1.0)) {
        throw ConfigError("threshold params: need 0 < theta_min <= alpha <= 1");
    }
    if (!(beta >= 0.0)) {
        throw ConfigError("threshold params: beta must be >= 0");
    }
}

MergeSchedule MergeSchedule::layer_dependent(ThresholdParams p) {
    MergeSchedule s;
    s.kind = ScheduleKind::LayerDependentThreshold;
    s.params = p;
    return s;
}

MergeSchedule MergeSchedule::constant_threshold(double theta) {
    MergeSchedule s;
    s.kind = ScheduleKind::ConstantThreshold;
    s.theta = theta;
    return s;
}

MergeSchedule MergeSchedule::constant_top_r(std::size_t r) {
    MergeSchedule s;
    s.kind = ScheduleKind::ConstantTopR;
    s.r = r;
    return s;
}

MergeSchedule MergeSchedule::increasing_top_r(std::size_t r0) {
    MergeSchedule s;
    s.kind = ScheduleKind::IncreasingTopR;
    s.r = r0;
    return s;
}

MergeSchedule MergeSchedule::decreasing_top_r(std::size_t r0) {
    MergeSchedule s;
    s.kind = ScheduleKind::DecreasingTopR;
    s.r = r0;
    return s;
}

MergeSchedule MergeSchedule::no_op() { return MergeSchedule{}; }

const char* MergeSchedule::kind_name() const {
    switch (kind) {
        case ScheduleKind::LayerDependentThreshold: return "layer_dependent_threshold";
        case ScheduleKind::ConstantThreshold: return "constant_threshold";
        case ScheduleKind::ConstantTopR: return "constant_top_r";
        case ScheduleKind::IncreasingTopR: return "increasing_top_r";
        case ScheduleKind::DecreasingTopR: return "decreasing_top_r";
        case ScheduleKind::NoOp: return "no_op";
    }
    return "unknown";
}

MergeSchedule MergeSchedule::from_kind_name(const std::string& name) {
    MergeSchedule s;
    if (name == "layer_dependent_threshold") s.kind = ScheduleKind::LayerDependentThreshold;
    else if (name == "constant_threshold") s.kind = ScheduleKind::ConstantThreshold;
    else if (name == "constant_top_r") s.kind = ScheduleKind::ConstantTopR;
    else if (name == "increasing_top_r") s.kind = ScheduleKind::IncreasingTopR;
    else if (name == "decreasing_top_r") s.kind = ScheduleKind::DecreasingTopR;
    else if (name == "no_op") s.kind = ScheduleKind::NoOp;
    else throw ConfigError("unknown schedule kind: " + name);
    return s;
}

void MergeSchedule::validate() const {
    switch (kind) {
        case ScheduleKind::LayerDependentThreshold:
            params.validate();
            break;
        case ScheduleKind::ConstantThreshold:
            if (!(theta > 0.0) || !(theta <= 1.0)) {
                throw ConfigError("constant threshold must lie in (0, 1]");
            }
            break;
        default:
            break;
    }
    if (only_layer && *only_layer < 1) {
        throw ConfigError("only_layer must be >= 1");
    }
}

double layer_threshold(int layer, const ThresholdParams& p) {
    p.validate();
    if (layer < 1) {
        throw ConfigError("layer_threshold: layer index is 1-based");
    }
    const double decayed = p.alpha - (std::exp(p.beta * static_cast<double>(layer - 1)) - 1.0);
    return std::max(decayed, p.theta_min);
}

namespace {

std::vector<std::size_t> non_cls_indices(std::size_t token_count,
                                         std::optional<std::size_t> cls_index) {
    std::vector<std::size_t> idx;
    idx.reserve(token_count);
    for (std::size_t i = 0; i < token_count; ++i) {
        if (cls_index && *cls_index == i) continue;
        idx.push_back(i);
    }
    return idx;
}

}  // namespace

SplitIndices alternate_split(std::size_t token_count, std::optional<std::size_t> cls_index) {
    SplitIndices out;
    const auto idx = non_cls_indices(token_count, cls_index);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        (k % 2 == 0 ? out.src : out.dst).push_back(idx[k]);
    }
    return out;
}

SplitIndices size_distinctive_split(std::span<const std::uint32_t> sizes,
                                    std::optional<std::size_t> cls_index) {
    SplitIndices out;
    auto idx = non_cls_indices(sizes.size(), cls_index);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return sizes[a] < sizes[b]; });
    const std::size_t half = idx.size() / 2;  // dst keeps the extra token when odd
    out.src.assign(idx.begin(), idx.begin() + half);
    out.dst.assign(idx.begin() + half, idx.end());
    return out;
}

MergePlan pair_tokens(const Matrix& keys, const SplitIndices& split) {
    if (split.src.empty() || split.dst.empty()) {
        throw ShapeError("pair_tokens: src and dst must be non-empty");
    }
    MergePlan plan;
    plan.pairs.reserve(split.src.size());
    plan.similarities.reserve(split.src.size());
    for (std::size_t s : split.src) {
        double best = -2.0;
        std::size_t best_dst = split.dst.front();
        for (std::size_t d : split.dst) {
            const double sim = static_cast<double>(
                cosine_similarity<float>(keys.row(s), keys.row(d)));
            if (sim > best) {  // strict: ties keep the lowest dst index
                best = sim;
                best_dst = d;
            }
        }
        plan.pairs.push_back({s, best_dst});
        plan.similarities.push_back(best);
    }
    return plan;
}

std::size_t batch_adaptive_r(std::span<const MergePlan> plans, double theta) {
    if (plans.empty()) return 0;
    std::uint64_t total = 0;
    std::size_t min_pairs = plans.front().pairs.size();
    for (const auto& plan : plans) {
        if (plan.pairs.size() != plans.front().pairs.size()) {
            throw ShapeError("batch_adaptive_r: plans disagree on pair count");
        }
        min_pairs = std::min(min_pairs, plan.pairs.size());
        for (double sim : plan.similarities) {
            if (sim > theta) ++total;  // strictly greater: boundary equality does not merge
        }
    }
    const std::size_t r = static_cast<std::size_t>(total / plans.size());  // floored mean
    return std::min(r, min_pairs);
}

namespace {

// Pair order used for top-r selection: similarity descending, then lower src
// index. Plans list pairs in ascending src order, so a stable sort on the
// similarity alone gives the index tie-break for free.
std::vector<std::size_t> selection_order(const MergePlan& plan) {
    std::vector<std::size_t> order(plan.pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return plan.similarities[a] > plan.similarities[b];
    });
    return order;
}

void merge_one_image(Matrix& act, std::vector<std::uint32_t>& sizes,
                     std::vector<ProvenanceSet>& prov, std::optional<std::size_t>& cls_index,
                     const MergePlan& plan, std::size_t r) {
    const std::size_t n = act.rows;
    const auto order = selection_order(plan);

    // dst -> absorbed srcs, ascending src per dst for a fixed accumulation
    // order
    std::vector<std::vector<std::size_t>> absorbed(n);
    std::vector<bool> removed(n, false);
    for (std::size_t k = 0; k < r; ++k) {
        const MergePair& p = plan.pairs[order[k]];
        absorbed[p.dst].push_back(p.src);
        removed[p.src] = true;
    }
    for (auto& lst : absorbed) std::sort(lst.begin(), lst.end());

    Matrix out(n - r, act.cols);
    std::vector<std::uint32_t> out_sizes;
    std::vector<ProvenanceSet> out_prov;
    out_sizes.reserve(n - r);
    out_prov.reserve(n - r);

    std::optional<std::size_t> new_cls;
    std::size_t w = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (removed[i]) continue;
        auto orow = out.row(w);
        const auto irow = act.row(i);
        if (absorbed[i].empty()) {
            std::copy(irow.begin(), irow.end(), orow.begin());
            out_sizes.push_back(sizes[i]);
            out_prov.push_back(prov[i]);
        } else {
            // single size-weighted mean over dst plus every absorbed src
            std::uint64_t total = sizes[i];
            for (std::size_t c = 0; c < act.cols; ++c) {
                orow[c] = static_cast<float>(sizes[i]) * irow[c];
            }
            ProvenanceSet merged_prov = prov[i];
            for (std::size_t s : absorbed[i]) {
                const auto srow = act.row(s);
                const float ws = static_cast<float>(sizes[s]);
                for (std::size_t c = 0; c < act.cols; ++c) {
                    orow[c] += ws * srow[c];
                }
                total += sizes[s];
                merged_prov.insert(merged_prov.end(), prov[s].begin(), prov[s].end());
            }
            const float inv = 1.0f / static_cast<float>(total);
            for (std::size_t c = 0; c < act.cols; ++c) {
                orow[c] *= inv;
            }
            std::sort(merged_prov.begin(), merged_prov.end());
            out_sizes.push_back(static_cast<std::uint32_t>(total));
            out_prov.push_back(std::move(merged_prov));
        }
        if (cls_index && *cls_index == i) new_cls = w;
        ++w;
    }

    act = std::move(out);
    sizes = std::move(out_sizes);
    prov = std::move(out_prov);
    cls_index = new_cls;
}

}  // namespace

void merge_tokens(TokenBatch& x, std::span<const MergePlan> plans, std::size_t r) {
    if (plans.size() != x.batch_size()) {
        throw ShapeError("merge_tokens: one plan per image required");
    }
    for (const auto& plan : plans) {
        if (r > plan.pairs.size()) {
            throw ShapeError("merge_tokens: r exceeds pair count");
        }
    }
    if (r == 0) return;
    std::optional<std::size_t> cls_after;
    for (std::size_t img = 0; img < x.batch_size(); ++img) {
        std::optional<std::size_t> cls = x.cls_index;
        merge_one_image(x.activations[img], x.merging_sizes[img], x.provenance[img], cls,
                        plans[img], r);
        cls_after = cls;  // identical across images: CLS is never a src
    }
    x.cls_index = cls_after;
}

LayerRecord step(TokenBatch& x, std::span<const Matrix> keys, int layer,
                 const MergeSchedule& schedule, int splitting_depth) {
    schedule.validate();
    if (keys.size() != x.batch_size()) {
        throw ShapeError("step: one key matrix per image required");
    }

    LayerRecord rec;
    rec.layer = layer;
    rec.tokens_before = x.token_count();
    rec.tokens_after = rec.tokens_before;
    if (schedule.kind == ScheduleKind::LayerDependentThreshold) {
        rec.theta = layer_threshold(layer, schedule.params);
    } else if (schedule.kind == ScheduleKind::ConstantThreshold) {
        rec.theta = schedule.theta;
    }

    const bool skipped = schedule.kind == ScheduleKind::NoOp ||
                         (schedule.only_layer && *schedule.only_layer != layer);
    const std::size_t non_cls = rec.tokens_before - (x.cls_index ? 1 : 0);
    if (skipped || non_cls < 2) {
        return rec;
    }

    const bool alternate = layer <= splitting_depth;
    rec.strategy = alternate ? "alternate" : "size_distinctive";

    std::vector<MergePlan> plans;
    plans.reserve(x.batch_size());
    for (std::size_t img = 0; img < x.batch_size(); ++img) {
        const SplitIndices split =
            alternate ? alternate_split(rec.tokens_before, x.cls_index)
                      : size_distinctive_split(x.merging_sizes[img], x.cls_index);
        plans.push_back(pair_tokens(keys[img], split));
    }
    rec.pair_count = plans.front().pairs.size();

    std::size_t r = 0;
    switch (schedule.kind) {
        case ScheduleKind::LayerDependentThreshold:
        case ScheduleKind::ConstantThreshold:
            r = batch_adaptive_r(plans, *rec.theta);
            break;
        case ScheduleKind::ConstantTopR:
            r = std::min(schedule.r, rec.pair_count);
            break;
        case ScheduleKind::IncreasingTopR:
            r = std::min(schedule.r + static_cast<std::size_t>(layer - 1), rec.pair_count);
            break;
        case ScheduleKind::DecreasingTopR: {
            const std::size_t down = static_cast<std::size_t>(layer - 1);
            r = schedule.r > down ? schedule.r - down : 0;
            r = std::min(r, rec.pair_count);
            break;
        }
        case ScheduleKind::NoOp:
            break;
    }

    for (auto& plan : plans) {
        plan.r = r;
        plan.theta = rec.theta;
    }
    merge_tokens(x, plans, r);
    rec.r = r;
    rec.tokens_after = x.token_count();
    return rec;
}

}  // namespace atm
