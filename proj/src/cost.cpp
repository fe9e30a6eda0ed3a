#include "atm/cost.hpp"

#include <string>

namespace atm {

BlockFlops block_flops(std::size_t n_tokens, std::size_t dim, double mlp_ratio) {
    if (n_tokens < 1) throw ShapeError("block_flops: token count must be >= 1");
    const std::uint64_t n = n_tokens;
    const std::uint64_t d = dim;
    const std::uint64_t md = static_cast<std::uint64_t>(mlp_ratio * static_cast<double>(dim) + 0.5);
    BlockFlops f;
    f.attn = 4 * n * d * d + 2 * n * n * d;
    f.mlp = 2 * n * d * md;
    return f;
}

std::uint64_t patch_embed_flops(const ModelConfig& cfg) {
    const std::uint64_t patch_len =
        static_cast<std::uint64_t>(cfg.patch_size) * cfg.patch_size * 3;
    return static_cast<std::uint64_t>(cfg.num_patches()) * patch_len * cfg.dim;
}

std::uint64_t head_flops(const ModelConfig& cfg) {
    return static_cast<std::uint64_t>(cfg.dim) * cfg.num_classes;
}

CostReport trace_flops(const Trace& trace, const ModelConfig& cfg) {
    if (trace.layers.size() != static_cast<std::size_t>(cfg.depth)) {
        throw ShapeError("trace_flops: trace has " + std::to_string(trace.layers.size()) +
                         " layers, config expects " + std::to_string(cfg.depth));
    }
    CostReport report;
    report.embed_flops = patch_embed_flops(cfg);
    report.head_flops = head_flops(cfg);
    report.total_flops = report.embed_flops + report.head_flops;

    const std::size_t n0 = trace.layers.front().tokens_before;
    report.baseline_flops = report.embed_flops + report.head_flops;
    const BlockFlops base = block_flops(n0, static_cast<std::size_t>(cfg.dim), cfg.mlp_ratio);

    for (const auto& rec : trace.layers) {
        LayerCost lc;
        lc.layer = rec.layer;
        lc.n_attn = rec.tokens_before;
        lc.n_mlp = rec.tokens_after;
        lc.attn_flops = block_flops(lc.n_attn, static_cast<std::size_t>(cfg.dim), cfg.mlp_ratio).attn;
        lc.mlp_flops = block_flops(lc.n_mlp, static_cast<std::size_t>(cfg.dim), cfg.mlp_ratio).mlp;
        report.total_flops += lc.attn_flops + lc.mlp_flops;
        report.baseline_flops += base.attn + base.mlp;
        report.layers.push_back(lc);
    }
    return report;
}

CostReport baseline_cost(const ModelConfig& cfg) {
    cfg.validate();
    Trace trace;
    for (int l = 1; l <= cfg.depth; ++l) {
        LayerRecord rec;
        rec.layer = l;
        rec.tokens_before = static_cast<std::size_t>(cfg.num_tokens());
        rec.tokens_after = rec.tokens_before;
        trace.layers.push_back(rec);
    }
    return trace_flops(trace, cfg);
}

}  // namespace atm
