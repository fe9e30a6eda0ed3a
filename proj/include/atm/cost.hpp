#pragma once

#include <cstdint>
#include <vector>

#include "atm/model.hpp"

// Analytical FLOPs accountant. One FLOP = one multiply-accumulate, the
// convention the published ViT GFLOPs figures use; softmax, layer norm and
// GELU are excluded. Counts are exact 64-bit integers so totals always equal
// the sum of their parts.

namespace atm {

struct LayerCost {
    int layer = 0;
    std::size_t n_attn = 0;  // token count entering attention (pre-merge)
    std::size_t n_mlp = 0;   // token count entering the MLP (post-merge)
    std::uint64_t attn_flops = 0;
    std::uint64_t mlp_flops = 0;
};

struct CostReport {
    std::vector<LayerCost> layers;
    std::uint64_t embed_flops = 0;
    std::uint64_t head_flops = 0;
    std::uint64_t total_flops = 0;
    std::uint64_t baseline_flops = 0;  // same model with a constant token count

    double gflops() const { return static_cast<double>(total_flops) * 1e-9; }
    double baseline_gflops() const { return static_cast<double>(baseline_flops) * 1e-9; }
    double reduction_pct() const {
        if (baseline_flops == 0 || total_flops >= baseline_flops) return 0.0;
        return 100.0 * (1.0 - static_cast<double>(total_flops) / static_cast<double>(baseline_flops));
    }
};

struct BlockFlops {
    std::uint64_t attn = 0;  // 4*N*D^2 (QKV + output projections) + 2*N^2*D (scores + weighted sum)
    std::uint64_t mlp = 0;   // 2*N*D*mlp_dim (two linear layers)
};

BlockFlops block_flops(std::size_t n_tokens, std::size_t dim, double mlp_ratio);

std::uint64_t patch_embed_flops(const ModelConfig& cfg);
std::uint64_t head_flops(const ModelConfig& cfg);

// Sums block costs over a trace: attention at each layer's pre-merge count,
// MLP at its post-merge count, plus embedding and head. The baseline holds
// the first layer's entry count constant.
CostReport trace_flops(const Trace& trace, const ModelConfig& cfg);

// Cost of the unmerged model (constant token count everywhere).
CostReport baseline_cost(const ModelConfig& cfg);

}  // namespace atm
