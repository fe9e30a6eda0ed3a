#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "atm/merging.hpp"
#include "atm/tokens.hpp"

namespace atm {

inline constexpr float kLayerNormEps = 1e-6f;

struct ModelConfig {
    int depth = 12;
    int dim = 384;
    int heads = 6;
    double mlp_ratio = 4.0;
    int image_size = 224;
    int patch_size = 16;
    bool use_cls_token = true;
    bool proportional_attention = true;
    bool final_layer_cls_only = false;
    int splitting_depth = -1;  // -1 resolves to ceil(3L/4)
    int num_classes = 1000;
    std::uint64_t seed = 1;

    int grid_side() const { return image_size / patch_size; }
    int num_patches() const { return grid_side() * grid_side(); }
    int num_tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
    int head_dim() const { return dim / heads; }
    int mlp_dim() const { return static_cast<int>(mlp_ratio * dim + 0.5); }
    int resolved_splitting_depth() const;

    void validate() const;
};

struct BlockWeights {
    Matrix qkv_w;               // D x 3D, columns [Q | K | V]
    std::vector<float> qkv_b;   // 3D
    Matrix proj_w;              // D x D
    std::vector<float> proj_b;  // D
    std::vector<float> ln1_g, ln1_b;
    std::vector<float> ln2_g, ln2_b;
    Matrix fc1_w;              // D x mlp_dim
    std::vector<float> fc1_b;  // mlp_dim
    Matrix fc2_w;              // mlp_dim x D
    std::vector<float> fc2_b;  // D
};

struct ModelWeights {
    Matrix patch_w;               // (patch^2 * 3) x D
    std::vector<float> patch_b;   // D
    std::vector<float> cls_token; // D, present iff use_cls_token
    Matrix pos_embed;             // num_tokens x D
    std::vector<BlockWeights> blocks;
    Matrix head_w;                // D x num_classes
    std::vector<float> head_b;    // num_classes

    // Seeded Gaussian, std 1/sqrt(D) for every tensor, fixed generation
    // order. Two calls with the same config and seed produce identical
    // weights on any platform.
    static ModelWeights synthetic(const ModelConfig& cfg, std::uint64_t seed);

    void shape_audit(const ModelConfig& cfg) const;  // throws ShapeError
};

// H x W x 3 image, row-major, channels interleaved, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

// Tokenizes one image: patch projection + bias, CLS prepended when
// configured, positional embeddings added. All merging sizes start at 1 with
// singleton provenance.
TokenBatch patch_embed(const Image& image, const ModelConfig& cfg, const ModelWeights& w);
TokenBatch patch_embed_batch(std::span<const Image> images, const ModelConfig& cfg,
                             const ModelWeights& w);

// Captures the per-head attention matrices of the last processed image.
struct AttentionProbe {
    std::vector<Matrix> head_attn;  // H entries, each N x N
};

// Pre-norm multi-head self-attention with residual, in place. Returns the
// per-image key matrices (N x head_dim, keys averaged over heads) that the
// merging step uses as similarity features. When `proportional` is set the
// pre-softmax logits gain log(merging size) along the key axis.
std::vector<Matrix> attention(TokenBatch& x, const BlockWeights& bw, const ModelConfig& cfg,
                              bool proportional, AttentionProbe* probe = nullptr);

struct Trace {
    std::vector<LayerRecord> layers;
};

struct ForwardResult {
    Matrix logits;  // B x num_classes
    Trace trace;
    TokenBatch tokens;  // final token state
};

using LayerObserver = std::function<void(int layer, const TokenBatch&)>;

// Full forward pass: per block LN -> attention -> merge step (or the final
// CLS-only drop) -> LN -> MLP, with residuals. The observer, when given,
// runs after every block.
ForwardResult forward(TokenBatch tokens, const ModelConfig& cfg, const ModelWeights& w,
                      const MergeSchedule& schedule, const LayerObserver& observer = {});

}  // namespace atm
