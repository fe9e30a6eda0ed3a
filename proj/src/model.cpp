#include "atm/model.hpp"

#include <cmath>
#include <string>

#include "atm/kernels.hpp"
#include "atm/rng.hpp"

namespace atm {

int ModelConfig::resolved_splitting_depth() const {
    if (splitting_depth >= 0) return splitting_depth;
    return (3 * depth + 3) / 4;  // ceil(3L/4)
}

void ModelConfig::validate() const {
    if (depth < 1) throw ConfigError("model: depth must be >= 1");
    if (dim < 1 || heads < 1 || dim % heads != 0) {
        throw ConfigError("model: dim must be a positive multiple of heads");
    }
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
        throw ConfigError("model: image_size must be a positive multiple of patch_size");
    }
    if (mlp_ratio <= 0.0) throw ConfigError("model: mlp_ratio must be positive");
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    const int ls = resolved_splitting_depth();
    if (ls < 0 || ls > depth) {
        throw ConfigError("model: splitting_depth must lie in [0, depth]");
    }
}

namespace {

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, float stddev) {
    Matrix m(rows, cols);
    for (auto& v : m.data) v = stddev * static_cast<float>(rng.gaussian());
    return m;
}

std::vector<float> gaussian_vector(Rng& rng, std::size_t n, float stddev) {
    std::vector<float> v(n);
    for (auto& x : v) x = stddev * static_cast<float>(rng.gaussian());
    return v;
}

void check_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError("weights: bad shape for " + what);
}

}  // namespace

ModelWeights ModelWeights::synthetic(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const auto d = static_cast<std::size_t>(cfg.dim);
    const auto md = static_cast<std::size_t>(cfg.mlp_dim());
    const float std_dev = 1.0f / std::sqrt(static_cast<float>(cfg.dim));

    ModelWeights w;
    w.patch_w = gaussian_matrix(rng, static_cast<std::size_t>(cfg.patch_size) * cfg.patch_size * 3, d, std_dev);
    w.patch_b = gaussian_vector(rng, d, std_dev);
    if (cfg.use_cls_token) {
        w.cls_token = gaussian_vector(rng, d, std_dev);
    }
    w.pos_embed = gaussian_matrix(rng, static_cast<std::size_t>(cfg.num_tokens()), d, std_dev);
    for (int l = 0; l < cfg.depth; ++l) {
        BlockWeights b;
        b.qkv_w = gaussian_matrix(rng, d, 3 * d, std_dev);
        b.qkv_b = gaussian_vector(rng, 3 * d, std_dev);
        b.proj_w = gaussian_matrix(rng, d, d, std_dev);
        b.proj_b = gaussian_vector(rng, d, std_dev);
        b.ln1_g = gaussian_vector(rng, d, std_dev);
        b.ln1_b = gaussian_vector(rng, d, std_dev);
        b.ln2_g = gaussian_vector(rng, d, std_dev);
        b.ln2_b = gaussian_vector(rng, d, std_dev);
        b.fc1_w = gaussian_matrix(rng, d, md, std_dev);
        b.fc1_b = gaussian_vector(rng, md, std_dev);
        b.fc2_w = gaussian_matrix(rng, md, d, std_dev);
        b.fc2_b = gaussian_vector(rng, d, std_dev);
        w.blocks.push_back(std::move(b));
    }
    w.head_w = gaussian_matrix(rng, d, static_cast<std::size_t>(cfg.num_classes), std_dev);
    w.head_b = gaussian_vector(rng, static_cast<std::size_t>(cfg.num_classes), std_dev);
    return w;
}

void ModelWeights::shape_audit(const ModelConfig& cfg) const {
    const auto d = static_cast<std::size_t>(cfg.dim);
    const auto md = static_cast<std::size_t>(cfg.mlp_dim());
    const auto patch_len = static_cast<std::size_t>(cfg.patch_size) * cfg.patch_size * 3;

    check_shape(patch_w.rows == patch_len && patch_w.cols == d, "patch_embed.weight");
    check_shape(patch_b.size() == d, "patch_embed.bias");
    check_shape(cfg.use_cls_token ? cls_token.size() == d : cls_token.empty(), "cls_token");
    check_shape(pos_embed.rows == static_cast<std::size_t>(cfg.num_tokens()) && pos_embed.cols == d,
                "pos_embed");
    check_shape(blocks.size() == static_cast<std::size_t>(cfg.depth), "blocks");
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const auto& b = blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        check_shape(b.qkv_w.rows == d && b.qkv_w.cols == 3 * d, p + "attn.qkv.weight");
        check_shape(b.qkv_b.size() == 3 * d, p + "attn.qkv.bias");
        check_shape(b.proj_w.rows == d && b.proj_w.cols == d, p + "attn.proj.weight");
        check_shape(b.proj_b.size() == d, p + "attn.proj.bias");
        check_shape(b.ln1_g.size() == d && b.ln1_b.size() == d, p + "ln1");
        check_shape(b.ln2_g.size() == d && b.ln2_b.size() == d, p + "ln2");
        check_shape(b.fc1_w.rows == d && b.fc1_w.cols == md, p + "mlp.fc1.weight");
        check_shape(b.fc1_b.size() == md, p + "mlp.fc1.bias");
        check_shape(b.fc2_w.rows == md && b.fc2_w.cols == d, p + "mlp.fc2.weight");
        check_shape(b.fc2_b.size() == d, p + "mlp.fc2.bias");
    }
    check_shape(head_w.rows == d && head_w.cols == static_cast<std::size_t>(cfg.num_classes),
                "head.weight");
    check_shape(head_b.size() == static_cast<std::size_t>(cfg.num_classes), "head.bias");
}

TokenBatch patch_embed(const Image& image, const ModelConfig& cfg, const ModelWeights& w) {
    cfg.validate();
    if (image.height != cfg.image_size || image.width != cfg.image_size ||
        image.data.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
        throw ShapeError("patch_embed: image does not match config geometry");
    }

    const int side = cfg.grid_side();
    const int p = cfg.patch_size;
    const std::size_t patch_len = static_cast<std::size_t>(p) * p * 3;

    // flatten patches row-major over the grid; within a patch pixels are
    // (row, col, channel)
    Matrix patches(static_cast<std::size_t>(cfg.num_patches()), patch_len);
    for (int gy = 0; gy < side; ++gy) {
        for (int gx = 0; gx < side; ++gx) {
            auto row = patches.row(static_cast<std::size_t>(gy) * side + gx);
            std::size_t k = 0;
            for (int py = 0; py < p; ++py) {
                for (int px = 0; px < p; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        row[k++] = image.at(gy * p + py, gx * p + px, c);
                    }
                }
            }
        }
    }

    Matrix projected = linear<float>(patches, w.patch_w, w.patch_b);

    const std::size_t n = static_cast<std::size_t>(cfg.num_tokens());
    Matrix tokens(n, static_cast<std::size_t>(cfg.dim));
    std::size_t row0 = 0;
    if (cfg.use_cls_token) {
        auto cls_row = tokens.row(0);
        std::copy(w.cls_token.begin(), w.cls_token.end(), cls_row.begin());
        row0 = 1;
    }
    for (std::size_t i = 0; i < projected.rows; ++i) {
        auto dst = tokens.row(row0 + i);
        const auto src = projected.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    for (std::size_t i = 0; i < n; ++i) {
        auto dst = tokens.row(i);
        const auto pos = w.pos_embed.row(i);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += pos[j];
    }

    TokenBatch batch;
    batch.activations.push_back(std::move(tokens));
    batch.merging_sizes.emplace_back(n, 1u);
    std::vector<ProvenanceSet> prov(n);
    for (std::size_t i = 0; i < n; ++i) prov[i] = {static_cast<std::uint32_t>(i)};
    batch.provenance.push_back(std::move(prov));
    batch.cls_index = cfg.use_cls_token ? std::optional<std::size_t>{0} : std::nullopt;
    batch.original_tokens = n;
    return batch;
}

TokenBatch patch_embed_batch(std::span<const Image> images, const ModelConfig& cfg,
                             const ModelWeights& w) {
    if (images.empty()) throw ShapeError("patch_embed_batch: empty batch");
    TokenBatch out = patch_embed(images[0], cfg, w);
    for (std::size_t i = 1; i < images.size(); ++i) {
        TokenBatch one = patch_embed(images[i], cfg, w);
        out.activations.push_back(std::move(one.activations[0]));
        out.merging_sizes.push_back(std::move(one.merging_sizes[0]));
        out.provenance.push_back(std::move(one.provenance[0]));
    }
    return out;
}

std::vector<Matrix> attention(TokenBatch& x, const BlockWeights& bw, const ModelConfig& cfg,
                              bool proportional, AttentionProbe* probe) {
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t heads = static_cast<std::size_t>(cfg.heads);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

    std::vector<Matrix> keys_out;
    keys_out.reserve(x.batch_size());

    for (std::size_t img = 0; img < x.batch_size(); ++img) {
        Matrix& act = x.activations[img];
        const std::size_t n = act.rows;

        const Matrix ln = layer_norm<float>(act, bw.ln1_g, bw.ln1_b, kLayerNormEps);
        const Matrix qkv = linear<float>(ln, bw.qkv_w, bw.qkv_b);  // N x 3D

        std::vector<float> log_sizes;
        if (proportional) {
            log_sizes.resize(n);
            for (std::size_t j = 0; j < n; ++j) {
                log_sizes[j] = std::log(static_cast<float>(x.merging_sizes[img][j]));
            }
        }

        if (probe) probe->head_attn.clear();

        Matrix concat(n, d);
        Matrix keys_mean(n, hd);
        for (std::size_t h = 0; h < heads; ++h) {
            Matrix q(n, hd), k(n, hd), v(n, hd);
            for (std::size_t i = 0; i < n; ++i) {
                const auto qrow = qkv.row(i);
                for (std::size_t c = 0; c < hd; ++c) {
                    q.at(i, c) = qrow[h * hd + c];
                    k.at(i, c) = qrow[d + h * hd + c];
                    v.at(i, c) = qrow[2 * d + h * hd + c];
                }
            }

            Matrix logits = matmul_nt(q, k);
            for (std::size_t i = 0; i < n; ++i) {
                auto lrow = logits.row(i);
                for (std::size_t j = 0; j < n; ++j) {
                    lrow[j] *= scale;
                    if (proportional) lrow[j] += log_sizes[j];
                }
            }

            const Matrix attn = softmax_rows(logits);
            if (probe) probe->head_attn.push_back(attn);
            const Matrix out = matmul(attn, v);

            for (std::size_t i = 0; i < n; ++i) {
                const auto orow = out.row(i);
                auto crow = concat.row(i);
                auto krow = keys_mean.row(i);
                for (std::size_t c = 0; c < hd; ++c) {
                    crow[h * hd + c] = orow[c];
                    krow[c] += k.at(i, c);
                }
            }
        }
        const float inv_heads = 1.0f / static_cast<float>(heads);
        for (auto& v : keys_mean.data) v *= inv_heads;

        const Matrix proj = linear<float>(concat, bw.proj_w, bw.proj_b);
        for (std::size_t i = 0; i < act.data.size(); ++i) {
            act.data[i] += proj.data[i];
        }
        keys_out.push_back(std::move(keys_mean));
    }
    return keys_out;
}

namespace {

void mlp_block(TokenBatch& x, const BlockWeights& bw) {
    for (auto& act : x.activations) {
        const Matrix ln = layer_norm<float>(act, bw.ln2_g, bw.ln2_b, kLayerNormEps);
        const Matrix hidden = gelu(linear<float>(ln, bw.fc1_w, bw.fc1_b));
        const Matrix out = linear<float>(hidden, bw.fc2_w, bw.fc2_b);
        for (std::size_t i = 0; i < act.data.size(); ++i) {
            act.data[i] += out.data[i];
        }
    }
}

void drop_to_cls(TokenBatch& x) {
    const std::size_t cls = *x.cls_index;
    for (std::size_t img = 0; img < x.batch_size(); ++img) {
        Matrix only(1, x.activations[img].cols);
        const auto row = x.activations[img].row(cls);
        std::copy(row.begin(), row.end(), only.row(0).begin());
        x.activations[img] = std::move(only);
        x.merging_sizes[img] = {x.merging_sizes[img][cls]};
        x.provenance[img] = {x.provenance[img][cls]};
    }
    x.cls_index = 0;
    x.cls_only = true;
}

}  // namespace

ForwardResult forward(TokenBatch tokens, const ModelConfig& cfg, const ModelWeights& w,
                      const MergeSchedule& schedule, const LayerObserver& observer) {
    cfg.validate();
    w.shape_audit(cfg);
    schedule.validate();
    if (tokens.batch_size() == 0) throw ShapeError("forward: empty batch");
    if (tokens.dim() != static_cast<std::size_t>(cfg.dim)) {
        throw ShapeError("forward: token dim " + std::to_string(tokens.dim()) +
                         " vs model dim " + std::to_string(cfg.dim));
    }

    const int ls = cfg.resolved_splitting_depth();
    Trace trace;
    for (int l = 1; l <= cfg.depth; ++l) {
        const BlockWeights& bw = w.blocks[static_cast<std::size_t>(l - 1)];
        const std::size_t n_before = tokens.token_count();
        const std::vector<Matrix> keys = attention(tokens, bw, cfg, cfg.proportional_attention);

        LayerRecord rec;
        if (cfg.final_layer_cls_only && l == cfg.depth && tokens.cls_index) {
            drop_to_cls(tokens);
            rec.layer = l;
            rec.tokens_before = n_before;
            rec.tokens_after = 1;
            rec.strategy = "cls_drop";
            rec.cls_drop = true;
        } else {
            rec = step(tokens, keys, l, schedule, ls);
        }

        mlp_block(tokens, bw);
        trace.layers.push_back(std::move(rec));
        if (observer) observer(l, tokens);
    }

    // prediction head: CLS row when present, mean pool otherwise
    Matrix logits(tokens.batch_size(), static_cast<std::size_t>(cfg.num_classes));
    for (std::size_t img = 0; img < tokens.batch_size(); ++img) {
        const Matrix& act = tokens.activations[img];
        Matrix pooled(1, act.cols);
        if (tokens.cls_index) {
            const auto row = act.row(*tokens.cls_index);
            std::copy(row.begin(), row.end(), pooled.row(0).begin());
        } else {
            auto dst = pooled.row(0);
            for (std::size_t i = 0; i < act.rows; ++i) {
                const auto row = act.row(i);
                for (std::size_t j = 0; j < act.cols; ++j) dst[j] += row[j];
            }
            const float inv = 1.0f / static_cast<float>(act.rows);
            for (std::size_t j = 0; j < act.cols; ++j) dst[j] *= inv;
        }
        const Matrix out = linear<float>(pooled, w.head_w, w.head_b);
        std::copy(out.row(0).begin(), out.row(0).end(), logits.row(img).begin());
    }

    return ForwardResult{std::move(logits), std::move(trace), std::move(tokens)};
}

}  // namespace atm
