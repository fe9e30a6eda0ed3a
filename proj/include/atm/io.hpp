#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atm/model.hpp"
#include "atm/tokens.hpp"

namespace atm::io {

enum class Dtype { F32, F64, U32 };

std::size_t dtype_width(Dtype d);
const char* dtype_name(Dtype d);

struct TensorInfo {
    Dtype dtype = Dtype::F32;
    std::vector<std::size_t> shape;
    std::size_t begin = 0;  // payload-relative byte offsets
    std::size_t end = 0;

    std::size_t element_count() const;
};

// Binary tensor container: an 8-byte little-endian length prefix, a UTF-8
// JSON header mapping tensor name -> {dtype, shape, data_offsets}, then the
// raw little-endian payload. The layout matches the dominant open tensor
// container so converted checkpoints load without extra tooling.
struct TensorContainer {
    std::map<std::string, TensorInfo> tensors;  // sorted => deterministic layout
    std::vector<std::uint8_t> payload;

    void add_f32(const std::string& name, std::vector<std::size_t> shape,
                 std::span<const float> values);
    void add_u32(const std::string& name, std::vector<std::size_t> shape,
                 std::span<const std::uint32_t> values);

    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    const TensorInfo& info(const std::string& name) const;
    std::vector<float> f32(const std::string& name) const;
    std::vector<std::uint32_t> u32(const std::string& name) const;

    static TensorContainer read(const std::string& path);
    void write(const std::string& path) const;
};

// Loads and shape-audits model weights. Unknown tensors are ignored with a
// warning on stderr; missing or mis-shaped tensors are errors.
ModelWeights load_weights(const std::string& path, const ModelConfig& cfg);
void save_weights(const std::string& path, const ModelConfig& cfg, const ModelWeights& w);

// Token dumps use the reserved names `tokens` (B x N x D, f32) and `sizes`
// (B x N, u32).
TokenBatch load_token_dump(const std::string& path, bool use_cls_token);
void save_token_dump(const std::string& path, const TokenBatch& batch);

struct ChannelStats {
    std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> stddev{1.0f, 1.0f, 1.0f};
};

// Binary P6 portable pixmap, 8-bit channels, maxval 255. Values come back
// divided by 255, optionally standardized per channel.
Image load_image_ppm(const std::string& path,
                     const std::optional<ChannelStats>& normalize = std::nullopt);
void save_ppm(const std::string& path, const Image& image);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

// Deterministic color for a surviving token id under a palette seed.
Rgb token_color(std::size_t token_id, std::uint64_t seed);

struct TokenMap {
    int grid_side = 0;
    std::vector<std::size_t> grid;  // patch index -> surviving token position
    std::map<std::size_t, Rgb> palette;
    std::size_t remaining_count = 0;  // distinct surviving tokens on the grid
};

// Reads the provenance of one image back into a patch-grid assignment.
// Throws InvariantViolation when any patch has no surviving owner.
TokenMap build_token_map(const TokenBatch& batch, std::size_t image_index, int grid_side,
                         std::uint64_t palette_seed);

// Renders the map as a P6 image (cell_px pixels per patch, thin borders
// between distinct tokens) and returns the remaining-token count.
std::size_t render_token_map(const TokenBatch& batch, std::size_t image_index, int grid_side,
                             std::uint64_t palette_seed, const std::string& out_path,
                             int cell_px = 16);

}  // namespace atm::io
