#include "atm/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "atm/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian; big-endian hosts are unsupported");

namespace atm::io {

using nlohmann::json;

std::size_t dtype_width(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U32: return 4;
    }
    return 0;
}

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "F32";
        case Dtype::F64: return "F64";
        case Dtype::U32: return "U32";
    }
    return "?";
}

namespace {

Dtype dtype_from_name(const std::string& name) {
    if (name == "F32") return Dtype::F32;
    if (name == "F64") return Dtype::F64;
    if (name == "U32") return Dtype::U32;
    throw ParseError("container: unsupported dtype " + name);
}

}  // namespace

std::size_t TensorInfo::element_count() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

void TensorContainer::add_f32(const std::string& name, std::vector<std::size_t> shape,
                              std::span<const float> values) {
    TensorInfo info;
    info.dtype = Dtype::F32;
    info.shape = std::move(shape);
    if (info.element_count() != values.size()) {
        throw ShapeError("container: value count does not match shape for " + name);
    }
    info.begin = payload.size();
    info.end = info.begin + values.size() * 4;
    payload.resize(info.end);
    std::memcpy(payload.data() + info.begin, values.data(), values.size() * 4);
    tensors[name] = std::move(info);
}

void TensorContainer::add_u32(const std::string& name, std::vector<std::size_t> shape,
                              std::span<const std::uint32_t> values) {
    TensorInfo info;
    info.dtype = Dtype::U32;
    info.shape = std::move(shape);
    if (info.element_count() != values.size()) {
        throw ShapeError("container: value count does not match shape for " + name);
    }
    info.begin = payload.size();
    info.end = info.begin + values.size() * 4;
    payload.resize(info.end);
    std::memcpy(payload.data() + info.begin, values.data(), values.size() * 4);
    tensors[name] = std::move(info);
}

const TensorInfo& TensorContainer::info(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw ShapeError("container: missing tensor " + name);
    }
    return it->second;
}

std::vector<float> TensorContainer::f32(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != Dtype::F32) {
        throw ShapeError("container: " + name + " is not F32");
    }
    std::vector<float> out(t.element_count());
    std::memcpy(out.data(), payload.data() + t.begin, out.size() * 4);
    return out;
}

std::vector<std::uint32_t> TensorContainer::u32(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != Dtype::U32) {
        throw ShapeError("container: " + name + " is not U32");
    }
    std::vector<std::uint32_t> out(t.element_count());
    std::memcpy(out.data(), payload.data() + t.begin, out.size() * 4);
    return out;
}

TensorContainer TensorContainer::read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("container: cannot open " + path);

    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (!in) throw ParseError("container: truncated length prefix in " + path);

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw ParseError("container: header shorter than its length prefix in " + path);

    std::vector<std::uint8_t> payload(std::istreambuf_iterator<char>(in), {});

    json doc;
    try {
        doc = json::parse(header);
    } catch (const json::exception& e) {
        throw ParseError("container: malformed header in " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw ParseError("container: header is not an object");

    TensorContainer c;
    c.payload = std::move(payload);
    for (const auto& [name, entry] : doc.items()) {
        if (name == "__metadata__") continue;
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw ParseError("container: malformed entry for tensor " + name);
        }
        TensorInfo info;
        info.dtype = dtype_from_name(entry["dtype"].get<std::string>());
        for (const auto& s : entry["shape"]) info.shape.push_back(s.get<std::size_t>());
        const auto& off = entry["data_offsets"];
        if (!off.is_array() || off.size() != 2) {
            throw ParseError("container: bad data_offsets for tensor " + name);
        }
        info.begin = off[0].get<std::size_t>();
        info.end = off[1].get<std::size_t>();
        if (info.end < info.begin || info.end > c.payload.size()) {
            throw BoundsError("container: tensor " + name + " exceeds payload (offsets " +
                              std::to_string(info.begin) + ".." + std::to_string(info.end) +
                              " of " + std::to_string(c.payload.size()) + " bytes)");
        }
        if (info.end - info.begin != info.element_count() * dtype_width(info.dtype)) {
            throw BoundsError("container: tensor " + name + " size does not cover its shape");
        }
        c.tensors[name] = std::move(info);
    }

    // overlap check over begin-sorted ranges
    std::vector<const TensorInfo*> ranges;
    std::vector<const std::string*> names;
    for (const auto& [name, info] : c.tensors) {
        ranges.push_back(&info);
        names.push_back(&name);
    }
    std::vector<std::size_t> order(ranges.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return ranges[a]->begin < ranges[b]->begin; });
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (ranges[order[i]]->begin < ranges[order[i - 1]]->end) {
            throw BoundsError("container: tensors " + *names[order[i - 1]] + " and " +
                              *names[order[i]] + " overlap");
        }
    }
    return c;
}

void TensorContainer::write(const std::string& path) const {
    // Re-pack in name order so identical contents serialize identically.
    json header = json::object();
    std::vector<std::uint8_t> packed;
    packed.reserve(payload.size());
    for (const auto& [name, info] : tensors) {
        const std::size_t begin = packed.size();
        const std::size_t len = info.end - info.begin;
        packed.insert(packed.end(), payload.begin() + static_cast<std::ptrdiff_t>(info.begin),
                      payload.begin() + static_cast<std::ptrdiff_t>(info.end));
        header[name] = {{"dtype", dtype_name(info.dtype)},
                        {"shape", info.shape},
                        {"data_offsets", {begin, begin + len}}};
    }
    const std::string header_str = header.dump();
    const std::uint64_t header_len = header_str.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("container: cannot write " + path);
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(packed.data()),
              static_cast<std::streamsize>(packed.size()));
    if (!out) throw ParseError("container: short write to " + path);
}

namespace {

Matrix tensor_as_matrix(const TensorContainer& c, const std::string& name, std::size_t rows,
                        std::size_t cols) {
    const TensorInfo& info = c.info(name);
    if (info.shape != std::vector<std::size_t>{rows, cols}) {
        throw ShapeError("weights: " + name + " has the wrong shape");
    }
    Matrix m(rows, cols);
    m.data = c.f32(name);
    return m;
}

std::vector<float> tensor_as_vector(const TensorContainer& c, const std::string& name,
                                    std::size_t len) {
    const TensorInfo& info = c.info(name);
    if (info.shape != std::vector<std::size_t>{len}) {
        throw ShapeError("weights: " + name + " has the wrong shape");
    }
    return c.f32(name);
}

}  // namespace

ModelWeights load_weights(const std::string& path, const ModelConfig& cfg) {
    cfg.validate();
    const TensorContainer c = TensorContainer::read(path);

    const auto d = static_cast<std::size_t>(cfg.dim);
    const auto md = static_cast<std::size_t>(cfg.mlp_dim());
    const auto patch_len = static_cast<std::size_t>(cfg.patch_size) * cfg.patch_size * 3;

    ModelWeights w;
    std::vector<std::string> known;
    auto mat = [&](const std::string& name, std::size_t r, std::size_t cl) {
        known.push_back(name);
        return tensor_as_matrix(c, name, r, cl);
    };
    auto vec = [&](const std::string& name, std::size_t len) {
        known.push_back(name);
        return tensor_as_vector(c, name, len);
    };

    w.patch_w = mat("patch_embed.weight", patch_len, d);
    w.patch_b = vec("patch_embed.bias", d);
    if (cfg.use_cls_token) {
        w.cls_token = vec("cls_token", d);
    }
    w.pos_embed = mat("pos_embed", static_cast<std::size_t>(cfg.num_tokens()), d);
    for (int l = 0; l < cfg.depth; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        BlockWeights b;
        b.qkv_w = mat(p + "attn.qkv.weight", d, 3 * d);
        b.qkv_b = vec(p + "attn.qkv.bias", 3 * d);
        b.proj_w = mat(p + "attn.proj.weight", d, d);
        b.proj_b = vec(p + "attn.proj.bias", d);
        b.ln1_g = vec(p + "ln1.weight", d);
        b.ln1_b = vec(p + "ln1.bias", d);
        b.ln2_g = vec(p + "ln2.weight", d);
        b.ln2_b = vec(p + "ln2.bias", d);
        b.fc1_w = mat(p + "mlp.fc1.weight", d, md);
        b.fc1_b = vec(p + "mlp.fc1.bias", md);
        b.fc2_w = mat(p + "mlp.fc2.weight", md, d);
        b.fc2_b = vec(p + "mlp.fc2.bias", d);
        w.blocks.push_back(std::move(b));
    }
    w.head_w = mat("head.weight", d, static_cast<std::size_t>(cfg.num_classes));
    w.head_b = vec("head.bias", static_cast<std::size_t>(cfg.num_classes));

    for (const auto& [name, info] : c.tensors) {
        if (std::find(known.begin(), known.end(), name) == known.end()) {
            std::cerr << "warning: ignoring unknown tensor '" << name << "' in " << path << "\n";
        }
    }

    w.shape_audit(cfg);
    return w;
}

void save_weights(const std::string& path, const ModelConfig& cfg, const ModelWeights& w) {
    w.shape_audit(cfg);
    TensorContainer c;
    auto put_mat = [&](const std::string& name, const Matrix& m) {
        c.add_f32(name, {m.rows, m.cols}, m.data);
    };
    auto put_vec = [&](const std::string& name, const std::vector<float>& v) {
        c.add_f32(name, {v.size()}, v);
    };
    put_mat("patch_embed.weight", w.patch_w);
    put_vec("patch_embed.bias", w.patch_b);
    if (cfg.use_cls_token) put_vec("cls_token", w.cls_token);
    put_mat("pos_embed", w.pos_embed);
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        const BlockWeights& b = w.blocks[l];
        put_mat(p + "attn.qkv.weight", b.qkv_w);
        put_vec(p + "attn.qkv.bias", b.qkv_b);
        put_mat(p + "attn.proj.weight", b.proj_w);
        put_vec(p + "attn.proj.bias", b.proj_b);
        put_vec(p + "ln1.weight", b.ln1_g);
        put_vec(p + "ln1.bias", b.ln1_b);
        put_vec(p + "ln2.weight", b.ln2_g);
        put_vec(p + "ln2.bias", b.ln2_b);
        put_mat(p + "mlp.fc1.weight", b.fc1_w);
        put_vec(p + "mlp.fc1.bias", b.fc1_b);
        put_mat(p + "mlp.fc2.weight", b.fc2_w);
        put_vec(p + "mlp.fc2.bias", b.fc2_b);
    }
    put_mat("head.weight", w.head_w);
    put_vec("head.bias", w.head_b);
    c.write(path);
}

TokenBatch load_token_dump(const std::string& path, bool use_cls_token) {
    const TensorContainer c = TensorContainer::read(path);
    const TensorInfo& ti = c.info("tokens");
    const TensorInfo& si = c.info("sizes");
    if (ti.dtype != Dtype::F32 || ti.shape.size() != 3) {
        throw ShapeError("token dump: `tokens` must be a B x N x D float32 tensor");
    }
    if (si.dtype != Dtype::U32 || si.shape.size() != 2 || si.shape[0] != ti.shape[0] ||
        si.shape[1] != ti.shape[1]) {
        throw ShapeError("token dump: `sizes` must be a B x N uint32 tensor");
    }
    const std::size_t b = ti.shape[0], n = ti.shape[1], d = ti.shape[2];
    const std::vector<float> tokens = c.f32("tokens");
    const std::vector<std::uint32_t> sizes = c.u32("sizes");

    std::vector<Matrix> acts(b, Matrix(n, d));
    std::vector<std::vector<std::uint32_t>> per_image_sizes(b);
    for (std::size_t img = 0; img < b; ++img) {
        std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(img * n * d),
                  tokens.begin() + static_cast<std::ptrdiff_t>((img + 1) * n * d),
                  acts[img].data.begin());
        per_image_sizes[img].assign(sizes.begin() + static_cast<std::ptrdiff_t>(img * n),
                                    sizes.begin() + static_cast<std::ptrdiff_t>((img + 1) * n));
    }
    return TokenBatch::from_raw(std::move(acts), std::move(per_image_sizes),
                                use_cls_token ? std::optional<std::size_t>{0} : std::nullopt);
}

void save_token_dump(const std::string& path, const TokenBatch& batch) {
    const std::size_t b = batch.batch_size(), n = batch.token_count(), d = batch.dim();
    std::vector<float> tokens;
    tokens.reserve(b * n * d);
    std::vector<std::uint32_t> sizes;
    sizes.reserve(b * n);
    for (std::size_t img = 0; img < b; ++img) {
        tokens.insert(tokens.end(), batch.activations[img].data.begin(),
                      batch.activations[img].data.end());
        sizes.insert(sizes.end(), batch.merging_sizes[img].begin(),
                     batch.merging_sizes[img].end());
    }
    TensorContainer c;
    c.add_f32("tokens", {b, n, d}, tokens);
    c.add_u32("sizes", {b, n}, sizes);
    c.write(path);
}

namespace {

void skip_pnm_space(std::istream& in) {
    int ch = in.peek();
    while (ch == '#' || std::isspace(ch)) {
        if (ch == '#') {
            std::string comment;
            std::getline(in, comment);
        } else {
            in.get();
        }
        ch = in.peek();
    }
}

}  // namespace

Image load_image_ppm(const std::string& path, const std::optional<ChannelStats>& normalize) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("ppm: cannot open " + path);

    std::string magic;
    in >> magic;
    if (magic != "P6") throw ParseError("ppm: bad magic '" + magic + "' in " + path);

    int width = 0, height = 0, maxval = 0;
    skip_pnm_space(in);
    in >> width;
    skip_pnm_space(in);
    in >> height;
    skip_pnm_space(in);
    in >> maxval;
    if (!in || width < 1 || height < 1) {
        throw ParseError("ppm: bad dimensions in " + path);
    }
    if (maxval != 255) {
        throw ParseError("ppm: only 8-bit (maxval 255) images are supported: " + path);
    }
    in.get();  // single whitespace byte before the raster

    const std::size_t count = static_cast<std::size_t>(width) * height * 3;
    std::vector<std::uint8_t> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (!in) throw ParseError("ppm: truncated raster in " + path);

    Image img;
    img.width = width;
    img.height = height;
    img.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    }
    if (normalize) {
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t c = i % 3;
            img.data[i] = (img.data[i] - normalize->mean[c]) / normalize->stddev[c];
        }
    }
    return img;
}

void save_ppm(const std::string& path, const Image& image) {
    if (image.data.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
        throw ShapeError("ppm: image buffer does not match its dimensions");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("ppm: cannot write " + path);
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<std::uint8_t> raw(image.data.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = std::clamp(image.data[i], 0.0f, 1.0f);
        raw[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw ParseError("ppm: short write to " + path);
}

Rgb token_color(std::size_t token_id, std::uint64_t seed) {
    // golden-ratio hue walk, offset by the seed
    const double offset =
        static_cast<double>(Rng::mix(seed) >> 11) * 0x1.0p-53;
    double h = std::fmod(offset + 0.61803398874989484 * static_cast<double>(token_id + 1), 1.0);
    const double s = 0.62, v = 0.95;
    const double hf = h * 6.0;
    const int sector = static_cast<int>(hf) % 6;
    const double f = hf - std::floor(hf);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    double r = 0, g = 0, b = 0;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return Rgb{static_cast<std::uint8_t>(std::lround(r * 255.0)),
               static_cast<std::uint8_t>(std::lround(g * 255.0)),
               static_cast<std::uint8_t>(std::lround(b * 255.0))};
}

TokenMap build_token_map(const TokenBatch& batch, std::size_t image_index, int grid_side,
                         std::uint64_t palette_seed) {
    if (image_index >= batch.batch_size()) {
        throw ShapeError("token map: image index out of range");
    }
    const std::size_t patches = static_cast<std::size_t>(grid_side) * grid_side;
    const std::uint32_t id_offset = batch.cls_index ? 1u : 0u;  // patch p is original id p+offset

    TokenMap map;
    map.grid_side = grid_side;
    map.grid.assign(patches, SIZE_MAX);
    const auto& prov = batch.provenance[image_index];
    for (std::size_t tok = 0; tok < prov.size(); ++tok) {
        for (std::uint32_t orig : prov[tok]) {
            if (orig < id_offset) continue;  // CLS owns no patch
            const std::uint32_t patch = orig - id_offset;
            if (patch < patches) map.grid[patch] = tok;
        }
    }
    for (std::size_t p = 0; p < patches; ++p) {
        if (map.grid[p] == SIZE_MAX) {
            throw InvariantViolation("token map: patch " + std::to_string(p) +
                                     " has no surviving token");
        }
    }
    for (std::size_t tok : map.grid) {
        if (!map.palette.count(tok)) {
            map.palette[tok] = token_color(tok, palette_seed);
        }
    }
    map.remaining_count = map.palette.size();
    return map;
}

std::size_t render_token_map(const TokenBatch& batch, std::size_t image_index, int grid_side,
                             std::uint64_t palette_seed, const std::string& out_path,
                             int cell_px) {
    const TokenMap map = build_token_map(batch, image_index, grid_side, palette_seed);
    const int side_px = grid_side * cell_px;
    const Rgb border{32, 32, 32};

    Image img;
    img.width = side_px;
    img.height = side_px;
    img.data.resize(static_cast<std::size_t>(side_px) * side_px * 3);

    auto token_at = [&](int gy, int gx) {
        return map.grid[static_cast<std::size_t>(gy) * grid_side + gx];
    };

    for (int y = 0; y < side_px; ++y) {
        for (int x = 0; x < side_px; ++x) {
            const int gy = y / cell_px, gx = x / cell_px;
            const std::size_t tok = token_at(gy, gx);
            Rgb color = map.palette.at(tok);
            const bool right_edge = (x % cell_px == cell_px - 1) && gx + 1 < grid_side &&
                                    token_at(gy, gx + 1) != tok;
            const bool bottom_edge = (y % cell_px == cell_px - 1) && gy + 1 < grid_side &&
                                     token_at(gy + 1, gx) != tok;
            if (right_edge || bottom_edge) color = border;
            const std::size_t at = (static_cast<std::size_t>(y) * side_px + x) * 3;
            img.data[at + 0] = static_cast<float>(color.r) / 255.0f;
            img.data[at + 1] = static_cast<float>(color.g) / 255.0f;
            img.data[at + 2] = static_cast<float>(color.b) / 255.0f;
        }
    }
    save_ppm(out_path, img);
    return map.remaining_count;
}

}  // namespace atm::io
