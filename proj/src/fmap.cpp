#include "expgraph/fmap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "expgraph/error.hpp"

namespace expgraph {

namespace {

using nlohmann::json;

constexpr std::size_t kHeaderOffset = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t x) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(x >> (8 * b)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string at_offset(std::string_view source, std::size_t offset, std::string_view what) {
    return std::string(source) + " @byte " + std::to_string(offset) + ": " + std::string(what);
}

nlohmann::ordered_json canonical_header(const FeatureMap& fm) {
    const LayerMeta& m = fm.meta;
    nlohmann::ordered_json h;
    h["image_id"] = fm.image_id;
    h["layer_id"] = m.layer_id;
    h["D"] = m.depth;
    h["H"] = m.height;
    h["W"] = m.width;
    h["stride_px"] = m.stride_px;
    h["offset_px"] = {m.offset_px.x, m.offset_px.y};
    h["image_width_px"] = m.image_width_px;
    h["image_height_px"] = m.image_height_px;
    h["image_diag_px"] = m.image_diag_px;
    return h;
}

struct ParsedHeader {
    std::string image_id;
    LayerMeta meta;
};

ParsedHeader parse_header(std::string_view text, std::string_view source) {
    auto bad = [&](std::string_view what) -> ParsedHeader {
        fail(ErrorKind::HeaderParseError, at_offset(source, kHeaderOffset, what));
    };
    json h = json::parse(text, nullptr, false);
    if (h.is_discarded() || !h.is_object()) return bad("header is not a JSON object");

    auto positive_int = [&](const char* key) {
        auto it = h.find(key);
        if (it == h.end() || !it->is_number_integer() || it->get<long long>() < 1 ||
            it->get<long long>() > std::numeric_limits<int>::max())
            bad(std::string("missing or non-positive integer '") + key + "'");
        return it->get<int>();
    };
    auto number = [&](const json& v, const char* key) {
        if (!v.is_number()) bad(std::string("'") + key + "' must be a number");
        double x = v.get<double>();
        if (!std::isfinite(x)) bad(std::string("'") + key + "' must be finite");
        return x;
    };
    auto required = [&](const char* key) -> const json& {
        auto it = h.find(key);
        if (it == h.end()) bad(std::string("missing '") + key + "'");
        return *it;
    };

    ParsedHeader out;
    const json& image_id = required("image_id");
    const json& layer_id = required("layer_id");
    if (!image_id.is_string() || !layer_id.is_string()) bad("image_id and layer_id must be strings");
    out.image_id = image_id.get<std::string>();
    LayerMeta& m = out.meta;
    m.layer_id = layer_id.get<std::string>();
    m.depth = positive_int("D");
    m.height = positive_int("H");
    m.width = positive_int("W");
    m.stride_px = number(required("stride_px"), "stride_px");
    const json& off = required("offset_px");
    if (!off.is_array() || off.size() != 2) bad("'offset_px' must be a pair");
    m.offset_px = {number(off[0], "offset_px"), number(off[1], "offset_px")};
    m.image_width_px = number(required("image_width_px"), "image_width_px");
    m.image_height_px = number(required("image_height_px"), "image_height_px");
    if (auto it = h.find("image_diag_px"); it != h.end())
        m.image_diag_px = number(*it, "image_diag_px");
    else
        m.image_diag_px = std::hypot(m.image_width_px, m.image_height_px);
    if (m.stride_px <= 0.0 || m.image_width_px <= 0.0 || m.image_height_px <= 0.0 ||
        m.image_diag_px <= 0.0)
        bad("stride and image dimensions must be positive");
    return out;
}

}  // namespace

void validate(const LayerMeta& m) {
    if (m.depth < 1 || m.height < 1 || m.width < 1)
        fail(ErrorKind::InvalidArgument, "layer " + m.layer_id + ": D, H, W must be >= 1");
    if (!(m.stride_px > 0.0) || !(m.image_diag_px > 0.0) || !(m.image_width_px > 0.0) ||
        !(m.image_height_px > 0.0))
        fail(ErrorKind::InvalidArgument, "layer " + m.layer_id + ": stride and image size must be > 0");
}

std::vector<std::uint8_t> encode_fmap(const FeatureMap& fm) {
    validate(fm.meta);
    if (fm.values.size() != fm.meta.unit_count())
        fail(ErrorKind::PayloadSizeMismatch,
             "value count " + std::to_string(fm.values.size()) + " != D*H*W " +
                 std::to_string(fm.meta.unit_count()));

    std::string header;
    if (!fm.header_text.empty()) {
        try {
            ParsedHeader ph = parse_header(fm.header_text, "<header_text>");
            if (ph.image_id == fm.image_id && ph.meta == fm.meta) header = fm.header_text;
        } catch (const Error&) {
        }
    }
    if (header.empty()) header = canonical_header(fm).dump();

    std::vector<std::uint8_t> out;
    out.reserve(kHeaderOffset + header.size() + 4 * fm.values.size());
    out.insert(out.end(), kFmapMagic.begin(), kFmapMagic.end());
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (float v : fm.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

FeatureMap decode_fmap(std::span<const std::uint8_t> bytes, std::string_view source) {
    if (bytes.size() < kFmapMagic.size() ||
        !std::equal(kFmapMagic.begin(), kFmapMagic.end(), bytes.begin()))
        fail(ErrorKind::BadMagic, at_offset(source, 0, "expected FMAP0001"));
    if (bytes.size() < kHeaderOffset)
        fail(ErrorKind::HeaderParseError, at_offset(source, 8, "truncated header length"));
    const std::size_t header_len = get_u32(bytes.data() + 8);
    if (bytes.size() - kHeaderOffset < header_len)
        fail(ErrorKind::HeaderParseError,
             at_offset(source, kHeaderOffset,
                       "header length " + std::to_string(header_len) + " exceeds file"));

    FeatureMap fm;
    fm.header_text.assign(reinterpret_cast<const char*>(bytes.data() + kHeaderOffset), header_len);
    ParsedHeader ph = parse_header(fm.header_text, source);
    fm.image_id = std::move(ph.image_id);
    fm.meta = std::move(ph.meta);

    const std::size_t payload_offset = kHeaderOffset + header_len;
    const std::size_t count = fm.meta.unit_count();
    const std::size_t payload = bytes.size() - payload_offset;
    if (payload != 4 * count)
        fail(ErrorKind::PayloadSizeMismatch,
             at_offset(source, payload_offset,
                       "expected " + std::to_string(4 * count) + " payload bytes, found " +
                           std::to_string(payload)));

    fm.values.resize(count);
    const std::uint8_t* p = bytes.data() + payload_offset;
    for (std::size_t k = 0; k < count; ++k) {
        float v = std::bit_cast<float>(get_u32(p + 4 * k));
        if (!std::isfinite(v))
            fail(ErrorKind::NonFiniteValue, at_offset(source, payload_offset + 4 * k, "non-finite value"));
        fm.values[k] = v;
    }
    return fm;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

FeatureMap load_fmap(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return decode_fmap(bytes, path.string());
}

void write_fmap(const std::filesystem::path& path, const FeatureMap& fm) {
    write_file_bytes(path, encode_fmap(fm));
}

Vec2 project_position(int i, int j, const LayerMeta& meta) {
    if (i < 0 || i >= meta.height || j < 0 || j >= meta.width)
        fail(ErrorKind::IndexOutOfRange,
             "unit (" + std::to_string(i) + "," + std::to_string(j) + ") outside " +
                 std::to_string(meta.height) + "x" + std::to_string(meta.width) + " grid of " +
                 meta.layer_id);
    const double x = meta.offset_px.x + meta.stride_px * j;
    const double y = meta.offset_px.y + meta.stride_px * i;
    return {std::clamp(x / meta.image_width_px, 0.0, 1.0),
            std::clamp(y / meta.image_height_px, 0.0, 1.0)};
}

std::vector<Unit> normalize_responses(const FeatureMap& fm, double beta) {
    if (!(beta > 0.0)) fail(ErrorKind::InvalidArgument, "beta must be > 0");
    const LayerMeta& m = fm.meta;
    float peak = 0.0f;
    for (float v : fm.values) peak = std::max(peak, v);
    const double scale = peak > 0.0f ? static_cast<double>(peak) : 1.0;

    std::vector<Unit> units;
    units.reserve(m.unit_count());
    for (int d = 0; d < m.depth; ++d)
        for (int i = 0; i < m.height; ++i)
            for (int j = 0; j < m.width; ++j) {
                Unit u;
                u.d = d;
                u.i = i;
                u.j = j;
                u.p = project_position(i, j, m);
                u.f = static_cast<double>(fm.values[m.linear_index(d, i, j)]) / scale;
                u.mass = beta * std::max(u.f, 0.0);
                units.push_back(u);
            }
    return units;
}

}  // namespace expgraph
