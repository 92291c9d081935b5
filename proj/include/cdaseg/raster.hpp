#ifndef CDASEG_RASTER_HPP
#define CDASEG_RASTER_HPP

// Image / mask / tensor data model and the on-disk formats:
//   * P6 (RGB image) and P5 (label mask) portable maps, maxval 255
//   * native tensor files: "CDAT", u8 version=1, u8 rank, rank x u32 LE dims,
//     then f32 LE payload in row-major order
//   * dataset directories: <root>/<split>/img_%05d.ppm, lab_%05d.pgm, manifest.txt

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdaseg/common.hpp"

namespace cdaseg {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

/// W x H x F raster, interleaved row-major: data[(row * W + col) * F + channel].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int f, float fill = 0.0f)
        : width(w), height(h), channels(f), data(static_cast<std::size_t>(w) * h * f, fill) {
        if (w < 1 || h < 1 || f < 1) throw ShapeError("image dimensions must be positive");
    }

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    float& at(int row, int col, int ch) { return data[(static_cast<std::size_t>(row) * width + col) * channels + ch]; }
    float at(int row, int col, int ch) const {
        return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }

    /// Throws ShapeError if the size or value-range invariants are violated.
    void validate() const {
        if (width < 1 || height < 1 || channels < 1) throw ShapeError("image dimensions must be positive");
        if (data.size() != pixels() * channels) throw ShapeError("image data length mismatch");
        for (float v : data)
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw ShapeError("image value outside [0,1]");
    }

    bool operator==(const Image&) const = default;
};

/// Per-pixel class indices; kVoid marks pixels excluded from losses and metrics.
struct LabelMask {
    static constexpr std::uint8_t kVoid = 255;
    static constexpr int kMaxClasses = 32;

    int width = 0;
    int height = 0;
    int num_classes = 0;
    std::vector<std::uint8_t> labels;

    LabelMask() = default;
    LabelMask(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), num_classes(c), labels(static_cast<std::size_t>(w) * h, fill) {
        if (w < 1 || h < 1) throw ShapeError("mask dimensions must be positive");
        if (c < 1 || c > kMaxClasses) throw ShapeError("num_classes must be in [1, 32]");
    }

    std::size_t pixels() const { return labels.size(); }
    std::uint8_t& at(int row, int col) { return labels[static_cast<std::size_t>(row) * width + col]; }
    std::uint8_t at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
    static bool is_void(std::uint8_t v) { return v == kVoid; }

    void validate() const {
        if (labels.size() != static_cast<std::size_t>(width) * height) throw ShapeError("mask length mismatch");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] != kVoid && labels[i] >= num_classes)
                throw LabelRangeError(static_cast<int>(i / width), static_cast<int>(i % width), labels[i],
                                      num_classes);
    }

    /// One-hot value Y(row, col, c); all-zero at void pixels.
    float one_hot(int row, int col, int c) const { return at(row, col) == c ? 1.0f : 0.0f; }

    bool operator==(const LabelMask&) const = default;
};

/// Per-pixel class probabilities, probs[(row * W + col) * C + c].
struct Prediction {
    int width = 0;
    int height = 0;
    int num_classes = 0;
    std::vector<float> probs;

    Prediction() = default;
    Prediction(int w, int h, int c)
        : width(w), height(h), num_classes(c), probs(static_cast<std::size_t>(w) * h * c, 0.0f) {}

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    std::span<const float> pixel(std::size_t p) const {
        return {probs.data() + p * num_classes, static_cast<std::size_t>(num_classes)};
    }

    /// Per-pixel argmax, ties to the lowest class index.
    LabelMask argmax() const {
        LabelMask m(width, height, num_classes);
        for (std::size_t p = 0; p < pixels(); ++p) {
            auto row = pixel(p);
            int best = 0;
            for (int c = 1; c < num_classes; ++c)
                if (row[c] > row[best]) best = c;
            m.labels[p] = static_cast<std::uint8_t>(best);
        }
        return m;
    }
};

/// One-hot prediction of a mask (void pixels get an all-zero row).
inline Prediction one_hot_prediction(const LabelMask& mask) {
    Prediction p(mask.width, mask.height, mask.num_classes);
    for (std::size_t i = 0; i < mask.pixels(); ++i)
        if (mask.labels[i] != LabelMask::kVoid) p.probs[i * mask.num_classes + mask.labels[i]] = 1.0f;
    return p;
}

/// Shaped real array persisted in the native tensor format.
struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    Tensor() = default;
    Tensor(std::vector<std::uint32_t> d, std::vector<float> v) : dims(std::move(d)), values(std::move(v)) {
        if (element_count(dims) != values.size()) throw ShapeError("tensor dims do not match value count");
    }

    static std::size_t element_count(const std::vector<std::uint32_t>& d) {
        std::size_t n = 1;
        for (auto x : d) n *= x;
        return n;
    }

    bool operator==(const Tensor&) const = default;
};

enum class Domain { Source, Target };

struct DatasetItem {
    std::string id;
    Image image;
    std::optional<LabelMask> mask;
};

struct Dataset {
    int num_classes = 0;
    Domain domain = Domain::Source;
    std::vector<DatasetItem> items;

    std::size_t size() const { return items.size(); }

    bool fully_labeled() const {
        return std::all_of(items.begin(), items.end(), [](const DatasetItem& it) { return it.mask.has_value(); });
    }

    std::vector<Image> images() const {
        std::vector<Image> out;
        out.reserve(items.size());
        for (const auto& it : items) out.push_back(it.image);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Byte-level helpers

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading", path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure", path.string());
    return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing", path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure", path.string());
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
    return v;
}

struct PnmHeader {
    char kind = 0;  // '5' or '6'
    int width = 0;
    int height = 0;
    std::size_t payload_offset = 0;
};

inline PnmHeader parse_pnm_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("not a binary P5/P6 file", 0);
    PnmHeader h;
    h.kind = static_cast<char>(bytes[1]);
    std::size_t pos = 2;
    auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
    auto read_int = [&](const char* name) {
        for (;;) {
            while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size()) throw FormatError(std::string("truncated header while reading ") + name, pos);
        if (bytes[pos] < '0' || bytes[pos] > '9') throw FormatError(std::string("malformed ") + name, pos);
        long v = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1'000'000) throw FormatError(std::string(name) + " too large", pos);
            ++pos;
        }
        return static_cast<int>(v);
    };
    if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("malformed magic", pos);
    h.width = read_int("width");
    h.height = read_int("height");
    const std::size_t maxval_at = pos;
    const int maxval = read_int("maxval");
    if (h.width < 1 || h.height < 1) throw FormatError("zero image dimension", maxval_at);
    if (maxval != 255) throw FormatError("maxval must be 255, got " + std::to_string(maxval), maxval_at);
    if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("missing whitespace after maxval", pos);
    h.payload_offset = pos + 1;
    return h;
}

inline std::vector<std::uint8_t> pnm_header(char kind, int w, int h) {
    std::string s = std::string("P") + kind + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    return {s.begin(), s.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensors

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.dims.size() > 255) throw ShapeError("tensor rank exceeds 255");
    if (Tensor::element_count(t.dims) != t.values.size()) throw ShapeError("tensor dims do not match value count");
    std::vector<std::uint8_t> out = {'C', 'D', 'A', 'T', 1, static_cast<std::uint8_t>(t.dims.size())};
    for (auto d : t.dims) detail::put_u32(out, d);
    const std::size_t at = out.size();
    out.resize(at + t.values.size() * 4);
    if (!t.values.empty()) std::memcpy(out.data() + at, t.values.data(), t.values.size() * 4);
    return out;
}

/// Decodes one tensor starting at `offset`; advances `offset` past it.
inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    const std::size_t start = offset;
    if (bytes.size() < start + 6 || std::memcmp(bytes.data() + start, "CDAT", 4) != 0)
        throw FormatError("missing CDAT magic", start);
    if (bytes[start + 4] != 1) throw FormatError("unsupported tensor version", start + 4);
    const std::size_t rank = bytes[start + 5];
    std::size_t pos = start + 6;
    if (bytes.size() < pos + 4 * rank) throw FormatError("truncated tensor dims", bytes.size());
    Tensor t;
    for (std::size_t i = 0; i < rank; ++i, pos += 4) t.dims.push_back(detail::get_u32(bytes, pos));
    const std::size_t n = Tensor::element_count(t.dims);
    if (bytes.size() < pos + 4 * n) throw FormatError("truncated tensor payload", bytes.size());
    t.values.resize(n);
    if (n) std::memcpy(t.values.data(), bytes.data() + pos, 4 * n);
    offset = pos + 4 * n;
    return t;
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
    detail::write_file(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    auto bytes = detail::read_file(path);
    std::size_t off = 0;
    Tensor t = decode_tensor(bytes, off);
    if (off != bytes.size()) throw FormatError("trailing bytes after tensor", off);
    return t;
}

// ---------------------------------------------------------------------------
// Images and masks

/// Quantizes [0,1] to a byte, rounding half up.
inline std::uint8_t quantize_unit(float v) {
    const double scaled = std::floor(static_cast<double>(std::clamp(v, 0.0f, 1.0f)) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(scaled);
}

inline Image decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "CDAT", 4) == 0) {
        std::size_t off = 0;
        Tensor t = decode_tensor(bytes, off);
        if (t.dims.size() != 3) throw FormatError("image tensor must have rank 3 (H, W, F)", 5);
        if (t.dims[0] == 0 || t.dims[1] == 0 || t.dims[2] == 0) throw FormatError("zero image dimension", 6);
        Image img;
        img.height = static_cast<int>(t.dims[0]);
        img.width = static_cast<int>(t.dims[1]);
        img.channels = static_cast<int>(t.dims[2]);
        img.data = std::move(t.values);
        for (std::size_t i = 0; i < img.data.size(); ++i)
            if (!std::isfinite(img.data[i]) || img.data[i] < 0.0f || img.data[i] > 1.0f)
                throw FormatError("image value outside [0,1]", 6 + 12 + 4 * i);
        return img;
    }
    auto h = detail::parse_pnm_header(bytes);
    if (h.kind != '6') throw FormatError("expected P6 image", 1);
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
    if (bytes.size() < h.payload_offset + need) throw FormatError("truncated P6 payload", bytes.size());
    Image img(h.width, h.height, 3);
    for (std::size_t i = 0; i < need; ++i) img.data[i] = static_cast<float>(bytes[h.payload_offset + i]) / 255.0f;
    return img;
}

inline Image load_image(const std::filesystem::path& path) { return decode_image(detail::read_file(path)); }

/// Writes a 3-channel image as P6; other channel counts go to the tensor format.
inline std::vector<std::uint8_t> encode_image(const Image& img) {
    if (img.channels != 3) {
        return encode_tensor(Tensor({static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width),
                                     static_cast<std::uint32_t>(img.channels)},
                                    img.data));
    }
    auto out = detail::pnm_header('6', img.width, img.height);
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) out.push_back(quantize_unit(v));
    return out;
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
    detail::write_file(path, encode_image(img));
}

inline LabelMask decode_mask(std::span<const std::uint8_t> bytes, int num_classes) {
    auto h = detail::parse_pnm_header(bytes);
    if (h.kind != '5') throw FormatError("expected P5 mask", 1);
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
    if (bytes.size() < h.payload_offset + need) throw FormatError("truncated P5 payload", bytes.size());
    LabelMask m(h.width, h.height, num_classes);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), need, m.labels.begin());
    m.validate();
    return m;
}

inline LabelMask load_mask(const std::filesystem::path& path, int num_classes) {
    return decode_mask(detail::read_file(path), num_classes);
}

inline std::vector<std::uint8_t> encode_mask(const LabelMask& m) {
    auto out = detail::pnm_header('5', m.width, m.height);
    out.insert(out.end(), m.labels.begin(), m.labels.end());
    return out;
}

inline void save_mask(const LabelMask& m, const std::filesystem::path& path) {
    detail::write_file(path, encode_mask(m));
}

// ---------------------------------------------------------------------------
// Dataset directories

inline std::string indexed_name(const char* prefix, std::size_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05zu.%s", prefix, i, ext);
    return buf;
}

/// Writes <root>/<split>/{img,lab}_%05d.* and manifest.txt. Masks are written when present.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& root, const std::string& split) {
    const auto dir = root / split;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory", dir.string());
    std::string manifest;
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        const auto& it = ds.items[i];
        save_image(it.image, dir / indexed_name("img", i, "ppm"));
        if (it.mask) save_mask(*it.mask, dir / indexed_name("lab", i, "pgm"));
        manifest += it.id + "\n";
    }
    const std::vector<std::uint8_t> bytes(manifest.begin(), manifest.end());
    detail::write_file(dir / "manifest.txt", bytes);
}

/// Reads a dataset directory. Masks are loaded where the lab file exists;
/// `require_masks` turns a missing mask into an error.
inline Dataset load_dataset(const std::filesystem::path& root, const std::string& split, int num_classes,
                            Domain domain, bool require_masks = false) {
    const auto dir = root / split;
    auto manifest_bytes = detail::read_file(dir / "manifest.txt");
    Dataset ds;
    ds.num_classes = num_classes;
    ds.domain = domain;
    std::string line;
    std::size_t i = 0;
    auto flush = [&] {
        if (line.empty()) return;
        DatasetItem item;
        item.id = line;
        item.image = load_image(dir / indexed_name("img", i, "ppm"));
        const auto lab = dir / indexed_name("lab", i, "pgm");
        if (std::filesystem::exists(lab))
            item.mask = load_mask(lab, num_classes);
        else if (require_masks)
            throw IoError("missing label mask", lab.string());
        ds.items.push_back(std::move(item));
        ++i;
        line.clear();
    };
    for (auto b : manifest_bytes) {
        if (b == '\n')
            flush();
        else if (b != '\r')
            line.push_back(static_cast<char>(b));
    }
    flush();
    return ds;
}

}  // namespace cdaseg

#endif  // CDASEG_RASTER_HPP
