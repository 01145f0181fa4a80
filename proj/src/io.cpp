#include "toposeg/io.hpp"

#include <png.h>

#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "toposeg/errors.hpp"

namespace toposeg::io {

namespace {

// Caps against hostile headers; generous for anything this project produces.
constexpr int kMaxDim = 65535;
constexpr int64_t kMaxSamples = int64_t{1} << 26;

bool is_pnm_space(uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

struct Cursor {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const { throw io_error(path + ": " + what); }

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            if (is_pnm_space(buf[pos])) {
                ++pos;
            } else if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else {
                return;
            }
        }
    }

    int header_int(const char* what) {
        skip_space_and_comments();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9') fail(std::string("expected ") + what + " in header");
        int64_t v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > kMaxSamples) fail(std::string(what) + " out of range");
            ++pos;
        }
        return static_cast<int>(v);
    }
};

struct PnmHeader {
    int width = 0;
    int height = 0;
    int maxval = 0;
    size_t payload = 0;
};

// Magic, three header integers, a single whitespace byte, then raw samples.
PnmHeader parse_pnm_header(Cursor& c, char kind) {
    if (c.buf.size() < 2 || c.buf[0] != 'P' || c.buf[1] != static_cast<uint8_t>(kind))
        c.fail(std::string("not a P") + kind + " file");
    c.pos = 2;
    PnmHeader h;
    h.width = c.header_int("width");
    h.height = c.header_int("height");
    h.maxval = c.header_int("maxval");
    if (h.width < 1 || h.width > kMaxDim || h.height < 1 || h.height > kMaxDim) c.fail("image dimensions out of range");
    if (h.maxval < 1 || h.maxval > 65535) c.fail("maxval out of range");
    if (static_cast<int64_t>(h.width) * h.height > kMaxSamples) c.fail("image too large");
    if (c.pos >= c.buf.size() || !is_pnm_space(c.buf[c.pos])) c.fail("expected single whitespace before payload");
    ++c.pos;
    h.payload = c.pos;
    return h;
}

void require_payload(const Cursor& c, const PnmHeader& h, size_t bytes) {
    if (c.buf.size() < h.payload + bytes) c.fail("truncated payload");
    if (c.buf.size() > h.payload + bytes) c.fail("trailing bytes after payload");
}

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t')) --b;
    return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(k[0])) && k[0] != '_') return false;
    for (char ch : k)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '.') return false;
    return true;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
    throw config_error("config key '" + key + "': cannot parse '" + value + "' as " + want);
}

const std::string& require_value(const Config& cfg, const std::string& key) {
    const std::string* v = cfg.find(key);
    if (!v) throw config_error("config: missing key '" + key + "'");
    return *v;
}

int64_t parse_int_value(const std::string& key, const std::string& v) {
    int64_t out = 0;
    const char* first = v.data();
    const char* last = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc{} || ptr != last || v.empty()) bad_value(key, v, "an integer");
    return out;
}

double parse_double_value(const std::string& key, const std::string& v) {
    if (v.empty()) bad_value(key, v, "a number");
    errno = 0;
    char* end = nullptr;
    double out = std::strtod(v.c_str(), &end);
    if (errno != 0 || end != v.c_str() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
    return out;
}

bool parse_bool_value(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "a boolean (true/false/1/0)");
}

// Checkpoint layout, all multi-byte fields little-endian:
//   magic "TSEGCKPT" | u32 version=1 | u32 entry count
//   per entry: u32 name length | name bytes | u32 rank | i32 dims[rank]
//              | u64 element count | f64 payload (row-major)
constexpr char kCkptMagic[8] = {'T', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;
constexpr uint32_t kCkptMaxRank = 8;
constexpr uint32_t kCkptMaxName = 255;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct CkptReader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const { throw io_error(path + ": " + what); }

    void need(size_t n, const char* what) {
        if (buf.size() - pos < n) fail(std::string("truncated checkpoint (") + what + ")");
    }

    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }

    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
};

} // namespace

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "' for reading");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw io_error("read failed on '" + path + "'");
    return text;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw io_error("write failed on '" + path + "'");
}

std::vector<uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "' for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw io_error("read failed on '" + path + "'");
    return bytes;
}

void write_binary_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw io_error("write failed on '" + path + "'");
}

ImageRGB8 read_ppm(const std::string& path) {
    std::vector<uint8_t> buf = read_binary_file(path);
    Cursor c{buf, 0, path};
    PnmHeader h = parse_pnm_header(c, '6');
    if (h.maxval != 255) c.fail("PPM maxval must be 255");
    size_t bytes = static_cast<size_t>(h.width) * h.height * 3;
    require_payload(c, h, bytes);
    ImageRGB8 img(h.width, h.height);
    std::memcpy(img.pixels.data(), buf.data() + h.payload, bytes);
    return img;
}

void write_ppm(const std::string& path, const ImageRGB8& img) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_ppm: empty image");
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw std::invalid_argument("write_ppm: pixel buffer does not match dimensions");
    std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_binary_file(path, out);
}

GrayImage read_pgm(const std::string& path) {
    std::vector<uint8_t> buf = read_binary_file(path);
    Cursor c{buf, 0, path};
    PnmHeader h = parse_pnm_header(c, '5');
    size_t n = static_cast<size_t>(h.width) * h.height;
    bool wide = h.maxval > 255;
    require_payload(c, h, wide ? n * 2 : n);
    GrayImage img(h.width, h.height, h.maxval);
    const uint8_t* p = buf.data() + h.payload;
    for (size_t i = 0; i < n; ++i) {
        uint16_t v = wide ? static_cast<uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
        if (v > h.maxval) c.fail("sample exceeds maxval");
        img.pixels[i] = v;
    }
    return img;
}

void write_pgm(const std::string& path, const GrayImage& img) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_pgm: empty image");
    if (img.maxval < 1 || img.maxval > 65535) throw std::invalid_argument("write_pgm: maxval out of range");
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height)
        throw std::invalid_argument("write_pgm: pixel buffer does not match dimensions");
    std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    bool wide = img.maxval > 255;
    for (uint16_t v : img.pixels) {
        if (v > img.maxval) throw std::invalid_argument("write_pgm: sample exceeds maxval");
        if (wide) out.push_back(static_cast<uint8_t>(v >> 8));
        out.push_back(static_cast<uint8_t>(v & 0xff));
    }
    write_binary_file(path, out);
}

ImageRGB8 read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw io_error("cannot open '" + path + "' for reading");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw io_error("libpng initialization failed");
    }
    auto cleanup = [&png, &info, &fp]() {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
    };

    // Header region. Locals written here are never read after a longjmp, and
    // no C++ object is mutated inside the region, so the jump is safe.
    if (setjmp(png_jmpbuf(png))) {
        cleanup();
        throw io_error("'" + path + "' is not a decodable PNG");
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    if (w < 1 || h < 1 || w > static_cast<png_uint_32>(kMaxDim) || h > static_cast<png_uint_32>(kMaxDim) ||
        static_cast<int64_t>(w) * h > kMaxSamples) {
        cleanup();
        throw io_error(path + ": image dimensions out of range");
    }
    if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
        cleanup();
        throw io_error(path + ": unsupported PNG layout");
    }

    // Buffers are fully constructed between the regions; the pixel region
    // below only writes through these pointers into heap storage.
    ImageRGB8 img;
    std::vector<png_bytep> rows;
    try {
        img = ImageRGB8(static_cast<int>(w), static_cast<int>(h));
        rows.resize(h);
        for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.pixels.data() + static_cast<size_t>(y) * w * 3;
    } catch (...) {
        cleanup();
        throw;
    }

    if (setjmp(png_jmpbuf(png))) {
        cleanup();
        throw io_error("'" + path + "' is truncated or corrupt");
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    cleanup();
    return img;
}

void write_png(const std::string& path, const ImageRGB8& img) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_png: empty image");
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw std::invalid_argument("write_png: pixel buffer does not match dimensions");

    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw io_error("cannot open '" + path + "' for writing");

    std::vector<png_bytep> rows(static_cast<size_t>(img.height));

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw io_error("libpng initialization failed");
    }

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw io_error("PNG encode failed for '" + path + "'");
    }

    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const uint8_t* base = img.pixels.data();
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(base + static_cast<size_t>(y) * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(fp) != 0) throw io_error("write failed on '" + path + "'");
}

namespace {

enum class Sniff { png, ppm, pgm };

Sniff sniff(const std::string& path) {
    static const uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "' for reading");
    uint8_t head[8] = {};
    in.read(reinterpret_cast<char*>(head), 8);
    size_t got = static_cast<size_t>(in.gcount());
    if (got >= 8 && std::memcmp(head, png_sig, 8) == 0) return Sniff::png;
    if (got >= 2 && head[0] == 'P' && head[1] == '6') return Sniff::ppm;
    if (got >= 2 && head[0] == 'P' && head[1] == '5') return Sniff::pgm;
    throw io_error("'" + path + "' is not a PNG, PPM, or PGM file");
}

} // namespace

ImageRGB8 read_image_rgb(const std::string& path) {
    switch (sniff(path)) {
    case Sniff::png:
        return read_png(path);
    case Sniff::ppm:
        return read_ppm(path);
    case Sniff::pgm: {
        GrayImage g = read_pgm(path);
        ImageRGB8 img(g.width, g.height);
        for (size_t i = 0; i < g.pixels.size(); ++i) {
            // widen through maxval so 16-bit depth maps keep full contrast
            uint8_t v = static_cast<uint8_t>((static_cast<uint32_t>(g.pixels[i]) * 255 + g.maxval / 2) / g.maxval);
            img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = v;
        }
        return img;
    }
    }
    throw io_error("unreachable");
}

GrayImage read_image_gray(const std::string& path) {
    if (sniff(path) == Sniff::pgm) return read_pgm(path);
    ImageRGB8 img = read_image_rgb(path);
    GrayImage g(img.width, img.height, 255);
    for (size_t i = 0; i < g.pixels.size(); ++i) {
        uint8_t r = img.pixels[3 * i], gg = img.pixels[3 * i + 1], b = img.pixels[3 * i + 2];
        if (r != gg || gg != b)
            throw config_error("'" + path + "': single-channel input required, found unequal RGB channels");
        g.pixels[i] = r;
    }
    return g;
}

Tensor to_unit_tensor(const GrayImage& img) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("to_unit_tensor: empty image");
    Tensor t({1, 1, img.height, img.width});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(img.pixels[static_cast<size_t>(i)]) / img.maxval;
    return t;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

const std::string* Config::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

std::string Config::get_string(const std::string& key) const { return require_value(*this, key); }

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v ? *v : fallback;
}

int64_t Config::get_int(const std::string& key) const { return parse_int_value(key, require_value(*this, key)); }

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
    const std::string* v = find(key);
    return v ? parse_int_value(key, *v) : fallback;
}

double Config::get_double(const std::string& key) const { return parse_double_value(key, require_value(*this, key)); }

double Config::get_double(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    return v ? parse_double_value(key, *v) : fallback;
}

bool Config::get_bool(const std::string& key) const { return parse_bool_value(key, require_value(*this, key)); }

bool Config::get_bool(const std::string& key, bool fallback) const {
    const std::string* v = find(key);
    return v ? parse_bool_value(key, *v) : fallback;
}

Config parse_config(const std::string& text) {
    Config cfg;
    int line_no = 0;
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(line_no) + ": expected key=value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!valid_key(key)) throw config_error("config line " + std::to_string(line_no) + ": invalid key '" + key + "'");
        if (cfg.has(key))
            throw config_error("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        cfg.entries.emplace_back(std::move(key), std::move(value));
    }
    return cfg;
}

Config read_config(const std::string& path) { return parse_config(read_text_file(path)); }

std::string format_config(const Config& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg.entries) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (e.name.empty() || e.name.size() > kCkptMaxName)
            throw std::invalid_argument("checkpoint entry name must be 1..255 bytes");
        if (!seen.insert(e.name).second) throw std::invalid_argument("duplicate checkpoint entry '" + e.name + "'");
        if (e.tensor.ndim() > static_cast<int>(kCkptMaxRank))
            throw std::invalid_argument("checkpoint tensor rank exceeds " + std::to_string(kCkptMaxRank));
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), kCkptMagic, kCkptMagic + 8);
    put_u32(out, kCkptVersion);
    put_u32(out, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put_u32(out, static_cast<uint32_t>(e.tensor.ndim()));
        for (int d : e.tensor.shape()) put_u32(out, static_cast<uint32_t>(d));
        put_u64(out, static_cast<uint64_t>(e.tensor.numel()));
        for (int64_t i = 0; i < e.tensor.numel(); ++i) put_u64(out, std::bit_cast<uint64_t>(e.tensor[i]));
    }
    write_binary_file(path, out);
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
    std::vector<uint8_t> buf = read_binary_file(path);
    CkptReader r{buf, 0, path};

    r.need(8, "magic");
    if (std::memcmp(buf.data(), kCkptMagic, 8) != 0) r.fail("not a checkpoint file (bad magic)");
    r.pos = 8;
    uint32_t version = r.u32("version");
    if (version != kCkptVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    uint32_t count = r.u32("entry count");

    std::vector<NamedTensor> entries;
    std::set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32("name length");
        if (name_len < 1 || name_len > kCkptMaxName) r.fail("entry name length out of range");
        r.need(name_len, "name");
        std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), name_len);
        r.pos += name_len;
        if (!seen.insert(name).second) r.fail("duplicate entry '" + name + "'");

        uint32_t rank = r.u32("rank");
        if (rank > kCkptMaxRank) r.fail("tensor rank out of range");
        std::vector<int> shape(rank);
        int64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint32_t ext = r.u32("dimension");
            if (ext < 1 || ext > static_cast<uint32_t>(kMaxSamples)) r.fail("tensor dimension out of range");
            shape[d] = static_cast<int>(ext);
            numel *= ext;
            if (numel > kMaxSamples) r.fail("tensor too large");
        }
        uint64_t stored = r.u64("element count");
        if (stored != static_cast<uint64_t>(numel)) r.fail("element count does not match shape");

        std::vector<double> data(static_cast<size_t>(numel));
        for (int64_t k = 0; k < numel; ++k) data[static_cast<size_t>(k)] = std::bit_cast<double>(r.u64("payload"));
        entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (r.pos != buf.size()) r.fail("trailing bytes after last entry");
    return entries;
}

} // namespace toposeg::io
