#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mp/common.hpp"

namespace mp::png {

struct Image {
    std::size_t w = 0;
    std::size_t h = 0;
    std::vector<std::uint8_t> gray;
};

namespace detail {

// DEFLATE bitstreams fill bytes LSB-first, but Huffman codes enter the
// stream starting from their most significant bit.
class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void bits_lsb(std::uint32_t v, int n) {
        for (int i = 0; i < n; ++i) push((v >> i) & 1u);
    }

    void huff(std::uint32_t code, int n) {
        for (int i = n - 1; i >= 0; --i) push((code >> i) & 1u);
    }

    void align() {
        while (nbits_ != 0) push(0);
    }

private:
    void push(std::uint32_t bit) {
        cur_ |= bit << nbits_;
        if (++nbits_ == 8) {
            out_.push_back(std::uint8_t(cur_));
            cur_ = 0;
            nbits_ = 0;
        }
    }

    std::vector<std::uint8_t>& out_;
    std::uint32_t cur_ = 0;
    int nbits_ = 0;
};

inline void put_literal(BitWriter& bw, unsigned v) {
    if (v < 144)
        bw.huff(0x30 + v, 8);
    else
        bw.huff(0x190 + (v - 144), 9);
}

inline void put_lenlit(BitWriter& bw, unsigned code) {
    if (code < 280)
        bw.huff(code - 256, 7);
    else
        bw.huff(0xC0 + (code - 280), 8);
}

struct LenCode {
    unsigned code;
    unsigned base;
    int extra;
};

inline LenCode length_code(unsigned len) {
    static constexpr LenCode table[] = {
        {257, 3, 0},   {258, 4, 0},   {259, 5, 0},   {260, 6, 0},   {261, 7, 0},
        {262, 8, 0},   {263, 9, 0},   {264, 10, 0},  {265, 11, 1},  {266, 13, 1},
        {267, 15, 1},  {268, 17, 1},  {269, 19, 2},  {270, 23, 2},  {271, 27, 2},
        {272, 31, 2},  {273, 35, 3},  {274, 43, 3},  {275, 51, 3},  {276, 59, 3},
        {277, 67, 4},  {278, 83, 4},  {279, 99, 4},  {280, 115, 4}, {281, 131, 5},
        {282, 163, 5}, {283, 195, 5}, {284, 227, 5}, {285, 258, 0},
    };
    for (std::size_t i = sizeof(table) / sizeof(table[0]); i-- > 0;)
        if (len >= table[i].base) return table[i];
    return table[0];
}

// Fixed-Huffman DEFLATE with distance-1 matches only. Output bytes depend
// on nothing but the input, which keeps rendered frames identical across
// platforms and zlib versions.
inline std::vector<std::uint8_t> deflate_fixed_rle(const std::vector<std::uint8_t>& raw) {
    std::vector<std::uint8_t> out;
    out.reserve(raw.size() + raw.size() / 8 + 16);
    BitWriter bw(out);
    bw.bits_lsb(1, 1);  // final block
    bw.bits_lsb(1, 2);  // fixed Huffman
    std::size_t i = 0;
    while (i < raw.size()) {
        std::size_t run = 0;
        if (i > 0) {
            const std::uint8_t prev = raw[i - 1];
            while (i + run < raw.size() && run < 258 && raw[i + run] == prev) ++run;
        }
        if (run >= 3) {
            const LenCode lc = length_code(unsigned(run));
            put_lenlit(bw, lc.code);
            if (lc.extra > 0) bw.bits_lsb(unsigned(run) - lc.base, lc.extra);
            bw.huff(0, 5);  // distance 1
            i += run;
        } else {
            put_literal(bw, raw[i]);
            ++i;
        }
    }
    put_lenlit(bw, 256);
    bw.align();
    return out;
}

inline std::vector<std::uint8_t> zlib_wrap(const std::vector<std::uint8_t>& raw) {
    std::vector<std::uint8_t> out;
    out.push_back(0x78);
    out.push_back(0x01);
    const auto body = deflate_fixed_rle(raw);
    out.insert(out.end(), body.begin(), body.end());
    const auto a = std::uint32_t(adler32(adler32(0, nullptr, 0), raw.data(), uInt(raw.size())));
    for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(a >> s));
    return out;
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(v >> s));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
    put_be32(out, std::uint32_t(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto c =
        std::uint32_t(crc32(crc32(0, nullptr, 0), out.data() + start, uInt(4 + data.size())));
    put_be32(out, c);
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& in,
                                              std::size_t expected) {
    std::vector<std::uint8_t> out(expected);
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit(&zs) != Z_OK) throw IoError("png: inflateInit failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = uInt(in.size());
    zs.next_out = out.data();
    zs.avail_out = uInt(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    const std::size_t produced = out.size() - zs.avail_out;
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || produced != expected)
        throw IoError("png: corrupt or truncated compressed data");
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_gray8(std::size_t w, std::size_t h,
                                              const std::uint8_t* data) {
    MP_REQUIRE(w > 0 && h > 0, "png: empty image");
    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};

    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, std::uint32_t(w));
    detail::put_be32(ihdr, std::uint32_t(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::put_chunk(out, "IHDR", ihdr);

    std::vector<std::uint8_t> scan;
    scan.reserve(h * (w + 1));
    for (std::size_t y = 0; y < h; ++y) {
        scan.push_back(0);  // filter: none
        scan.insert(scan.end(), data + y * w, data + (y + 1) * w);
    }
    detail::put_chunk(out, "IDAT", detail::zlib_wrap(scan));
    detail::put_chunk(out, "IEND", {});
    return out;
}

inline void write_gray8(const std::filesystem::path& path, std::size_t w, std::size_t h,
                        const std::uint8_t* data) {
    const auto bytes = encode_gray8(w, h, data);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

// Reads 8-bit grayscale, RGB, or RGBA PNGs (color collapsed to luma);
// palette, 16-bit, and interlaced files are rejected.
inline Image decode_gray8(const std::vector<std::uint8_t>& bytes) {
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("png: bad signature");

    std::size_t w = 0, h = 0, channels = 0;
    bool have_ihdr = false;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = detail::get_be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        const auto stored_crc = detail::get_be32(payload + len);
        const auto actual_crc =
            std::uint32_t(crc32(crc32(0, nullptr, 0), bytes.data() + pos + 4, uInt(4 + len)));
        if (stored_crc != actual_crc) throw IoError("png: chunk crc mismatch");

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw IoError("png: bad IHDR length");
            w = detail::get_be32(payload);
            h = detail::get_be32(payload + 4);
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8) throw IoError("png: only 8-bit depth supported");
            if (interlace != 0) throw IoError("png: interlaced files not supported");
            if (color == 0)
                channels = 1;
            else if (color == 2)
                channels = 3;
            else if (color == 6)
                channels = 4;
            else
                throw IoError("png: unsupported color type " + std::to_string(color));
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!have_ihdr || w == 0 || h == 0) throw IoError("png: missing or empty IHDR");
    if (idat.empty()) throw IoError("png: no image data");

    const std::size_t stride = w * channels;
    const auto raw = detail::zlib_inflate(idat, h * (stride + 1));

    std::vector<std::uint8_t> pix(h * stride);
    for (std::size_t y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = pix.data() + y * stride;
        const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= channels ? dst[x - channels] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= channels) ? up[x - channels] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw IoError("png: bad filter byte");
            }
            dst[x] = std::uint8_t(v & 0xFF);
        }
    }

    Image img;
    img.w = w;
    img.h = h;
    img.gray.resize(w * h);
    if (channels == 1) {
        img.gray = std::move(pix);
    } else {
        for (std::size_t i = 0; i < w * h; ++i) {
            const std::uint8_t* p = pix.data() + i * channels;
            img.gray[i] = std::uint8_t((77 * p[0] + 150 * p[1] + 29 * p[2] + 128) >> 8);
        }
    }
    return img;
}

inline Image read_gray8(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    try {
        return decode_gray8(bytes);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace mp::png
