#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <zlib.h>

#include "helpers.hpp"
#include "mp/common.hpp"
#include "mp/png.hpp"

namespace {

// Minimal independent PNG assembler: zlib-compressed IDAT with a chosen
// filter byte per row, used to exercise the decoder's filter reconstruction
// against images our encoder would never produce.
std::vector<std::uint8_t> assemble_png(std::size_t w, std::size_t h, int channels,
                                       const std::vector<std::uint8_t>& raw,
                                       const std::vector<int>& row_filters) {
    const std::size_t stride = w * std::size_t(channels);
    std::vector<std::uint8_t> prev(stride, 0);
    std::vector<std::uint8_t> scan;
    for (std::size_t y = 0; y < h; ++y) {
        const std::uint8_t* row = raw.data() + y * stride;
        const int f = row_filters[y];
        scan.push_back(std::uint8_t(f));
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= std::size_t(channels) ? row[x - channels] : 0;
            const int b = prev[x];
            const int c = x >= std::size_t(channels) ? prev[x - channels] : 0;
            int pred = 0;
            switch (f) {
                case 0: pred = 0; break;
                case 1: pred = a; break;
                case 2: pred = b; break;
                case 3: pred = (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
            }
            scan.push_back(std::uint8_t((int(row[x]) - pred) & 0xFF));
        }
        std::memcpy(prev.data(), row, stride);
    }

    uLongf zcap = compressBound(uLong(scan.size()));
    std::vector<std::uint8_t> z(zcap);
    REQUIRE(compress2(z.data(), &zcap, scan.data(), uLong(scan.size()), 6) == Z_OK);
    z.resize(zcap);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    auto put_be32 = [&out](std::uint32_t v) {
        out.push_back(std::uint8_t(v >> 24));
        out.push_back(std::uint8_t(v >> 16));
        out.push_back(std::uint8_t(v >> 8));
        out.push_back(std::uint8_t(v));
    };
    auto put_chunk = [&](const char type[4], const std::vector<std::uint8_t>& data) {
        put_be32(std::uint32_t(data.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        const auto c =
            crc32(0, out.data() + start, uInt(out.size() - start));
        put_be32(std::uint32_t(c));
    };
    std::vector<std::uint8_t> ihdr;
    auto ih32 = [&ihdr](std::uint32_t v) {
        ihdr.push_back(std::uint8_t(v >> 24));
        ihdr.push_back(std::uint8_t(v >> 16));
        ihdr.push_back(std::uint8_t(v >> 8));
        ihdr.push_back(std::uint8_t(v));
    };
    ih32(std::uint32_t(w));
    ih32(std::uint32_t(h));
    ihdr.push_back(8);
    ihdr.push_back(channels == 1 ? 0 : (channels == 3 ? 2 : 6));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk("IHDR", ihdr);
    put_chunk("IDAT", z);
    put_chunk("IEND", {});
    return out;
}

}  // namespace

TEST_CASE("gray png round-trips bitwise", "[png]") {
    mp::Rng rng(991);
    for (auto [w, h] : {std::pair<std::size_t, std::size_t>{1, 1},
                        {7, 3},
                        {64, 64},
                        {113, 41}}) {
        std::vector<std::uint8_t> img(w * h);
        for (auto& p : img) p = std::uint8_t(rng.below(256));
        const auto bytes = mp::png::encode_gray8(w, h, img.data());
        const auto back = mp::png::decode_gray8(bytes);
        REQUIRE(back.w == w);
        REQUIRE(back.h == h);
        REQUIRE(back.gray == img);
    }
}

TEST_CASE("png encoding is deterministic and compresses runs", "[png]") {
    std::vector<std::uint8_t> img(96 * 96, 0);
    for (std::size_t i = 0; i < img.size(); i += 97) img[i] = std::uint8_t(i & 0xFF);
    const auto a = mp::png::encode_gray8(96, 96, img.data());
    const auto b = mp::png::encode_gray8(96, 96, img.data());
    REQUIRE(a == b);

    std::vector<std::uint8_t> flat(128 * 128, 37);
    const auto c = mp::png::encode_gray8(128, 128, flat.data());
    REQUIRE(c.size() < flat.size() / 4);
    const auto back = mp::png::decode_gray8(c);
    REQUIRE(back.gray == flat);
}

TEST_CASE("png decoder reconstructs every filter type", "[png]") {
    mp::Rng rng(17);
    const std::size_t w = 23, h = 10;
    std::vector<std::uint8_t> raw(w * h);
    for (auto& p : raw) p = std::uint8_t(rng.below(256));

    for (int f = 0; f <= 4; ++f) {
        const auto bytes = assemble_png(w, h, 1, raw, std::vector<int>(h, f));
        const auto img = mp::png::decode_gray8(bytes);
        REQUIRE(img.gray == raw);
    }
    // Mixed filters, one of each per image.
    const std::vector<int> mixed = {0, 1, 2, 3, 4, 4, 3, 2, 1, 0};
    const auto bytes = assemble_png(w, h, 1, raw, mixed);
    REQUIRE(mp::png::decode_gray8(bytes).gray == raw);
}

TEST_CASE("png decoder converts color to luma", "[png]") {
    const std::size_t w = 5, h = 2;
    std::vector<std::uint8_t> rgb(w * h * 3);
    mp::Rng rng(55);
    for (auto& p : rgb) p = std::uint8_t(rng.below(256));
    const auto bytes = assemble_png(w, h, 3, rgb, std::vector<int>(h, 0));
    const auto img = mp::png::decode_gray8(bytes);
    REQUIRE(img.w == w);
    for (std::size_t i = 0; i < w * h; ++i) {
        const int r = rgb[3 * i], g = rgb[3 * i + 1], b = rgb[3 * i + 2];
        REQUIRE(int(img.gray[i]) == ((77 * r + 150 * g + 29 * b + 128) >> 8));
    }

    std::vector<std::uint8_t> rgba(w * h * 4);
    for (auto& p : rgba) p = std::uint8_t(rng.below(256));
    const auto bytes4 = assemble_png(w, h, 4, rgba, std::vector<int>(h, 2));
    const auto img4 = mp::png::decode_gray8(bytes4);
    for (std::size_t i = 0; i < w * h; ++i) {
        const int r = rgba[4 * i], g = rgba[4 * i + 1], b = rgba[4 * i + 2];
        REQUIRE(int(img4.gray[i]) == ((77 * r + 150 * g + 29 * b + 128) >> 8));
    }
}

TEST_CASE("png decoder rejects damaged input", "[png]") {
    std::vector<std::uint8_t> img(16 * 16, 200);
    auto bytes = mp::png::encode_gray8(16, 16, img.data());

    auto bad_sig = bytes;
    bad_sig[1] = 'Q';
    REQUIRE_THROWS_AS(mp::png::decode_gray8(bad_sig), mp::IoError);

    auto bad_crc = bytes;
    bad_crc[bad_crc.size() - 16] ^= 0x40;
    REQUIRE_THROWS_AS(mp::png::decode_gray8(bad_crc), mp::IoError);

    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    REQUIRE_THROWS_AS(mp::png::decode_gray8(truncated), mp::IoError);

    REQUIRE_THROWS_AS(mp::png::decode_gray8({}), mp::IoError);

    // Palette images are out of scope and must be refused, not misread.
    mp::Rng rng(3);
    std::vector<std::uint8_t> raw(8 * 8);
    for (auto& p : raw) p = std::uint8_t(rng.below(256));
    auto pal = assemble_png(8, 8, 1, raw, std::vector<int>(8, 0));
    REQUIRE(pal[25] == 0);
    pal[25] = 3;
    // Re-stamp the IHDR checksum so only the color type is objectionable.
    const auto c = crc32(0, pal.data() + 12, 17);
    pal[29] = std::uint8_t(c >> 24);
    pal[30] = std::uint8_t(c >> 16);
    pal[31] = std::uint8_t(c >> 8);
    pal[32] = std::uint8_t(c);
    REQUIRE_THROWS_AS(mp::png::decode_gray8(pal), mp::IoError);
}

TEST_CASE("png files round-trip through disk", "[png]") {
    const auto dir = std::filesystem::temp_directory_path() / "mp_png_test";
    std::filesystem::create_directories(dir);
    std::vector<std::uint8_t> img(48 * 32);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::uint8_t((i * 7) & 0xFF);
    const auto path = dir / "roundtrip.png";
    mp::png::write_gray8(path, 48, 32, img.data());
    const auto back = mp::png::read_gray8(path);
    REQUIRE(back.w == 48);
    REQUIRE(back.h == 32);
    REQUIRE(back.gray == img);
    REQUIRE_THROWS_AS(mp::png::read_gray8(dir / "missing.png"), mp::IoError);
    std::filesystem::remove_all(dir);
}
