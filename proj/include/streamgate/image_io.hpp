#pragma once
/**
 * image_io.hpp
 *
 * PNG read/write through the libpng simplified API, baseline JPEG read/write
 * through libjpeg, and a small EXIF walker that only knows how to find
 * DateTimeOriginal (tag 0x9003 in the Exif sub-IFD).
 */

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "image.hpp"

namespace streamgate {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ImageFormat { Unknown, Png, Jpeg };

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageIoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ImageFormat sniff_format(const std::vector<std::uint8_t>& bytes) {
    static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return ImageFormat::Png;
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
        return ImageFormat::Jpeg;
    return ImageFormat::Unknown;
}

namespace detail {

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

inline void jpeg_silent(j_common_ptr, int) {}

// Returns false with `err.message` filled on failure. No C++ objects with
// non-trivial destructors live across the setjmp boundary.
inline bool decode_jpeg_raw(const std::uint8_t* data, std::size_t size, bool header_only,
                            Image& out, JpegErrorMgr& err) {
    jpeg_decompress_struct cinfo;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    err.base.emit_message = jpeg_silent;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
    jpeg_read_header(&cinfo, TRUE);
    const bool gray = cinfo.jpeg_color_space == JCS_GRAYSCALE;
    cinfo.out_color_space = gray ? JCS_GRAYSCALE : JCS_RGB;
    out.height = static_cast<int>(cinfo.image_height);
    out.width = static_cast<int>(cinfo.image_width);
    out.channels = gray ? 1 : 3;
    out.colorspace = ColorSpace::RGB;
    if (!header_only) {
        jpeg_start_decompress(&cinfo);
        const std::size_t stride = static_cast<std::size_t>(out.width) * out.channels;
        out.pixels.resize(stride * static_cast<std::size_t>(out.height));
        while (cinfo.output_scanline < cinfo.output_height) {
            JSAMPROW row = out.pixels.data() + stride * cinfo.output_scanline;
            jpeg_read_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_decompress(&cinfo);
    }
    jpeg_destroy_decompress(&cinfo);
    return true;
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes, bool header_only,
                        const std::string& name) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw ImageIoError(name + ": " + png.message);
    const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
    png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image img;
    img.height = static_cast<int>(png.height);
    img.width = static_cast<int>(png.width);
    img.channels = gray ? 1 : 3;
    if (header_only) {
        png_image_free(&png);
        return img;
    }
    img.pixels.resize(PNG_IMAGE_SIZE(png));
    // Background for flattening alpha; fully-opaque inputs are unaffected.
    png_color black{0, 0, 0};
    if (!png_image_finish_read(&png, &black, img.pixels.data(), 0, nullptr))
        throw ImageIoError(name + ": " + png.message);
    return img;
}

inline std::uint32_t read_u32(const std::uint8_t* p, bool le) {
    return le ? (std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                 std::uint32_t(p[3]) << 24)
              : (std::uint32_t(p[3]) | std::uint32_t(p[2]) << 8 | std::uint32_t(p[1]) << 16 |
                 std::uint32_t(p[0]) << 24);
}

inline std::uint16_t read_u16(const std::uint8_t* p, bool le) {
    return le ? std::uint16_t(p[0] | p[1] << 8) : std::uint16_t(p[1] | p[0] << 8);
}

// Searches one IFD for `tag`; returns the entry offset within `tiff`.
inline std::optional<std::size_t> find_ifd_entry(const std::uint8_t* tiff, std::size_t len,
                                                 std::size_t ifd, bool le, std::uint16_t tag) {
    if (ifd + 2 > len) return std::nullopt;
    const std::uint16_t n = read_u16(tiff + ifd, le);
    for (std::uint16_t i = 0; i < n; ++i) {
        const std::size_t e = ifd + 2 + 12u * i;
        if (e + 12 > len) return std::nullopt;
        if (read_u16(tiff + e, le) == tag) return e;
    }
    return std::nullopt;
}

inline std::optional<std::string> exif_datetime_from_tiff(const std::uint8_t* tiff,
                                                          std::size_t len) {
    if (len < 8) return std::nullopt;
    bool le;
    if (tiff[0] == 'I' && tiff[1] == 'I') le = true;
    else if (tiff[0] == 'M' && tiff[1] == 'M') le = false;
    else return std::nullopt;
    if (read_u16(tiff + 2, le) != 42) return std::nullopt;
    const std::size_t ifd0 = read_u32(tiff + 4, le);
    const auto ptr = find_ifd_entry(tiff, len, ifd0, le, 0x8769);
    if (!ptr) return std::nullopt;
    const std::size_t sub = read_u32(tiff + *ptr + 8, le);
    const auto dto = find_ifd_entry(tiff, len, sub, le, 0x9003);
    if (!dto) return std::nullopt;
    const std::uint32_t count = read_u32(tiff + *dto + 4, le);
    if (read_u16(tiff + *dto + 2, le) != 2 || count < 19) return std::nullopt;  // ASCII
    const std::size_t off = count <= 4 ? *dto + 8 : read_u32(tiff + *dto + 8, le);
    if (off + 19 > len) return std::nullopt;
    return std::string(reinterpret_cast<const char*>(tiff + off), 19);
}

}  // namespace detail

/// Decodes PNG or JPEG. Grayscale sources stay single-channel, alpha is
/// flattened onto black.
inline Image decode_image(const std::vector<std::uint8_t>& bytes, const std::string& name = "image",
                          bool header_only = false) {
    switch (sniff_format(bytes)) {
    case ImageFormat::Png:
        return detail::decode_png(bytes, header_only, name);
    case ImageFormat::Jpeg: {
        Image img;
        detail::JpegErrorMgr err{};
        if (!detail::decode_jpeg_raw(bytes.data(), bytes.size(), header_only, img, err))
            throw ImageIoError(name + ": " + err.message);
        return img;
    }
    case ImageFormat::Unknown:
        break;
    }
    throw ImageIoError(name + ": not a PNG or JPEG file");
}

inline Image read_image(const std::filesystem::path& path) {
    return decode_image(read_file_bytes(path), path.string());
}

/// Reads only enough of the file to know its dimensions.
inline Image probe_image(const std::filesystem::path& path) {
    return decode_image(read_file_bytes(path), path.string(), /*header_only=*/true);
}

/// Writes an RGB or gray image as PNG. YCrCb input is rejected.
inline void write_png(const std::filesystem::path& path, const Image& img) {
    img.validate();
    if (img.channels == 3 && img.colorspace != ColorSpace::RGB)
        throw ValidationError("write_png: convert to RGB first");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
        throw ImageIoError(path.string() + ": " + png.message);
}

/// DateTimeOriginal as the raw "YYYY:MM:DD HH:MM:SS" string, if present.
inline std::optional<std::string> exif_datetime_original(const std::vector<std::uint8_t>& bytes) {
    if (sniff_format(bytes) != ImageFormat::Jpeg) return std::nullopt;
    std::size_t pos = 2;
    while (pos + 4 <= bytes.size()) {
        if (bytes[pos] != 0xFF) return std::nullopt;
        const std::uint8_t marker = bytes[pos + 1];
        if (marker == 0xDA || marker == 0xD9) return std::nullopt;  // image data begins
        const std::size_t seg_len = std::size_t(bytes[pos + 2]) << 8 | bytes[pos + 3];
        if (seg_len < 2 || pos + 2 + seg_len > bytes.size()) return std::nullopt;
        const std::uint8_t* body = bytes.data() + pos + 4;
        const std::size_t body_len = seg_len - 2;
        if (marker == 0xE1 && body_len > 6 && std::memcmp(body, "Exif\0\0", 6) == 0)
            return detail::exif_datetime_from_tiff(body + 6, body_len - 6);
        pos += 2 + seg_len;
    }
    return std::nullopt;
}

namespace detail {

// Little-endian TIFF block: IFD0 -> Exif IFD -> DateTimeOriginal.
inline std::vector<std::uint8_t> make_exif_block(const std::string& datetime) {
    std::vector<std::uint8_t> b = {'E', 'x', 'i', 'f', 0, 0, 'I', 'I', 42, 0, 8, 0, 0, 0};
    auto u16 = [&](unsigned v) { b.push_back(v & 0xFF); b.push_back((v >> 8) & 0xFF); };
    auto u32 = [&](unsigned v) { u16(v & 0xFFFF); u16(v >> 16); };
    // IFD0 at 8: one entry, ExifIFDPointer -> 26
    u16(1); u16(0x8769); u16(4); u32(1); u32(26); u32(0);
    // Exif IFD at 26: one entry, DateTimeOriginal -> 44
    u16(1); u16(0x9003); u16(2); u32(20); u32(44); u32(0);
    for (char c : datetime.substr(0, 19)) b.push_back(static_cast<std::uint8_t>(c));
    b.push_back(0);
    return b;
}

}  // namespace detail

/// Baseline JPEG writer, optionally embedding a DateTimeOriginal tag.
inline void write_jpeg(const std::filesystem::path& path, const Image& img, int quality = 92,
                       const std::optional<std::string>& exif_datetime = std::nullopt) {
    img.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::vector<std::uint8_t> exif;
    if (exif_datetime) exif = detail::make_exif_block(*exif_datetime);

    unsigned char* buffer = nullptr;
    unsigned long buffer_len = 0;
    detail::JpegErrorMgr err{};
    jpeg_compress_struct cinfo;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = detail::jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::free(buffer);
        throw ImageIoError(path.string() + ": jpeg encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buffer, &buffer_len);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = img.channels;
    cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    if (!exif.empty())
        jpeg_write_marker(&cinfo, JPEG_APP0 + 1, exif.data(), static_cast<unsigned>(exif.size()));
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    while (cinfo.next_scanline < cinfo.image_height) {
        auto* row = const_cast<JSAMPROW>(img.pixels.data() + stride * cinfo.next_scanline);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);

    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(buffer), static_cast<std::streamsize>(buffer_len));
    std::free(buffer);
    if (!out) throw ImageIoError("cannot write " + path.string());
}

}  // namespace streamgate
