#include "hnf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "hnf/errors.hpp"

namespace hnf {

namespace {

std::string lower_ext(const std::string& path) {
    const std::size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

Tensor from_bytes(const unsigned char* bytes, int64_t h, int64_t w, int64_t c) {
    Tensor out({h, w, c}, DType::F64);
    const int64_t n = h * w * c;
    for (int64_t i = 0; i < n; ++i) out.set(i, static_cast<double>(bytes[i]) / 255.0);
    return out;
}

Tensor decode_png(const std::string& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw UndecodableImage("cannot open png " + path + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw UndecodableImage("cannot decode png " + path + ": " + msg);
    }
    return from_bytes(buf.data(), image.height, image.width, color ? 3 : 1);
}

struct JpegGuard {
    jpeg_error_mgr pub{};
    std::jmp_buf jump{};
};

void jpeg_abort_exit(j_common_ptr cinfo) {
    std::longjmp(reinterpret_cast<JpegGuard*>(cinfo->err)->jump, 1);
}

void jpeg_silence(j_common_ptr, int) {}

Tensor decode_jpeg(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw UndecodableImage("cannot open jpeg " + path);
    jpeg_decompress_struct cinfo{};
    JpegGuard guard;
    cinfo.err = jpeg_std_error(&guard.pub);
    guard.pub.error_exit = jpeg_abort_exit;
    guard.pub.emit_message = jpeg_silence;
    if (setjmp(guard.jump)) {
        jpeg_destroy_decompress(&cinfo);
        std::fclose(f);
        throw UndecodableImage("cannot decode jpeg " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space =
        cinfo.jpeg_color_space == JCS_GRAYSCALE ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int64_t h = cinfo.output_height;
    const int64_t w = cinfo.output_width;
    const int64_t c = cinfo.output_components;
    std::vector<unsigned char> buf(static_cast<std::size_t>(h * w * c));
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * c;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    return from_bytes(buf.data(), h, w, c);
}

}  // namespace

Tensor decode_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == "png") return decode_png(path);
    if (ext == "jpg" || ext == "jpeg") return decode_jpeg(path);
    throw UndecodableImage("unsupported image extension for " + path);
}

void write_png(const std::string& path, const Tensor& image) {
    if (image.shape().size() != 3 || (image.dim(2) != 1 && image.dim(2) != 3))
        throw ShapeMismatch("write_png expects {h, w, 1|3}, got " + shape_str(image.shape()));
    const int64_t h = image.dim(0);
    const int64_t w = image.dim(1);
    const int64_t c = image.dim(2);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h * w * c));
    for (int64_t i = 0; i < h * w * c; ++i) {
        const double v = std::clamp(image.at(i), 0.0, 1.0);
        buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    png_image out{};
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(w);
    out.height = static_cast<png_uint_32>(h);
    out.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("cannot write png " + path + ": " + out.message);
}

Tensor convert_channels(const Tensor& image, int64_t channels) {
    if (image.shape().size() != 3)
        throw ShapeMismatch("convert_channels expects {h, w, c}, got " +
                            shape_str(image.shape()));
    const int64_t h = image.dim(0);
    const int64_t w = image.dim(1);
    const int64_t c = image.dim(2);
    if (c == channels) return image;
    Tensor out({h, w, channels}, image.dtype());
    if (c == 1) {
        for (int64_t p = 0; p < h * w; ++p)
            for (int64_t t = 0; t < channels; ++t) out.set(p * channels + t, image.at(p));
        return out;
    }
    if (channels == 1) {
        for (int64_t p = 0; p < h * w; ++p) {
            double acc = 0.0;
            for (int64_t t = 0; t < c; ++t) acc += image.at(p * c + t);
            out.set(p, acc / static_cast<double>(c));
        }
        return out;
    }
    throw ShapeMismatch("convert_channels cannot map " + std::to_string(c) + " planes to " +
                        std::to_string(channels));
}

}  // namespace hnf
