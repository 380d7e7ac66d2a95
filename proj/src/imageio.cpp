#include "dehaze/imageio.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>

namespace dehaze {

namespace {

struct PngImageGuard {
    png_image img{};
    ~PngImageGuard() { png_image_free(&img); }
};

std::string lower_ext(const std::string& path) {
    const auto dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext;
}

}  // namespace

RawImage read_png(const std::string& path) {
    PngImageGuard g;
    g.img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&g.img, path.c_str()))
        throw ParamError("read_png: cannot read " + path + ": " + g.img.message);
    g.img.format = PNG_FORMAT_RGB;
    RawImage out;
    out.width = g.img.width;
    out.height = g.img.height;
    out.pixels.resize(static_cast<std::size_t>(out.width * out.height * 3));
    if (!png_image_finish_read(&g.img, nullptr, out.pixels.data(), 0, nullptr))
        throw ParamError("read_png: decode failed for " + path + ": " + g.img.message);
    return out;
}

void write_png(const std::string& path, const RawImage& img) {
    PngImageGuard g;
    g.img.version = PNG_IMAGE_VERSION;
    g.img.width = static_cast<png_uint_32>(img.width);
    g.img.height = static_cast<png_uint_32>(img.height);
    g.img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&g.img, path.c_str(), 0, img.pixels.data(), 0, nullptr))
        throw ParamError("write_png: cannot write " + path + ": " + g.img.message);
}

RawImage16 read_png_gray16(const std::string& path) {
    PngImageGuard g;
    g.img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&g.img, path.c_str()))
        throw ParamError("read_png_gray16: cannot read " + path + ": " + g.img.message);
    g.img.format = PNG_FORMAT_LINEAR_Y;
    RawImage16 out;
    out.width = g.img.width;
    out.height = g.img.height;
    out.pixels.resize(static_cast<std::size_t>(out.width * out.height));
    if (!png_image_finish_read(&g.img, nullptr, out.pixels.data(), 0, nullptr))
        throw ParamError("read_png_gray16: decode failed for " + path + ": " +
                         g.img.message);
    return out;
}

void write_png_gray16(const std::string& path, const RawImage16& img) {
    PngImageGuard g;
    g.img.version = PNG_IMAGE_VERSION;
    g.img.width = static_cast<png_uint_32>(img.width);
    g.img.height = static_cast<png_uint_32>(img.height);
    g.img.format = PNG_FORMAT_LINEAR_Y;
    if (!png_image_write_to_file(&g.img, path.c_str(), 0, img.pixels.data(), 0, nullptr))
        throw ParamError("write_png_gray16: cannot write " + path + ": " +
                         g.img.message);
}

RawImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParamError("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ParamError("read_ppm: " + path + " is not binary P6");
    auto next_int = [&in, &path]() {
        // skip whitespace and '#' comments
        int c = in.peek();
        while (c != EOF && (std::isspace(c) || c == '#')) {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else {
                in.get();
            }
            c = in.peek();
        }
        std::int64_t v = -1;
        in >> v;
        if (!in || v < 0) throw ParamError("read_ppm: malformed header in " + path);
        return v;
    };
    RawImage out;
    out.width = next_int();
    out.height = next_int();
    const std::int64_t maxval = next_int();
    if (maxval != 255) throw ParamError("read_ppm: only maxval 255 supported");
    in.get();  // single whitespace after maxval
    out.pixels.resize(static_cast<std::size_t>(out.width * out.height * 3));
    in.read(reinterpret_cast<char*>(out.pixels.data()),
            static_cast<std::streamsize>(out.pixels.size()));
    if (!in) throw ParamError("read_ppm: truncated pixel data in " + path);
    return out;
}

void write_ppm(const std::string& path, const RawImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParamError("write_ppm: cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw ParamError("write_ppm: write failed for " + path);
}

RawImage read_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == "ppm") return read_ppm(path);
    if (ext == "png") return read_png(path);
    throw ParamError("read_image: unsupported extension in " + path);
}

void write_image(const std::string& path, const RawImage& img) {
    const std::string ext = lower_ext(path);
    if (ext == "ppm") return write_ppm(path, img);
    if (ext == "png") return write_png(path, img);
    throw ParamError("write_image: unsupported extension in " + path);
}

}  // namespace dehaze
