// Image file I/O: 8-bit RGB PNG and binary PPM (P6) for images, 16-bit
// grayscale PNG for depth maps. Byte-level codecs live in imageio.cpp;
// tensor conversion helpers are defined here.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

struct RawImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

struct RawImage16 {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<std::uint16_t> pixels;  // grayscale, row-major
};

RawImage read_png(const std::string& path);
void write_png(const std::string& path, const RawImage& img);
RawImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RawImage& img);
RawImage16 read_png_gray16(const std::string& path);
void write_png_gray16(const std::string& path, const RawImage16& img);

// Reads PNG or PPM depending on extension.
RawImage read_image(const std::string& path);
void write_image(const std::string& path, const RawImage& img);

template <typename T>
Tensor<T> to_tensor(const RawImage& img) {
    const std::int64_t H = img.height, W = img.width;
    Tensor<T> t(Shape{1, 3, H, W});
    for (std::int64_t i = 0; i < H * W; ++i)
        for (std::int64_t c = 0; c < 3; ++c)
            t[c * H * W + i] =
                static_cast<T>(img.pixels[static_cast<std::size_t>(i * 3 + c)]) /
                T(255);
    return t;
}

template <typename T>
RawImage from_tensor(const Tensor<T>& t) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
        throw ShapeError("from_tensor: expected (1,3,H,W), got " + shape_str(t.shape()));
    RawImage img;
    img.height = t.dim(2);
    img.width = t.dim(3);
    const std::int64_t M = img.height * img.width;
    img.pixels.resize(static_cast<std::size_t>(M * 3));
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            const double v = std::clamp(static_cast<double>(t[c * M + i]), 0.0, 1.0);
            img.pixels[static_cast<std::size_t>(i * 3 + c)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

template <typename T>
Tensor<T> depth_to_tensor(const RawImage16& img, double d_min, double d_max) {
    Tensor<T> t(Shape{1, 1, img.height, img.width});
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(d_min + (d_max - d_min) *
                                          static_cast<double>(
                                              img.pixels[static_cast<std::size_t>(i)]) /
                                          65535.0);
    return t;
}

template <typename T>
RawImage16 depth_from_tensor(const Tensor<T>& t, double d_min, double d_max) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
        throw ShapeError("depth_from_tensor: expected (1,1,H,W)");
    RawImage16 img;
    img.height = t.dim(2);
    img.width = t.dim(3);
    img.pixels.resize(static_cast<std::size_t>(t.numel()));
    const double range = d_max > d_min ? d_max - d_min : 1.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double v =
            std::clamp((static_cast<double>(t[i]) - d_min) / range, 0.0, 1.0);
        img.pixels[static_cast<std::size_t>(i)] =
            static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
    return img;
}

}  // namespace dehaze
