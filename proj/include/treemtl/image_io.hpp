#pragma once

// PNG/JPEG decoding through OpenCV. Kept apart from data.hpp so the core
// library does not need OpenCV.

#include <filesystem>
#include <span>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "treemtl/data.hpp"

namespace treemtl {

/// Reads an image as grayscale (1 channel) or RGB (3 channels), resizes it
/// to the target shape and scales to [0,1].
inline std::vector<float> decode_image(const std::filesystem::path& path, const ImageShape& shape) {
    if (shape.channels != 1 && shape.channels != 3) throw ConfigError("images must have 1 or 3 channels");
    cv::Mat img = cv::imread(path.string(), shape.channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (img.empty()) throw LoadError("cannot decode image " + path.string());
    if (shape.channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    if (img.rows != static_cast<int>(shape.height) || img.cols != static_cast<int>(shape.width))
        cv::resize(img, img, cv::Size(static_cast<int>(shape.width), static_cast<int>(shape.height)), 0, 0, cv::INTER_AREA);
    cv::Mat f;
    img.convertTo(f, shape.channels == 1 ? CV_32FC1 : CV_32FC3, 1.0 / 255.0);
    std::vector<float> out(shape.height * shape.width * shape.channels);
    for (int y = 0; y < f.rows; ++y) {
        const float* row = f.ptr<float>(y);
        std::copy(row, row + f.cols * f.channels(), out.begin() + static_cast<std::ptrdiff_t>(y) * f.cols * f.channels());
    }
    return out;
}

/// Writes [0,1] HWC pixels as an 8-bit PNG (values clamped).
inline void write_png(const std::filesystem::path& path, std::span<const float> pixels, const ImageShape& shape) {
    const int type = shape.channels == 1 ? CV_8UC1 : CV_8UC3;
    cv::Mat img(static_cast<int>(shape.height), static_cast<int>(shape.width), type);
    for (std::size_t i = 0; i < pixels.size(); ++i)
        img.data[i] = static_cast<unsigned char>(std::clamp(pixels[i], 0.0f, 1.0f) * 255.0f + 0.5f);
    if (shape.channels == 3) cv::cvtColor(img, img, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), img)) throw IoError("cannot write image " + path.string());
}

template <class T>
ManifestDataset<T> load_manifest(const std::filesystem::path& path, ImageShape shape, Normalization norm = {}) {
    return load_manifest<T>(path, shape, std::move(norm), ImageDecoder(decode_image));
}

}  // namespace treemtl
