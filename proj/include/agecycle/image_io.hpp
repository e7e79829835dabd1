#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace agecycle {

/// [3, H, W] in [-1, 1] -> 8-bit RGB (stored BGR for OpenCV), round((x + 1) * 127.5).
cv::Mat image_to_mat(const torch::Tensor& image);

/// 8-bit BGR raster -> [3, H, W] in [-1, 1].
torch::Tensor mat_to_image(const cv::Mat& bgr);

/// [H, W] mask in [0, 1] -> 8-bit grayscale, round(mask * 255).
cv::Mat mask_to_mat(const torch::Tensor& mask);

void write_png(const std::filesystem::path& path, const cv::Mat& mat);
std::vector<std::uint8_t> encode_png(const cv::Mat& mat);

}  // namespace agecycle
