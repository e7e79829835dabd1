#include "agecycle/image_io.hpp"

#include <cstdio>
#include <cstring>

#include <opencv2/imgcodecs.hpp>

#include "agecycle/errors.hpp"

namespace agecycle {

cv::Mat image_to_mat(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw InvalidInput("image_to_mat: expected [3, H, W] tensor");
  }
  auto hwc = ((image.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5)
                 .round()
                 .to(torch::kUInt8)
                 .flip({0})  // RGB -> BGR
                 .permute({1, 2, 0})
                 .contiguous();
  const int h = static_cast<int>(hwc.size(0));
  const int w = static_cast<int>(hwc.size(1));
  cv::Mat mat(h, w, CV_8UC3);
  std::memcpy(mat.data, hwc.data_ptr<std::uint8_t>(), static_cast<std::size_t>(h) * w * 3);
  return mat;
}

torch::Tensor mat_to_image(const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3) {
    throw InvalidInput("mat_to_image: expected 8-bit 3-channel raster");
  }
  cv::Mat contiguous = bgr.isContinuous() ? bgr : bgr.clone();
  auto hwc = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3},
                              torch::kUInt8)
                 .clone();
  return hwc.permute({2, 0, 1}).flip({0}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

cv::Mat mask_to_mat(const torch::Tensor& mask) {
  if (mask.dim() != 2) {
    throw InvalidInput("mask_to_mat: expected [H, W] tensor");
  }
  auto q = (mask.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
               .round()
               .to(torch::kUInt8)
               .contiguous();
  cv::Mat mat(static_cast<int>(q.size(0)), static_cast<int>(q.size(1)), CV_8UC1);
  std::memcpy(mat.data, q.data_ptr<std::uint8_t>(), q.numel());
  return mat;
}

void write_png(const std::filesystem::path& path, const cv::Mat& mat) {
  const auto bytes = encode_png(mat);
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (f == nullptr) {
    throw IoError("cannot open for writing: " + path.string());
  }
  const std::size_t written = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (written != bytes.size()) {
    throw IoError("short write: " + path.string());
  }
}

std::vector<std::uint8_t> encode_png(const cv::Mat& mat) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", mat, out)) {
    throw IoError("PNG encoding failed");
  }
  return out;
}

}  // namespace agecycle
