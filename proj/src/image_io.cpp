#include "camrank/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

namespace camrank::io {
namespace {

cv::Mat read_checked(const std::filesystem::path& path, int flags) {
  if (!std::filesystem::exists(path)) {
    throw ValidationError("missing file: " + path.string());
  }
  cv::Mat mat = cv::imread(path.string(), flags);
  if (mat.empty()) {
    throw ValidationError("cannot decode image: " + path.string());
  }
  return mat;
}

void write_checked(const std::filesystem::path& path, const cv::Mat& mat) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("cannot write image: " + path.string());
  }
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

GridT<std::uint8_t> read_gray8(const std::filesystem::path& path) {
  cv::Mat mat = read_checked(path, cv::IMREAD_UNCHANGED);
  if (mat.channels() != 1) {
    cv::Mat gray = read_checked(path, cv::IMREAD_GRAYSCALE);
    mat = gray;
  }
  if (mat.depth() != CV_8U) {
    throw ValidationError("expected an 8-bit image: " + path.string());
  }
  GridT<std::uint8_t> out(mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<std::uint8_t>(y);
    std::copy(row, row + mat.cols, &out(y, 0));
  }
  return out;
}

void write_gray8(const std::filesystem::path& path, const GridT<std::uint8_t>& grid) {
  cv::Mat mat(static_cast<int>(grid.rows()), static_cast<int>(grid.cols()), CV_8UC1);
  for (int y = 0; y < mat.rows; ++y) {
    std::copy(&grid(y, 0), &grid(y, 0) + mat.cols, mat.ptr<std::uint8_t>(y));
  }
  write_checked(path, mat);
}

Grid read_unit_map(const std::filesystem::path& path) {
  return read_gray8(path).cast<double>() / 255.0;
}

void write_unit_map(const std::filesystem::path& path, const Grid& map) {
  GridT<std::uint8_t> bytes(map.rows(), map.cols());
  for (Eigen::Index i = 0; i < map.size(); ++i) bytes.data()[i] = to_byte(map.data()[i]);
  write_gray8(path, bytes);
}

Tensor read_rgb(const std::filesystem::path& path) {
  cv::Mat mat = read_checked(path, cv::IMREAD_COLOR);
  Tensor out(3, mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < mat.cols; ++x) {
      // OpenCV stores BGR.
      for (int c = 0; c < 3; ++c) out.plane(c)(y, x) = row[x][2 - c] / 255.0;
    }
  }
  return out;
}

void write_rgb(const std::filesystem::path& path, const Tensor& image) {
  if (image.channels != 3) throw ValidationError("write_rgb expects 3 channels");
  cv::Mat mat(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = to_byte(image.plane(c)(y, x));
    }
  }
  write_checked(path, mat);
}

}  // namespace camrank::io
