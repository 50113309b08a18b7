#include "udaseg/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "udaseg/errors.hpp"

namespace udaseg {

Image read_image_png(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("image: cannot decode '" + path + "'");
  Image out = make_image(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(y, x, 0) = row[x][2] / 255.0;
      out.at(y, x, 1) = row[x][1] / 255.0;
      out.at(y, x, 2) = row[x][0] / 255.0;
    }
  }
  return out;
}

void write_image_png(const std::string& path, const Image& img) {
  const int h = img.dim(0), w = img.dim(1);
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        row[x][2 - c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  if (!cv::imwrite(path, bgr)) throw DataError("image: cannot write '" + path + "'");
}

LabelMap read_label_png(const std::string& path) {
  cv::Mat gray = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DataError("label: cannot decode '" + path + "'");
  LabelMap out(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    const unsigned char* row = gray.ptr<unsigned char>(y);
    for (int x = 0; x < gray.cols; ++x) out.at(y, x) = row[x];
  }
  return out;
}

void write_label_png(const std::string& path, const LabelMap& label) {
  cv::Mat gray(label.h, label.w, CV_8UC1);
  for (int y = 0; y < label.h; ++y) {
    unsigned char* row = gray.ptr<unsigned char>(y);
    for (int x = 0; x < label.w; ++x) row[x] = label.at(y, x);
  }
  if (!cv::imwrite(path, gray)) throw DataError("label: cannot write '" + path + "'");
}

}  // namespace udaseg
