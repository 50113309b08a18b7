#include "udaseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "udaseg/errors.hpp"

namespace udaseg {

using nlohmann::json;

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt, int ignore_id) {
  if (pred.h != gt.h || pred.w != gt.w) throw DataError("accumulate: size mismatch");
  for (size_t i = 0; i < gt.ids.size(); ++i) {
    const int g = gt.ids[i];
    const int p = pred.ids[i];
    if (g == ignore_id) {
      ++cm.ignored;
      continue;
    }
    if (p == ignore_id || p >= cm.num_classes)
      throw DataError("accumulate: prediction contains invalid class " + std::to_string(p));
    if (g >= cm.num_classes)
      throw DataError("accumulate: ground truth contains invalid class " + std::to_string(g));
    ++cm.at(g, p);
  }
}

EvalReport iou(const ConfusionMatrix& cm) {
  EvalReport r;
  const int C = cm.num_classes;
  r.per_class_iou.assign(static_cast<size_t>(C), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < C; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < C; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::int64_t denom = row + col - cm.at(c, c);
    if (denom == 0) continue;  // absent from gt and pred: undefined, excluded
    const double v = static_cast<double>(cm.at(c, c)) / static_cast<double>(denom);
    r.per_class_iou[static_cast<size_t>(c)] = v;
    sum += v;
    ++defined;
  }
  r.miou = defined > 0 ? sum / defined : 0.0;
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string fmt_signed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.4f", v);
  return buf;
}

void draw_bar_plot(const std::vector<NamedReport>& reports, const std::string& path) {
  const int n_reports = static_cast<int>(reports.size());
  const int n_classes = static_cast<int>(reports.front().report.per_class_iou.size());
  const int bar_w = 14, group_gap = 10, margin = 40;
  const int width = margin * 2 + n_classes * (n_reports * bar_w + group_gap);
  const int height = 320;
  const int plot_h = height - 2 * margin;

  cv::Mat img(height, std::max(width, 320), CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Scalar palette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                                {189, 103, 148}, {75, 86, 140}};
  cv::line(img, {margin, height - margin}, {img.cols - margin / 2, height - margin},
           {0, 0, 0});
  cv::line(img, {margin, margin / 2}, {margin, height - margin}, {0, 0, 0});

  for (int c = 0; c < n_classes; ++c) {
    const int gx = margin + c * (n_reports * bar_w + group_gap);
    for (int rix = 0; rix < n_reports; ++rix) {
      const double v = reports[static_cast<size_t>(rix)].report.per_class_iou[static_cast<size_t>(c)];
      if (std::isnan(v)) continue;
      const int bh = static_cast<int>(v * plot_h);
      cv::rectangle(img, {gx + rix * bar_w, height - margin - bh},
                    {gx + (rix + 1) * bar_w - 2, height - margin},
                    palette[rix % 6], cv::FILLED);
    }
    if (!reports.front().class_names.empty()) {
      cv::putText(img, reports.front().class_names[static_cast<size_t>(c)],
                  {gx, height - margin + 16}, cv::FONT_HERSHEY_PLAIN, 0.8, {0, 0, 0});
    }
  }
  for (int rix = 0; rix < n_reports; ++rix) {
    cv::rectangle(img, {margin + rix * 130, 6}, {margin + rix * 130 + 12, 18},
                  palette[rix % 6], cv::FILLED);
    cv::putText(img, reports[static_cast<size_t>(rix)].name, {margin + rix * 130 + 16, 17},
                cv::FONT_HERSHEY_PLAIN, 0.9, {0, 0, 0});
  }
  if (!cv::imwrite(path, img)) throw DataError("render_report: cannot write '" + path + "'");
}

}  // namespace

void render_report(const std::vector<NamedReport>& reports, const std::string& baseline_name,
                   const std::filesystem::path& out_dir) {
  if (reports.empty()) throw ConfigError("render_report: need at least one report");
  std::filesystem::create_directories(out_dir);

  const NamedReport* baseline = nullptr;
  for (const auto& r : reports)
    if (r.name == baseline_name) baseline = &r;
  const bool with_delta = baseline != nullptr && reports.size() > 1;

  const auto& names = reports.front().class_names;
  const int C = static_cast<int>(reports.front().report.per_class_iou.size());

  std::ofstream txt(out_dir / "report.txt");
  txt << "Per-class IoU\n";
  txt << "class";
  for (const auto& r : reports) txt << '\t' << r.name;
  txt << '\n';
  for (int c = 0; c < C; ++c) {
    txt << (names.empty() ? std::to_string(c) : names[static_cast<size_t>(c)]);
    for (const auto& r : reports) {
      const double v = r.report.per_class_iou[static_cast<size_t>(c)];
      txt << '\t' << (std::isnan(v) ? std::string("-") : fmt(v));
    }
    txt << '\n';
  }
  txt << "\nSummary\n";
  txt << "name\tmiou";
  if (with_delta) txt << "\tdelta_vs_" << baseline_name;
  txt << '\n';
  for (const auto& r : reports) {
    txt << r.name << '\t' << fmt(r.report.miou);
    if (with_delta) txt << '\t' << fmt_signed(r.report.miou - baseline->report.miou);
    txt << '\n';
  }
  txt.close();

  json j;
  j["format_version"] = 1;
  if (with_delta) j["baseline"] = baseline_name;
  j["reports"] = json::array();
  for (const auto& r : reports) {
    json jr;
    jr["name"] = r.name;
    jr["miou"] = r.report.miou;
    jr["num_images"] = r.report.num_images;
    jr["per_class_iou"] = json::array();
    for (double v : r.report.per_class_iou)
      jr["per_class_iou"].push_back(std::isnan(v) ? json(nullptr) : json(v));
    if (with_delta) jr["delta"] = r.report.miou - baseline->report.miou;
    j["reports"].push_back(std::move(jr));
  }
  std::ofstream(out_dir / "report.json") << j.dump(2) << '\n';

  draw_bar_plot(reports, (out_dir / "per_class_iou.png").string());
}

}  // namespace udaseg
