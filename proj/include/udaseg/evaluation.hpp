#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "udaseg/tensor.hpp"

namespace udaseg {

// Rows = ground truth, columns = prediction. Pixels whose ground truth equals
// ignore_id are counted in `ignored` and nowhere else.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;  // num_classes × num_classes, row-major
  std::int64_t ignored = 0;

  explicit ConfusionMatrix(int classes = 0)
      : num_classes(classes),
        counts(static_cast<size_t>(classes) * static_cast<size_t>(classes), 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[static_cast<size_t>(gt) * static_cast<size_t>(num_classes) +
                  static_cast<size_t>(pred)];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<size_t>(gt) * static_cast<size_t>(num_classes) +
                  static_cast<size_t>(pred)];
  }
};

struct EvalReport {
  std::vector<double> per_class_iou;  // NaN marks classes absent from gt and pred
  double miou = 0.0;                  // mean over defined classes
  int num_images = 0;

  bool defined(int c) const { return per_class_iou[static_cast<size_t>(c)] == per_class_iou[static_cast<size_t>(c)]; }
};

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt, int ignore_id);

EvalReport iou(const ConfusionMatrix& cm);

// Writes report.txt (per-class table + summary with a delta column versus the
// named baseline), report.json, and a per-class IoU bar plot PNG. Output bytes
// are deterministic for identical inputs.
struct NamedReport {
  std::string name;
  EvalReport report;
  std::vector<std::string> class_names;
};

void render_report(const std::vector<NamedReport>& reports, const std::string& baseline_name,
                   const std::filesystem::path& out_dir);

}  // namespace udaseg
