#include "udaseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

#include "udaseg/errors.hpp"
#include "udaseg/image_io.hpp"

namespace udaseg {

namespace fs = std::filesystem;
using nlohmann::json;

Dataset Dataset::from_directory(const fs::path& split_dir, DomainTag domain,
                                const ClassTaxonomy& taxonomy) {
  Dataset ds;
  ds.domain_ = domain;
  ds.taxonomy_ = std::make_shared<ClassTaxonomy>(taxonomy);

  const fs::path images = split_dir / "images";
  const fs::path labels = split_dir / "labels";
  if (!fs::is_directory(images))
    throw DataError("dataset: missing images directory '" + images.string() + "'");
  ds.labeled_ = fs::is_directory(labels) && !fs::is_empty(labels);

  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".png") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());  // lexicographic order for determinism
  if (ids.empty()) throw DataError("dataset: no .png images under '" + images.string() + "'");

  for (const auto& id : ids) {
    Entry e;
    e.id = id;
    e.image_path = images / (id + ".png");
    if (ds.labeled_) {
      e.label_path = labels / (id + ".png");
      if (!fs::exists(e.label_path))
        throw DataError("dataset: missing label for '" + id + "' in labeled split '" +
                        split_dir.string() + "'");
    }
    ds.entries_.push_back(std::move(e));
  }
  return ds;
}

Dataset Dataset::in_memory(std::vector<SegSample> samples, DomainTag domain,
                           const ClassTaxonomy& taxonomy) {
  Dataset ds;
  ds.domain_ = domain;
  ds.taxonomy_ = std::make_shared<ClassTaxonomy>(taxonomy);
  ds.labeled_ = true;
  for (auto& s : samples) {
    Entry e;
    e.id = s.id;
    e.inline_sample = std::make_shared<const SegSample>(std::move(s));
    ds.entries_.push_back(std::move(e));
  }
  std::sort(ds.entries_.begin(), ds.entries_.end(),
            [](const Entry& a, const Entry& b) { return a.id < b.id; });
  return ds;
}

Image Dataset::image(int i) const {
  const Entry& e = entries_[static_cast<size_t>(i)];
  if (e.inline_sample) return e.inline_sample->image;
  return read_image_png(e.image_path.string());
}

LabelMap Dataset::validated_label(const Entry& e, int h, int w) const {
  LabelMap lab;
  if (e.inline_sample) {
    lab = e.inline_sample->label;
  } else if (!e.label_path.empty()) {
    lab = read_label_png(e.label_path.string());
  } else {
    return LabelMap(h, w, static_cast<std::uint8_t>(taxonomy_->ignore_id()));
  }
  if (lab.h != h || lab.w != w)
    throw DataError("dataset: image/label size mismatch for '" + e.id + "'");
  const int C = taxonomy_->num_classes();
  const int ignore = taxonomy_->ignore_id();
  for (auto v : lab.ids) {
    const int value = static_cast<int>(v);
    if (value != ignore && value >= C)
      throw DataError("dataset: label value " + std::to_string(value) + " out of range in '" +
                      (e.label_path.empty() ? e.id : e.label_path.string()) + "'");
  }
  return lab;
}

LabelMap Dataset::label(int i) const {
  const Entry& e = entries_[static_cast<size_t>(i)];
  Image img_dims_probe;
  int h, w;
  if (e.inline_sample) {
    h = e.inline_sample->image.dim(0);
    w = e.inline_sample->image.dim(1);
  } else {
    img_dims_probe = read_image_png(e.image_path.string());
    h = img_dims_probe.dim(0);
    w = img_dims_probe.dim(1);
  }
  LabelMap lab = validated_label(e, h, w);
  ++*label_reads_;
  return lab;
}

SegSample Dataset::sample(int i) const {
  const Entry& e = entries_[static_cast<size_t>(i)];
  SegSample s;
  s.id = e.id;
  s.image = image(i);
  s.label = validated_label(e, s.image.dim(0), s.image.dim(1));
  ++*label_reads_;
  return s;
}

Dataset load_dataset(const fs::path& root, const std::string& split,
                     const ClassTaxonomy& taxonomy) {
  const fs::path meta_path = root / "dataset.meta";
  if (fs::exists(meta_path)) {
    std::ifstream in(meta_path);
    json meta;
    try {
      in >> meta;
    } catch (const json::exception& e) {
      throw DataError("dataset.meta: parse failure: " + std::string(e.what()));
    }
    const int version = meta.value("format_version", -1);
    if (version != 1)
      throw DataError("dataset.meta: unsupported format_version in '" + meta_path.string() + "'");
    if (meta.contains("taxonomy")) {
      const fs::path tax_path = root / meta.at("taxonomy").get<std::string>();
      if (fs::exists(tax_path)) {
        const ClassTaxonomy declared = load_taxonomy(tax_path.string());
        if (declared.num_classes() != taxonomy.num_classes() ||
            declared.ignore_id() != taxonomy.ignore_id())
          throw DataError("dataset: taxonomy mismatch between '" + tax_path.string() +
                          "' and the loaded taxonomy");
      }
    }
  } else {
    throw DataError("dataset: missing dataset.meta under '" + root.string() + "'");
  }
  // Convention: a directory named "source" carries the source domain.
  const DomainTag tag =
      root.filename().string() == "source" ? DomainTag::kSource : DomainTag::kTarget;
  return Dataset::from_directory(root / split, tag, taxonomy);
}

namespace {

// Rotation of RGB about the achromatic axis (1,1,1)/sqrt(3) by `deg`.
std::array<double, 9> hue_rotation_matrix(double deg) {
  const double rad = deg * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double a = 1.0 / 3.0;
  const double sq = std::sqrt(1.0 / 3.0);
  return {c + (1 - c) * a,      a * (1 - c) - sq * s, a * (1 - c) + sq * s,
          a * (1 - c) + sq * s, c + (1 - c) * a,      a * (1 - c) - sq * s,
          a * (1 - c) - sq * s, a * (1 - c) + sq * s, c + (1 - c) * a};
}

void fill_rect(Image& img, LabelMap& lab, int y0, int x0, int y1, int x1, int cls,
               const std::array<double, 3>& color) {
  const int h = img.dim(0), w = img.dim(1);
  y0 = std::clamp(y0, 0, h);
  y1 = std::clamp(y1, 0, h);
  x0 = std::clamp(x0, 0, w);
  x1 = std::clamp(x1, 0, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<size_t>(c)];
      lab.at(y, x) = static_cast<std::uint8_t>(cls);
    }
}

void fill_disc(Image& img, LabelMap& lab, int cy, int cx, int r, int cls,
               const std::array<double, 3>& color) {
  const int h = img.dim(0), w = img.dim(1);
  for (int y = std::max(0, cy - r); y < std::min(h, cy + r + 1); ++y)
    for (int x = std::max(0, cx - r); x < std::min(w, cx + r + 1); ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<size_t>(c)];
        lab.at(y, x) = static_cast<std::uint8_t>(cls);
      }
}

std::array<double, 3> jitter(const std::array<double, 3>& base, double amount, RngStream& rng) {
  std::array<double, 3> out;
  for (int c = 0; c < 3; ++c)
    out[static_cast<size_t>(c)] =
        std::clamp(base[static_cast<size_t>(c)] + rng.uniform(-amount, amount), 0.0, 1.0);
  return out;
}

// Classes: 0 ground, 1 sky, 2 building, 3 wall, 4 tree, 5 bush.
SegSample render_scene(const ToyDomainSpec& spec, RngStream& rng) {
  const int n = spec.canvas;
  SegSample s;
  s.image = make_image(n, n);
  s.label = LabelMap(n, n, 0);

  const int horizon = static_cast<int>(n * rng.uniform(0.30, 0.50));
  fill_rect(s.image, s.label, 0, 0, horizon, n, 1, jitter(spec.palette[1], 0.03, rng));
  fill_rect(s.image, s.label, horizon, 0, n, n, 0, jitter(spec.palette[0], 0.03, rng));

  for (int i = 0; i < spec.num_shapes; ++i) {
    const bool construction = rng.bernoulli(0.5);
    const int base_y = rng.uniform_int(horizon + n / 16, n - n / 16);
    const int cx = rng.uniform_int(n / 10, n - n / 10);
    if (construction) {
      // Slab with an attached low ledge at its base (building + wall).
      const int bw = rng.uniform_int(n / 8, n / 4);
      const int bh = rng.uniform_int(n / 6, n / 3);
      fill_rect(s.image, s.label, base_y - bh, cx - bw / 2, base_y, cx + bw / 2, 2,
                jitter(spec.palette[2], 0.03, rng));
      const int wh = rng.uniform_int(n / 24, n / 12);
      const int ww = rng.uniform_int(n / 10, n / 5);
      const bool left = rng.bernoulli(0.5);
      const int wx = left ? cx - bw / 2 - ww : cx + bw / 2;
      fill_rect(s.image, s.label, base_y - wh, wx, base_y, wx + ww, 3,
                jitter(spec.palette[3], 0.03, rng));
    } else {
      // Canopy disc with underbrush at its base (tree + bush). Bush radii
      // stay above the training patch size so patch masking leaves part of
      // every bush visible often enough to learn it.
      const int r = rng.uniform_int(n / 14, n / 7);
      fill_disc(s.image, s.label, base_y - r, cx, r, 4, jitter(spec.palette[4], 0.03, rng));
      const int br = rng.uniform_int(n / 18, n / 9);
      const int bx = cx + rng.uniform_int(-r, r);
      fill_disc(s.image, s.label, base_y, bx, br, 5, jitter(spec.palette[5], 0.03, rng));
    }
  }
  return s;
}

void apply_shift(Image& img, const ToyDomainSpec& spec, RngStream& rng) {
  const auto m = hue_rotation_matrix(spec.hue_rotation_deg);
  const int h = img.dim(0), w = img.dim(1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
      double out[3] = {m[0] * r + m[1] * g + m[2] * b, m[3] * r + m[4] * g + m[5] * b,
                       m[6] * r + m[7] * g + m[8] * b};
      for (int c = 0; c < 3; ++c) {
        double v = out[c] * spec.brightness_scale;
        if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

std::string scene_id(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", prefix, index);
  return buf;
}

void validate_spec(const ToyDomainSpec& spec) {
  if (spec.canvas < 64) throw ConfigError("toy spec: canvas must be >= 64");
  if (spec.num_shapes < 1) throw ConfigError("toy spec: num_shapes must be >= 1");
  if (!std::isfinite(spec.hue_rotation_deg) || !std::isfinite(spec.noise_sigma) ||
      !std::isfinite(spec.brightness_scale))
    throw ConfigError("toy spec: shift parameters must be finite");
}

std::vector<SegSample> generate_split(const ToyDomainSpec& spec, int n, int stream_id,
                                      bool shifted, const char* prefix) {
  std::vector<SegSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Per-scene stream keyed by (seed, split, index): stable under reordering.
    RngStream rng(spec.seed, (static_cast<std::uint64_t>(stream_id) << 32) |
                                 static_cast<std::uint64_t>(i));
    SegSample s = render_scene(spec, rng);
    if (shifted) apply_shift(s.image, spec, rng);
    s.id = scene_id(prefix, i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

ToyDomains generate_toy_domains(const ToyDomainSpec& spec, const ClassTaxonomy& taxonomy,
                                int n_source, int n_target) {
  validate_spec(spec);
  if (n_source < 1 || n_target < 1) throw ConfigError("generate_toy_domains: counts must be >= 1");
  auto src = generate_split(spec, n_source, 0, /*shifted=*/false, "src");
  auto tgt = generate_split(spec, n_target, 1, /*shifted=*/true, "tgt");
  return {Dataset::in_memory(std::move(src), DomainTag::kSource, taxonomy),
          Dataset::in_memory(std::move(tgt), DomainTag::kTarget, taxonomy)};
}

Dataset generate_toy_target_split(const ToyDomainSpec& spec, const ClassTaxonomy& taxonomy, int n,
                                  int stream_id) {
  validate_spec(spec);
  if (n < 1) throw ConfigError("generate_toy_target_split: count must be >= 1");
  auto samples = generate_split(spec, n, stream_id, /*shifted=*/true, "val");
  return Dataset::in_memory(std::move(samples), DomainTag::kTarget, taxonomy);
}

void write_dataset(const Dataset& ds, const fs::path& root, const std::string& split,
                   const std::string& taxonomy_relpath, bool write_labels) {
  const fs::path images = root / split / "images";
  const fs::path labels = root / split / "labels";
  fs::create_directories(images);
  if (write_labels) fs::create_directories(labels);

  for (int i = 0; i < ds.size(); ++i) {
    const SegSample s = ds.sample(i);
    write_image_png((images / (s.id + ".png")).string(), s.image);
    if (write_labels) write_label_png((labels / (s.id + ".png")).string(), s.label);
  }

  const fs::path meta_path = root / "dataset.meta";
  if (!fs::exists(meta_path)) {
    json meta;
    meta["format_version"] = 1;
    meta["taxonomy"] = taxonomy_relpath;
    std::ofstream out(meta_path);
    out << meta.dump(2) << '\n';
  }
}

namespace {

// Reflect-pad to at least (min_h, min_w), image and label together.
SegSample reflect_pad(const SegSample& s, int min_h, int min_w) {
  const int h = s.image.dim(0), w = s.image.dim(1);
  const int nh = std::max(h, min_h), nw = std::max(w, min_w);
  if (nh == h && nw == w) return s;
  SegSample out;
  out.id = s.id;
  out.image = make_image(nh, nw);
  out.label = LabelMap(nh, nw);
  for (int y = 0; y < nh; ++y) {
    int sy = y < h ? y : 2 * h - 2 - y;
    sy = std::clamp(sy, 0, h - 1);
    for (int x = 0; x < nw; ++x) {
      int sx = x < w ? x : 2 * w - 2 - x;
      sx = std::clamp(sx, 0, w - 1);
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = s.image.at(sy, sx, c);
      out.label.at(y, x) = s.label.at(sy, sx);
    }
  }
  return out;
}

}  // namespace

SegSample augment_sample(const SegSample& s, int crop, double flip_prob, int /*ignore_id*/,
                         RngStream& rng) {
  const SegSample padded = reflect_pad(s, crop, crop);
  const int h = padded.image.dim(0), w = padded.image.dim(1);
  const int oy = h == crop ? 0 : static_cast<int>(rng.uniform_below(
                                       static_cast<std::uint64_t>(h - crop + 1)));
  const int ox = w == crop ? 0 : static_cast<int>(rng.uniform_below(
                                       static_cast<std::uint64_t>(w - crop + 1)));
  const bool flip = flip_prob > 0.0 && rng.bernoulli(flip_prob);

  SegSample out;
  out.id = s.id;
  out.image = make_image(crop, crop);
  out.label = LabelMap(crop, crop);
  for (int y = 0; y < crop; ++y) {
    for (int x = 0; x < crop; ++x) {
      const int sx = ox + (flip ? crop - 1 - x : x);
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = padded.image.at(oy + y, sx, c);
      out.label.at(y, x) = padded.label.at(oy + y, sx);
    }
  }
  return out;
}

std::pair<SegSample, SegSample> sample_training_pair(const Dataset& source, const Dataset& target,
                                                     int crop, RngStream& rng) {
  if (source.size() == 0 || target.size() == 0)
    throw DataError("sample_training_pair: empty dataset");
  const int ignore = source.taxonomy().ignore_id();

  const int si = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(source.size())));
  SegSample src = source.sample(si);
  src = augment_sample(src, crop, 0.5, ignore, rng);

  // Target labels stay unread: the sample is built from the image alone.
  const int ti = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(target.size())));
  SegSample tgt;
  tgt.id = target.id(ti);
  tgt.image = target.image(ti);
  tgt.label = LabelMap(tgt.image.dim(0), tgt.image.dim(1),
                       static_cast<std::uint8_t>(target.taxonomy().ignore_id()));
  tgt = augment_sample(tgt, crop, 0.5, ignore, rng);
  return {std::move(src), std::move(tgt)};
}

}  // namespace udaseg
