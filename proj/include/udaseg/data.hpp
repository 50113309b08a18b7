#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/taxonomy.hpp"
#include "udaseg/tensor.hpp"

namespace udaseg {

struct SegSample {
  Image image;     // H×W×3 in [0,1]
  LabelMap label;  // class IDs or ignore_id
  std::string id;
};

enum class DomainTag { kSource, kTarget };

// Immutable collection of lazily-decoded samples. Labels go through a counted
// accessor: the trainer asserts that the target-train dataset's counter stays
// at zero for an entire run (the UDA contract).
class Dataset {
 public:
  static Dataset from_directory(const std::filesystem::path& split_dir, DomainTag domain,
                                const ClassTaxonomy& taxonomy);
  static Dataset in_memory(std::vector<SegSample> samples, DomainTag domain,
                           const ClassTaxonomy& taxonomy);

  int size() const { return static_cast<int>(entries_.size()); }
  DomainTag domain() const { return domain_; }
  const ClassTaxonomy& taxonomy() const { return *taxonomy_; }
  bool labeled() const { return labeled_; }
  const std::string& id(int i) const { return entries_[static_cast<size_t>(i)].id; }

  Image image(int i) const;
  LabelMap label(int i) const;  // counts the read; all-ignore for unlabeled sets
  SegSample sample(int i) const;

  long label_reads() const { return *label_reads_; }

 private:
  struct Entry {
    std::string id;
    std::filesystem::path image_path;
    std::filesystem::path label_path;  // empty for unlabeled
    std::shared_ptr<const SegSample> inline_sample;
  };

  LabelMap validated_label(const Entry& e, int h, int w) const;

  std::vector<Entry> entries_;
  DomainTag domain_ = DomainTag::kSource;
  std::shared_ptr<const ClassTaxonomy> taxonomy_;
  bool labeled_ = false;
  std::shared_ptr<long> label_reads_ = std::make_shared<long>(0);
};

// root/<split>/images/<id>.png (+ labels/<id>.png if labeled); root carries a
// dataset.meta with format_version and the taxonomy path.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split,
                     const ClassTaxonomy& taxonomy);

// Two-domain synthetic scene generator. Scenes are ground/sky backdrops with
// paired structures (slab+ledge, canopy+underbrush analogs) whose adjacency
// gives the coarse groups real contextual meaning. The target domain draws
// fresh scenes from the same distribution and shifts appearance only.
struct ToyDomainSpec {
  int canvas = 128;
  int num_shapes = 4;  // paired structures per scene
  // Luminance separates the hue-rotation-prone pairs (wall/bush, tree/bush)
  // so a moderate rotation degrades the color cue without destroying it.
  std::array<std::array<double, 3>, 6> palette = {{
      {0.40, 0.36, 0.32},  // ground
      {0.65, 0.80, 0.95},  // sky
      {0.75, 0.25, 0.20},  // building
      {0.90, 0.70, 0.45},  // wall
      {0.10, 0.45, 0.15},  // tree
      {0.50, 0.70, 0.20},  // bush
  }};
  double hue_rotation_deg = 30.0;
  double noise_sigma = 0.08;
  double brightness_scale = 0.9;
  std::uint64_t seed = 0;
};

struct ToyDomains {
  Dataset source;
  Dataset target;
};

ToyDomains generate_toy_domains(const ToyDomainSpec& spec, const ClassTaxonomy& taxonomy,
                                int n_source, int n_target);

// Extra target-domain scenes from an independent stream, for held-out eval.
Dataset generate_toy_target_split(const ToyDomainSpec& spec, const ClassTaxonomy& taxonomy,
                                  int n, int stream_id);

// Writes the documented on-disk layout (images/, labels/, dataset.meta).
void write_dataset(const Dataset& ds, const std::filesystem::path& root, const std::string& split,
                   const std::string& taxonomy_relpath, bool write_labels);

// Random crop + horizontal flip, identical geometry for image and label;
// reflect-pads inputs smaller than the crop.
SegSample augment_sample(const SegSample& s, int crop, double flip_prob, int ignore_id,
                         RngStream& rng);

// One augmented sample per domain. The target side never touches stored
// labels: its label comes back all-ignore.
std::pair<SegSample, SegSample> sample_training_pair(const Dataset& source, const Dataset& target,
                                                     int crop, RngStream& rng);

}  // namespace udaseg
