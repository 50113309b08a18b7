#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace udaseg {

// Class vocabulary plus the coarse-category relation that drives prior-guided
// mixing. Immutable after load; use with_active_groups() to derive a variant.
//
// Relatedness: two classes are related iff they co-occur in at least one
// ACTIVE coarse group. related[i] is kept consistent with active_groups at
// all times (rebuilt on construction / with_active_groups).
class ClassTaxonomy {
 public:
  ClassTaxonomy(int num_classes, int ignore_id, std::vector<std::string> names,
                std::map<std::string, std::set<int>> coarse_groups,
                std::set<std::string> active_groups);

  int num_classes() const { return num_classes_; }
  int ignore_id() const { return ignore_id_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int class_id) const;
  int id_of(const std::string& name) const;  // throws ConfigError on unknown name

  const std::map<std::string, std::set<int>>& coarse_groups() const { return coarse_groups_; }
  const std::set<std::string>& active_groups() const { return active_groups_; }

  // Union of active coarse groups containing class_id, minus the class itself.
  const std::set<int>& related(int class_id) const;

  // Same taxonomy with a different active-group subset (value semantics).
  ClassTaxonomy with_active_groups(std::set<std::string> groups) const;

 private:
  void rebuild_related();
  void validate() const;

  int num_classes_ = 0;
  int ignore_id_ = 255;
  std::vector<std::string> names_;
  std::map<std::string, std::set<int>> coarse_groups_;
  std::set<std::string> active_groups_;
  std::vector<std::set<int>> related_;
};

// Reads the documented JSON taxonomy format (see configs/taxonomy_toy.json);
// active groups default to the file's `default_active_groups`.
ClassTaxonomy load_taxonomy(const std::string& path);

// Appends every class related to a member of `classes` (spec: the K̄ of each
// selected K). Idempotent and monotone.
std::set<int> expand_with_related(const std::set<int>& classes, const ClassTaxonomy& taxonomy);

}  // namespace udaseg
