#include "udaseg/taxonomy.hpp"

#include <fstream>
#include <set>
#include <utility>

#include <json.hpp>

#include "udaseg/errors.hpp"

namespace udaseg {

using nlohmann::json;

ClassTaxonomy::ClassTaxonomy(int num_classes, int ignore_id, std::vector<std::string> names,
                             std::map<std::string, std::set<int>> coarse_groups,
                             std::set<std::string> active_groups)
    : num_classes_(num_classes),
      ignore_id_(ignore_id),
      names_(std::move(names)),
      coarse_groups_(std::move(coarse_groups)),
      active_groups_(std::move(active_groups)) {
  validate();
  rebuild_related();
}

void ClassTaxonomy::validate() const {
  if (num_classes_ <= 0) throw ConfigError("taxonomy: num_classes must be positive");
  if (num_classes_ > 255) throw ConfigError("taxonomy: num_classes must fit 8-bit label maps");
  if (static_cast<int>(names_.size()) != num_classes_)
    throw ConfigError("taxonomy: names list length " + std::to_string(names_.size()) +
                      " does not match num_classes " + std::to_string(num_classes_));
  if (ignore_id_ < 0 || ignore_id_ > 255)
    throw ConfigError("taxonomy: ignore_id must be an 8-bit value");
  if (ignore_id_ < num_classes_)
    throw ConfigError("taxonomy: ignore_id must lie outside [0, num_classes)");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (!seen.insert(n).second)
      throw ConfigError("taxonomy: duplicate class name '" + n + "'");
  }
  for (const auto& [group, members] : coarse_groups_) {
    for (int id : members) {
      if (id < 0 || id >= num_classes_)
        throw ConfigError("taxonomy: coarse group '" + group + "' references class ID " +
                          std::to_string(id) + " outside [0, num_classes)");
      if (id == ignore_id_)
        throw ConfigError("taxonomy: coarse group '" + group + "' references ignore_id");
    }
  }
  for (const auto& g : active_groups_) {
    if (coarse_groups_.find(g) == coarse_groups_.end())
      throw ConfigError("taxonomy: active group '" + g + "' is not a declared coarse group");
  }
}

void ClassTaxonomy::rebuild_related() {
  related_.assign(static_cast<size_t>(num_classes_), {});
  for (const auto& g : active_groups_) {
    const auto& members = coarse_groups_.at(g);
    for (int i : members)
      for (int j : members)
        if (i != j) related_[static_cast<size_t>(i)].insert(j);
  }
}

const std::string& ClassTaxonomy::name(int class_id) const {
  if (class_id < 0 || class_id >= num_classes_)
    throw ConfigError("taxonomy: class ID " + std::to_string(class_id) + " out of range");
  return names_[static_cast<size_t>(class_id)];
}

int ClassTaxonomy::id_of(const std::string& name) const {
  for (int i = 0; i < num_classes_; ++i)
    if (names_[static_cast<size_t>(i)] == name) return i;
  throw ConfigError("taxonomy: unknown class name '" + name + "'");
}

const std::set<int>& ClassTaxonomy::related(int class_id) const {
  if (class_id < 0 || class_id >= num_classes_)
    throw ConfigError("taxonomy: class ID " + std::to_string(class_id) + " out of range");
  return related_[static_cast<size_t>(class_id)];
}

ClassTaxonomy ClassTaxonomy::with_active_groups(std::set<std::string> groups) const {
  return ClassTaxonomy(num_classes_, ignore_id_, names_, coarse_groups_, std::move(groups));
}

ClassTaxonomy load_taxonomy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("taxonomy: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("taxonomy: parse failure in '" + path + "': " + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != 1)
      throw ConfigError("taxonomy: unsupported format_version " + std::to_string(version));
    const int num_classes = j.at("num_classes").get<int>();
    const int ignore_id = j.at("ignore_id").get<int>();
    const auto names = j.at("names").get<std::vector<std::string>>();

    // Groups are declared by class name in the file; resolve to IDs here.
    std::map<std::string, std::set<int>> groups;
    for (const auto& [group, member_names] : j.at("coarse_groups").items()) {
      std::set<int> ids;
      for (const auto& member : member_names.get<std::vector<std::string>>()) {
        int id = -1;
        for (int i = 0; i < static_cast<int>(names.size()); ++i)
          if (names[static_cast<size_t>(i)] == member) { id = i; break; }
        if (id < 0)
          throw ConfigError("taxonomy: coarse group '" + group + "' references unknown class '" +
                            member + "'");
        if (!ids.insert(id).second)
          throw ConfigError("taxonomy: coarse group '" + group + "' lists class '" + member +
                            "' twice");
      }
      groups.emplace(group, std::move(ids));
    }

    std::set<std::string> active;
    for (const auto& g : j.at("default_active_groups").get<std::vector<std::string>>())
      active.insert(g);

    return ClassTaxonomy(num_classes, ignore_id, names, std::move(groups), std::move(active));
  } catch (const json::exception& e) {
    throw DataError("taxonomy: malformed '" + path + "': " + e.what());
  }
}

std::set<int> expand_with_related(const std::set<int>& classes, const ClassTaxonomy& taxonomy) {
  std::set<int> out = classes;
  for (int c : classes) {
    if (c < 0 || c >= taxonomy.num_classes())
      throw ConfigError("expand_with_related: class ID " + std::to_string(c) + " out of range");
    const auto& rel = taxonomy.related(c);
    out.insert(rel.begin(), rel.end());
  }
  return out;
}

}  // namespace udaseg
