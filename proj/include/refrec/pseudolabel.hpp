#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace refrec {

enum class SplitTag { unassigned, easy, hard, easy_refined, hard_refined };
enum class Provenance { classifier, reciprocal, knn_vote };

struct PseudoLabel {
  std::int64_t id = 0;
  int label = 0;
  double confidence = 0.0;
  SplitTag split = SplitTag::unassigned;
  Provenance provenance = Provenance::classifier;
};

/// One entry per target sample, in target order.
struct PseudoLabelState {
  int classes = 0;
  std::vector<PseudoLabel> entries;

  size_t size() const { return entries.size(); }
  PseudoLabel& at(std::int64_t id);
  const PseudoLabel& at(std::int64_t id) const;
  /// Ids whose split equals `tag`, in entry order.
  std::vector<std::int64_t> ids_with(SplitTag tag) const;
  /// Throws if ids repeat, confidences leave [0, 1] or labels leave [0, classes).
  void validate() const;
};

const char* split_name(SplitTag s);
SplitTag parse_split(const std::string& s);
const char* provenance_name(Provenance p);
Provenance parse_provenance(const std::string& s);

// PLBL v1: JSON lines. The first line is a header
// {"format":"PLBL v1","classes":k,"config_hash":"..."}; every following line is
// {"id":..,"label":..,"confidence":..,"split":..,"provenance":..}.
void write_plbl(const std::filesystem::path& path, const PseudoLabelState& pls, const std::string& config_hash);
PseudoLabelState read_plbl(const std::filesystem::path& path, std::string* config_hash = nullptr);

}  // namespace refrec
