#include "refrec/pseudolabel.hpp"

#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"

namespace refrec {

using json = nlohmann::json;

PseudoLabel& PseudoLabelState::at(std::int64_t id) {
  for (auto& e : entries)
    if (e.id == id) return e;
  throw std::out_of_range("no pseudo-label for id " + std::to_string(id));
}

const PseudoLabel& PseudoLabelState::at(std::int64_t id) const {
  return const_cast<PseudoLabelState*>(this)->at(id);
}

std::vector<std::int64_t> PseudoLabelState::ids_with(SplitTag tag) const {
  std::vector<std::int64_t> out;
  for (const auto& e : entries)
    if (e.split == tag) out.push_back(e.id);
  return out;
}

void PseudoLabelState::validate() const {
  std::unordered_set<std::int64_t> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.id).second) throw std::invalid_argument("pseudo-labels: duplicate id " + std::to_string(e.id));
    if (!(e.confidence >= 0.0 && e.confidence <= 1.0))
      throw std::invalid_argument("pseudo-labels: confidence outside [0, 1] for id " + std::to_string(e.id));
    if (e.label < 0 || e.label >= classes)
      throw std::invalid_argument("pseudo-labels: label out of range for id " + std::to_string(e.id));
  }
}

const char* split_name(SplitTag s) {
  switch (s) {
    case SplitTag::unassigned: return "unassigned";
    case SplitTag::easy: return "E";
    case SplitTag::hard: return "H";
    case SplitTag::easy_refined: return "E_refined";
    case SplitTag::hard_refined: return "H_refined";
  }
  return "?";
}

SplitTag parse_split(const std::string& s) {
  for (auto t : {SplitTag::unassigned, SplitTag::easy, SplitTag::hard, SplitTag::easy_refined, SplitTag::hard_refined})
    if (s == split_name(t)) return t;
  throw std::invalid_argument("unknown split tag '" + s + "'");
}

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::classifier: return "classifier";
    case Provenance::reciprocal: return "reciprocal";
    case Provenance::knn_vote: return "knn_vote";
  }
  return "?";
}

Provenance parse_provenance(const std::string& s) {
  for (auto p : {Provenance::classifier, Provenance::reciprocal, Provenance::knn_vote})
    if (s == provenance_name(p)) return p;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

void write_plbl(const std::filesystem::path& path, const PseudoLabelState& pls, const std::string& config_hash) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("PLBL: cannot write " + path.string());
  os << json{{"format", "PLBL v1"}, {"classes", pls.classes}, {"config_hash", config_hash}}.dump() << '\n';
  for (const auto& e : pls.entries) {
    os << json{{"id", e.id},
               {"label", e.label},
               {"confidence", e.confidence},
               {"split", split_name(e.split)},
               {"provenance", provenance_name(e.provenance)}}
              .dump()
       << '\n';
  }
}

PseudoLabelState read_plbl(const std::filesystem::path& path, std::string* config_hash) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("PLBL: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("PLBL: empty file " + path.string());
  const json header = json::parse(line);
  if (header.value("format", "") != "PLBL v1") throw std::runtime_error("PLBL: " + path.string() + " has no PLBL v1 header");
  PseudoLabelState pls;
  pls.classes = header.at("classes").get<int>();
  if (config_hash) *config_hash = header.value("config_hash", "");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    PseudoLabel e;
    e.id = j.at("id").get<std::int64_t>();
    e.label = j.at("label").get<int>();
    e.confidence = j.at("confidence").get<double>();
    e.split = parse_split(j.at("split").get<std::string>());
    e.provenance = parse_provenance(j.at("provenance").get<std::string>());
    pls.entries.push_back(e);
  }
  pls.validate();
  return pls;
}

}  // namespace refrec
