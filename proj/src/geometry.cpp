#include "refrec/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace refrec::geometry {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::Vector3d random_unit(Rng& rng) {
  for (;;) {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

// Number of points removed for a cut; guards against 0.1 * 30 style round-up.
int cut_count(double fraction, Eigen::Index n) {
  return static_cast<int>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

Matrix take_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

Eigen::Vector3d sphere_point(Rng& rng) { return random_unit(rng); }

Eigen::Vector3d cube_point(Rng& rng) {
  const int face = static_cast<int>(rng.below(6));
  const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
  const double s = (face % 2 == 0) ? 1.0 : -1.0;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

// Radius 1, z in [-1, 1]; lateral area 4 pi, caps pi each.
Eigen::Vector3d cylinder_point(Rng& rng) {
  const double pick = rng.uniform() * 6.0;
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  if (pick < 4.0) return {std::cos(theta), std::sin(theta), rng.uniform(-1.0, 1.0)};
  const double r = std::sqrt(rng.uniform());
  return {r * std::cos(theta), r * std::sin(theta), pick < 5.0 ? 1.0 : -1.0};
}

// Apex at z = 1, unit-radius base at z = -1. Lateral area pi*sqrt(5), base pi.
Eigen::Vector3d cone_point(Rng& rng) {
  const double lateral = std::sqrt(5.0);
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  if (rng.uniform() * (lateral + 1.0) < lateral) {
    const double t = std::sqrt(rng.uniform());  // distance from apex, area-uniform
    return {t * std::cos(theta), t * std::sin(theta), 1.0 - 2.0 * t};
  }
  const double r = std::sqrt(rng.uniform());
  return {r * std::cos(theta), r * std::sin(theta), -1.0};
}

// Major radius 0.7, minor 0.3, area-uniform by rejection on the tube angle.
Eigen::Vector3d torus_point(Rng& rng) {
  constexpr double R = 0.7, r = 0.3;
  for (;;) {
    const double u = rng.uniform(0.0, 2.0 * kPi);
    const double v = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform() * (R + r) <= R + r * std::cos(v))
      return {(R + r * std::cos(v)) * std::cos(u), (R + r * std::cos(v)) * std::sin(u), r * std::sin(v)};
  }
}

Eigen::Vector3d plane_point(Rng& rng) { return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0}; }

}  // namespace

PointCloud::PointCloud(Matrix pts) : points(std::move(pts)) {
  if (points.cols() != 3) throw std::invalid_argument("PointCloud: expected N x 3 points");
}

PointCloud normalize(const PointCloud& cloud) {
  if (cloud.size() == 0) return cloud;
  const RowVector centroid = cloud.points.colwise().mean();
  Matrix centered = cloud.points.rowwise() - centroid;
  const double radius = centered.rowwise().norm().maxCoeff();
  if (radius > 0.0) centered /= radius;
  return PointCloud(std::move(centered));
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"sphere", "cube", "cylinder", "cone", "torus", "plane"};
  return names;
}

Matrix sample_surface(const std::string& shape, int n, Rng& rng) {
  Eigen::Vector3d (*gen)(Rng&) = nullptr;
  if (shape == "sphere") gen = sphere_point;
  else if (shape == "cube") gen = cube_point;
  else if (shape == "cylinder") gen = cylinder_point;
  else if (shape == "cone") gen = cone_point;
  else if (shape == "torus") gen = torus_point;
  else if (shape == "plane") gen = plane_point;
  else throw std::invalid_argument("unknown shape generator '" + shape + "'");
  Matrix pts(n, 3);
  for (int i = 0; i < n; ++i) pts.row(i) = gen(rng).transpose();
  return pts;
}

std::vector<LabeledSample> generate_domain(const DomainSpec& spec) {
  if (spec.classes.size() < 2) throw std::invalid_argument("generate_domain: need at least 2 classes");
  if (spec.samples_per_class <= 0 || spec.points <= 0)
    throw std::invalid_argument("generate_domain: sample and point counts must be positive");
  for (const auto& c : spec.classes)
    if (std::find(shape_names().begin(), shape_names().end(), c) == shape_names().end())
      throw std::invalid_argument("unknown shape generator '" + c + "'");

  const Rng root(spec.seed);
  const int k = static_cast<int>(spec.classes.size());
  const int total = k * spec.samples_per_class;
  std::vector<LabeledSample> out(static_cast<size_t>(total));
#pragma omp parallel for schedule(dynamic, 4)
  for (int i = 0; i < total; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    const int label = i % k;
    Matrix raw = sample_surface(spec.classes[static_cast<size_t>(label)], 2 * spec.points, rng);

    // Random rotation about the up (z) axis, then anisotropic scale.
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    Eigen::Matrix3d rot;
    rot << std::cos(theta), -std::sin(theta), 0.0, std::sin(theta), std::cos(theta), 0.0, 0.0, 0.0, 1.0;
    const Eigen::Vector3d scl(rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3));
    Matrix placed = (raw * rot.transpose()) * scl.asDiagonal();

    auto& s = out[static_cast<size_t>(i)];
    s.label = label;
    s.domain = spec.domain;
    s.cloud = corrupt(PointCloud(std::move(placed)), spec.points, spec.corruption, rng);
  }
  return out;
}

PointCloud sample_points(const PointCloud& cloud, int n, Rng& rng) {
  if (n <= 0) throw std::invalid_argument("sample_points: n must be positive");
  if (cloud.size() == 0) throw std::invalid_argument("sample_points: empty cloud");
  const auto size = static_cast<std::uint64_t>(cloud.size());
  std::vector<int> rows(static_cast<size_t>(n));
  if (static_cast<std::uint64_t>(n) > size) {
    for (auto& r : rows) r = static_cast<int>(rng.below(size));
  } else {
    std::vector<int> perm(size);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 0; i < n; ++i) {
      const auto j = static_cast<size_t>(i) + static_cast<size_t>(rng.below(size - static_cast<std::uint64_t>(i)));
      std::swap(perm[static_cast<size_t>(i)], perm[j]);
      rows[static_cast<size_t>(i)] = perm[static_cast<size_t>(i)];
    }
  }
  return PointCloud(take_rows(cloud.points, rows));
}

OcclusionCut occlusion_cut(const PointCloud& cloud, const Eigen::Vector3d& direction, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("occlusion: fraction must lie in [0, 1)");
  const Eigen::Index n = cloud.size();
  const Eigen::VectorXd proj = cloud.points * direction;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return proj[a] > proj[b]; });

  OcclusionCut cut;
  cut.direction = direction;
  cut.removed = std::min<int>(cut_count(fraction, n), static_cast<int>(n) - 1);
  std::vector<int> keep(order.begin() + cut.removed, order.end());
  std::sort(keep.begin(), keep.end());
  cut.survivors = take_rows(cloud.points, keep);
  cut.offset = cut.removed > 0 ? proj[order[static_cast<size_t>(cut.removed - 1)]]
                               : std::numeric_limits<double>::infinity();
  return cut;
}

PointCloud occlusion_augment(const PointCloud& cloud, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("occlusion: fraction must lie in [0, 1)");
  const Eigen::Vector3d dir = random_unit(rng);
  OcclusionCut cut = occlusion_cut(cloud, dir, fraction);
  if (cut.removed == 0) return normalize(cloud);
  const PointCloud survivors(std::move(cut.survivors));
  std::vector<int> rows(static_cast<size_t>(cloud.size()));
  for (auto& r : rows) r = static_cast<int>(rng.below(static_cast<std::uint64_t>(survivors.size())));
  return normalize(PointCloud(take_rows(survivors.points, rows)));
}

PointCloud add_clipped_noise(const PointCloud& cloud, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("jitter: sigma must be non-negative");
  Matrix pts = cloud.points;
  if (sigma == 0.0) return PointCloud(std::move(pts));
  const double clip = 3.0 * sigma;
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    for (Eigen::Index j = 0; j < 3; ++j) pts(i, j) += std::clamp(sigma * rng.normal(), -clip, clip);
  return PointCloud(std::move(pts));
}

PointCloud jitter(const PointCloud& cloud, double sigma, Rng& rng) {
  return normalize(add_clipped_noise(cloud, sigma, rng));
}

PointCloud density_bias(const PointCloud& cloud, int n, double strength, Rng& rng) {
  if (n <= 0 || n > cloud.size()) throw std::invalid_argument("density_bias: n must lie in [1, cloud size]");
  const Eigen::Vector3d pole = random_unit(rng);
  const PointCloud centred = normalize(cloud);
  // Efraimidis-Spirakis: key = log(u) / w, keep the n largest keys.
  std::vector<std::pair<double, int>> keys(static_cast<size_t>(cloud.size()));
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d p = centred.points.row(i).transpose();
    const double norm = p.norm();
    const double cosang = norm > 0.0 ? p.dot(pole) / norm : 0.0;
    const double w = std::exp(strength * cosang);
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    keys[static_cast<size_t>(i)] = {std::log(u) / w, static_cast<int>(i)};
  }
  std::stable_sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) rows.push_back(keys[static_cast<size_t>(i)].second);
  std::sort(rows.begin(), rows.end());
  return PointCloud(take_rows(cloud.points, rows));
}

PointCloud corrupt(const PointCloud& raw, int n, const Corruption& c, Rng& rng) {
  PointCloud cloud = c.density_bias > 0.0 && raw.size() >= n ? density_bias(raw, n, c.density_bias, rng)
                                                             : sample_points(raw, n, rng);
  if (c.occlusion_max > 0.0) {
    const double f = rng.uniform(c.occlusion_min, c.occlusion_max);
    cloud = occlusion_augment(cloud, f, rng);
  }
  if (c.jitter_sigma > 0.0) cloud = add_clipped_noise(cloud, c.jitter_sigma, rng);
  return normalize(cloud);
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("PCSET: malformed number '" + std::string(s) + "'");
  return v;
}

const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

json to_json(const Corruption& c) {
  return {{"occlusion_min", c.occlusion_min},
          {"occlusion_max", c.occlusion_max},
          {"jitter_sigma", c.jitter_sigma},
          {"density_bias", c.density_bias}};
}

Corruption corruption_from_json(const json& j) {
  Corruption c;
  c.occlusion_min = j.value("occlusion_min", 0.0);
  c.occlusion_max = j.value("occlusion_max", 0.0);
  c.jitter_sigma = j.value("jitter_sigma", 0.0);
  c.density_bias = j.value("density_bias", 0.0);
  return c;
}

void write_pcset(const fs::path& dir, const PointSetFile& set) {
  fs::create_directories(dir);
  json manifest = set.manifest;
  manifest["format"] = "PCSET v1";
  json splits = json::object();
  for (const auto& split : set.splits) {
    const std::string file = split.name + ".txt";
    const Eigen::Index points = split.samples.empty() ? 0 : split.samples.front().cloud.size();
    splits[split.name] = {{"file", file},
                          {"count", split.samples.size()},
                          {"points", points},
                          {"domain", domain_name(split.domain)}};
    std::ofstream out(dir / file, std::ios::binary);
    if (!out) throw std::runtime_error("PCSET: cannot write " + (dir / file).string());
    std::string line;
    for (const auto& s : split.samples) {
      if (s.cloud.size() != points) throw std::invalid_argument("PCSET: split '" + split.name + "' has ragged clouds");
      line = std::to_string(s.label);
      for (Eigen::Index i = 0; i < s.cloud.size(); ++i)
        for (Eigen::Index j = 0; j < 3; ++j) {
          line += ' ';
          line += format_double(s.cloud.points(i, j));
        }
      line += '\n';
      out << line;
    }
  }
  manifest["splits"] = splits;
  std::ofstream m(dir / "manifest.json");
  if (!m) throw std::runtime_error("PCSET: cannot write manifest in " + dir.string());
  m << manifest.dump(2) << '\n';
}

PointSetFile read_pcset(const fs::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw std::runtime_error("PCSET: no manifest.json in " + dir.string());
  PointSetFile set;
  set.manifest = json::parse(m);
  if (set.manifest.value("format", "") != "PCSET v1")
    throw std::runtime_error("PCSET: unsupported format in " + dir.string());
  for (const auto& [name, info] : set.manifest.at("splits").items()) {
    PointSetSplit split;
    split.name = name;
    split.domain = parse_domain(info.at("domain").get<std::string>());
    const auto points = info.at("points").get<Eigen::Index>();
    std::ifstream in(dir / info.at("file").get<std::string>(), std::ios::binary);
    if (!in) throw std::runtime_error("PCSET: missing split file for '" + name + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string_view> tokens;
      std::string_view rest(line);
      while (!rest.empty()) {
        const auto sp = rest.find(' ');
        tokens.push_back(rest.substr(0, sp));
        if (sp == std::string_view::npos) break;
        rest.remove_prefix(sp + 1);
      }
      if (static_cast<Eigen::Index>(tokens.size()) != 1 + 3 * points)
        throw std::runtime_error("PCSET: split '" + name + "' has a line with the wrong number of values");
      LabeledSample s;
      s.domain = split.domain;
      int label = 0;
      auto res = std::from_chars(tokens[0].data(), tokens[0].data() + tokens[0].size(), label);
      if (res.ec != std::errc()) throw std::runtime_error("PCSET: malformed label");
      s.label = label;
      Matrix pts(points, 3);
      for (Eigen::Index i = 0; i < points; ++i)
        for (Eigen::Index j = 0; j < 3; ++j) pts(i, j) = parse_double(tokens[static_cast<size_t>(1 + 3 * i + j)]);
      s.cloud = PointCloud(std::move(pts));
      split.samples.push_back(std::move(s));
    }
    if (split.samples.size() != info.at("count").get<size_t>())
      throw std::runtime_error("PCSET: split '" + name + "' count does not match manifest");
    set.splits.push_back(std::move(split));
  }
  set.manifest.erase("splits");
  set.manifest.erase("format");
  return set;
}

}  // namespace refrec::geometry
