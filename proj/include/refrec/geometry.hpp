#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

#include "refrec/matrix.hpp"
#include "refrec/rng.hpp"

namespace refrec::geometry {

struct PointCloud {
  Matrix points;  // N x 3

  PointCloud() = default;
  explicit PointCloud(Matrix pts);
  Eigen::Index size() const { return points.rows(); }
};

enum class Domain { source, target };

struct LabeledSample {
  PointCloud cloud;
  int label = 0;
  Domain domain = Domain::source;
};

struct Corruption {
  double occlusion_min = 0.0;
  double occlusion_max = 0.0;
  double jitter_sigma = 0.0;
  /// Strength of the pole-biased density subsampling; 0 keeps sampling uniform.
  double density_bias = 0.0;

  bool operator==(const Corruption&) const = default;
};

struct DomainSpec {
  std::vector<std::string> classes;
  Corruption corruption;
  int samples_per_class = 50;
  int points = 256;
  std::uint64_t seed = 0;
  Domain domain = Domain::source;
};

/// Centre on the centroid and scale so the farthest point has norm 1.
PointCloud normalize(const PointCloud& cloud);

/// Names accepted by generate_domain.
const std::vector<std::string>& shape_names();
/// `n` points on the canonical (unrotated, unscaled) surface of `shape`.
/// The sphere is the unit sphere; the others fit in [-1, 1]^3.
Matrix sample_surface(const std::string& shape, int n, Rng& rng);

/// Class-balanced samples; sample i has label i % classes.size() and draws from
/// its own stream seed.split(i). Throws on unknown shape names.
std::vector<LabeledSample> generate_domain(const DomainSpec& spec);

/// Exactly n points: without replacement when the cloud has at least n points
/// (a permutation when equal), uniformly with replacement otherwise.
PointCloud sample_points(const PointCloud& cloud, int n, Rng& rng);

struct OcclusionCut {
  Matrix survivors;
  Eigen::Vector3d direction;
  /// Survivors satisfy p . direction <= offset; removed points satisfy >= offset.
  double offset = 0.0;
  int removed = 0;
};

/// Removes the ceil(fraction * N) points most extreme along `direction`.
OcclusionCut occlusion_cut(const PointCloud& cloud, const Eigen::Vector3d& direction, double fraction);
/// Half-space cut along a random direction, resampled to N with replacement and
/// renormalised. fraction must lie in [0, 1).
PointCloud occlusion_augment(const PointCloud& cloud, double fraction, Rng& rng);

/// i.i.d. Gaussian noise per coordinate, clipped at +-3 sigma. No renormalisation.
PointCloud add_clipped_noise(const PointCloud& cloud, double sigma, Rng& rng);
PointCloud jitter(const PointCloud& cloud, double sigma, Rng& rng);

/// Keeps n points, preferring those near a random pole (weighted sampling
/// without replacement, weight exp(strength * cos(angle to pole))).
PointCloud density_bias(const PointCloud& cloud, int n, double strength, Rng& rng);

/// Applies the corruption chain used for target domains:
/// density bias -> occlusion -> jitter -> normalize.
PointCloud corrupt(const PointCloud& raw, int n, const Corruption& c, Rng& rng);

// ---------------------------------------------------------------------------
// PCSET v1: manifest.json plus one text file per split; each line is
// `label x y z x y z ...` with 17 significant digits.

struct PointSetSplit {
  std::string name;
  Domain domain = Domain::source;
  std::vector<LabeledSample> samples;
};

struct PointSetFile {
  nlohmann::json manifest;  // caller metadata (classes, seed, corruption, config hash ...)
  std::vector<PointSetSplit> splits;
};

void write_pcset(const std::filesystem::path& dir, const PointSetFile& set);
PointSetFile read_pcset(const std::filesystem::path& dir);

std::string format_double(double v);
double parse_double(std::string_view s);

nlohmann::json to_json(const Corruption& c);
Corruption corruption_from_json(const nlohmann::json& j);
const char* domain_name(Domain d);
Domain parse_domain(const std::string& s);

}  // namespace refrec::geometry
