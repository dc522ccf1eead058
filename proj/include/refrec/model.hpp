#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "refrec/autodiff.hpp"
#include "refrec/geometry.hpp"
#include "refrec/rng.hpp"

namespace refrec::model {

/// Fully connected layer y = x W + b, W is in x out.
struct Linear {
  ad::Value weight;
  ad::Value bias;

  /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weight and bias.
  static Linear init(Eigen::Index in, Eigen::Index out, Rng& rng);
  static Linear zeros(Eigen::Index in, Eigen::Index out);
  Eigen::Index in() const { return weight.rows(); }
  Eigen::Index out() const { return weight.cols(); }
  ad::Value operator()(const ad::Value& x) const;
  Linear clone() const { return {weight.clone(), bias.clone()}; }
};

struct ModelConfig {
  std::vector<int> encoder_widths = {64, 64, 128};  // last entry is the descriptor width d
  std::vector<int> decoder_widths = {256, 512};     // two hidden layers, output 3 * points
  int head_hidden = 64;
  int classes = 4;
  int points = 256;

  int descriptor_width() const { return encoder_widths.back(); }
};

/// Per-point shared MLP (ReLU after every layer) followed by a max-pool.
struct EncoderParams {
  std::vector<Linear> layers;

  static EncoderParams init(const ModelConfig& cfg, Rng& rng);
  Eigen::Index descriptor_width() const { return layers.back().out(); }
  EncoderParams clone() const;
  std::vector<ad::Value> params() const;
};

/// Three fully connected layers d -> h1 -> h2 -> 3M, ReLU between layers.
struct DecoderParams {
  std::vector<Linear> layers;
  int points = 0;

  static DecoderParams init(const ModelConfig& cfg, Rng& rng);
  DecoderParams clone() const;
  std::vector<ad::Value> params() const;
};

/// Two layers d -> h -> k with ReLU between; softmax is applied by classify().
struct HeadParams {
  Linear hidden;
  Linear out;

  static HeadParams init(const ModelConfig& cfg, Rng& rng);
  HeadParams clone() const { return {hidden.clone(), out.clone()}; }
  std::vector<ad::Value> params() const { return {hidden.weight, hidden.bias, out.weight, out.bias}; }
  Eigen::Index classes() const { return out.out(); }
};

/// Stacks equal-size clouds into a (B*N) x 3 matrix.
Matrix stack_clouds(std::span<const geometry::PointCloud* const> clouds);
Matrix stack_clouds(std::span<const geometry::PointCloud> clouds);

/// points: (B*N) x 3 stacked clouds of N points each -> B x d descriptors.
ad::Value encode(const EncoderParams& p, const ad::Value& points, int points_per_cloud);
/// Single cloud convenience; returns a 1 x d row.
RowVector encode(const EncoderParams& p, const geometry::PointCloud& cloud);
/// Descriptors for many clouds, evaluated in chunks of `batch`.
Matrix encode_all(const EncoderParams& p, std::span<const geometry::PointCloud> clouds, int batch = 32);

/// z: B x d -> B x 3M (row b holds point m at columns 3m..3m+2).
ad::Value decode(const DecoderParams& p, const ad::Value& z);
geometry::PointCloud decode(const DecoderParams& p, const RowVector& z);

ad::Value head_logits(const HeadParams& h, const ad::Value& z);
/// Row-wise class probabilities.
ad::Value classify(const HeadParams& h, const ad::Value& z);
Matrix classify(const HeadParams& h, const Matrix& z);

struct Prediction {
  int label = 0;
  double confidence = 0.0;
};

/// Largest entry and its index; ties go to the lowest index.
Prediction lambda_argmax(std::span<const double> p);
Prediction lambda_argmax(const Eigen::Ref<const RowVector>& p);

/// Deep copy of encoder weights into `to`; architectures must match exactly.
void transfer_encoder(const EncoderParams& from, EncoderParams& to);

// ---------------------------------------------------------------------------
// RRCK v1 checkpoints: the line "RRCK v1\n", a little-endian uint64 header
// length, a JSON header {format, metadata, tensors:[{name, shape}]}, then
// every tensor as little-endian float64 in header order (row-major).

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix& tensor(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void append_tensors(Checkpoint& ckpt, const std::string& prefix, const EncoderParams& p);
void append_tensors(Checkpoint& ckpt, const std::string& prefix, const DecoderParams& p);
void append_tensors(Checkpoint& ckpt, const std::string& prefix, const HeadParams& p);
EncoderParams encoder_from(const Checkpoint& ckpt, const std::string& prefix);
DecoderParams decoder_from(const Checkpoint& ckpt, const std::string& prefix);
HeadParams head_from(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace refrec::model
