#include "refrec/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace refrec::model {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

Matrix uniform_matrix(Eigen::Index r, Eigen::Index c, double bound, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

std::vector<ad::Value> layer_params(const std::vector<Linear>& layers) {
  std::vector<ad::Value> out;
  for (const auto& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Linear> clone_layers(const std::vector<Linear>& layers) {
  std::vector<Linear> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l.clone());
  return out;
}

void append_layers(Checkpoint& ckpt, const std::string& prefix, const std::vector<Linear>& layers) {
  for (size_t i = 0; i < layers.size(); ++i) {
    ckpt.tensors.emplace_back(prefix + "." + std::to_string(i) + ".weight", layers[i].weight.data());
    ckpt.tensors.emplace_back(prefix + "." + std::to_string(i) + ".bias", layers[i].bias.data());
  }
}

std::vector<Linear> layers_from(const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<Linear> layers;
  for (size_t i = 0;; ++i) {
    const std::string w = prefix + "." + std::to_string(i) + ".weight";
    bool found = false;
    for (const auto& [name, _] : ckpt.tensors) found = found || name == w;
    if (!found) break;
    layers.push_back({ad::Value::parameter(ckpt.tensor(w)),
                      ad::Value::parameter(ckpt.tensor(prefix + "." + std::to_string(i) + ".bias"))});
  }
  if (layers.empty()) throw std::runtime_error("checkpoint has no tensors under '" + prefix + "'");
  return layers;
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("RRCK: truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

constexpr char kMagic[] = "RRCK v1\n";

}  // namespace

Linear Linear::init(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  Matrix w = uniform_matrix(in, out, bound, rng);
  Matrix b = uniform_matrix(1, out, bound, rng);
  return {ad::Value::parameter(std::move(w)), ad::Value::parameter(std::move(b))};
}

Linear Linear::zeros(Eigen::Index in, Eigen::Index out) {
  return {ad::Value::parameter(Matrix::Zero(in, out)), ad::Value::parameter(Matrix::Zero(1, out))};
}

ad::Value Linear::operator()(const ad::Value& x) const { return ad::add(ad::matmul(x, weight), bias); }

EncoderParams EncoderParams::init(const ModelConfig& cfg, Rng& rng) {
  if (cfg.encoder_widths.empty()) throw std::invalid_argument("encoder needs at least one layer");
  EncoderParams p;
  Eigen::Index in = 3;
  for (int w : cfg.encoder_widths) {
    p.layers.push_back(Linear::init(in, w, rng));
    in = w;
  }
  return p;
}

EncoderParams EncoderParams::clone() const { return {clone_layers(layers)}; }
std::vector<ad::Value> EncoderParams::params() const { return layer_params(layers); }

DecoderParams DecoderParams::init(const ModelConfig& cfg, Rng& rng) {
  if (cfg.decoder_widths.size() != 2) throw std::invalid_argument("decoder has exactly 3 layers (2 hidden widths)");
  DecoderParams p;
  p.points = cfg.points;
  const Eigen::Index d = cfg.descriptor_width();
  p.layers.push_back(Linear::init(d, cfg.decoder_widths[0], rng));
  p.layers.push_back(Linear::init(cfg.decoder_widths[0], cfg.decoder_widths[1], rng));
  p.layers.push_back(Linear::init(cfg.decoder_widths[1], 3 * cfg.points, rng));
  return p;
}

DecoderParams DecoderParams::clone() const { return {clone_layers(layers), points}; }
std::vector<ad::Value> DecoderParams::params() const { return layer_params(layers); }

HeadParams HeadParams::init(const ModelConfig& cfg, Rng& rng) {
  return {Linear::init(cfg.descriptor_width(), cfg.head_hidden, rng), Linear::init(cfg.head_hidden, cfg.classes, rng)};
}

Matrix stack_clouds(std::span<const geometry::PointCloud* const> clouds) {
  if (clouds.empty()) throw std::invalid_argument("stack_clouds: no clouds");
  const Eigen::Index n = clouds.front()->size();
  Matrix out(n * static_cast<Eigen::Index>(clouds.size()), 3);
  for (size_t b = 0; b < clouds.size(); ++b) {
    if (clouds[b]->size() != n) throw std::invalid_argument("stack_clouds: clouds differ in point count");
    out.middleRows(static_cast<Eigen::Index>(b) * n, n) = clouds[b]->points;
  }
  return out;
}

Matrix stack_clouds(std::span<const geometry::PointCloud> clouds) {
  std::vector<const geometry::PointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);
  return stack_clouds(std::span<const geometry::PointCloud* const>(ptrs));
}

ad::Value encode(const EncoderParams& p, const ad::Value& points, int points_per_cloud) {
  if (p.layers.empty() || p.layers.front().in() != 3) throw std::invalid_argument("encode: first layer must take 3 inputs");
  ad::Value h = points;
  for (const auto& layer : p.layers) h = ad::relu(layer(h));
  return ad::max_over_points(h, points_per_cloud);
}

RowVector encode(const EncoderParams& p, const geometry::PointCloud& cloud) {
  return encode(p, ad::Value::constant(cloud.points), static_cast<int>(cloud.size())).data().row(0);
}

Matrix encode_all(const EncoderParams& p, std::span<const geometry::PointCloud> clouds, int batch) {
  Matrix out(static_cast<Eigen::Index>(clouds.size()), p.descriptor_width());
  for (size_t start = 0; start < clouds.size(); start += static_cast<size_t>(batch)) {
    const size_t count = std::min(clouds.size() - start, static_cast<size_t>(batch));
    const auto chunk = clouds.subspan(start, count);
    const ad::Value z =
        encode(p, ad::Value::constant(stack_clouds(chunk)), static_cast<int>(chunk.front().size()));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = z.data();
  }
  return out;
}

ad::Value decode(const DecoderParams& p, const ad::Value& z) {
  if (p.layers.size() != 3) throw std::invalid_argument("decode: decoder must have 3 layers");
  ad::Value h = ad::relu(p.layers[0](z));
  h = ad::relu(p.layers[1](h));
  return p.layers[2](h);
}

geometry::PointCloud decode(const DecoderParams& p, const RowVector& z) {
  const ad::Value out = decode(p, ad::Value::constant(Matrix(z)));
  return geometry::PointCloud(Eigen::Map<const Matrix>(out.data().data(), p.points, 3));
}

ad::Value head_logits(const HeadParams& h, const ad::Value& z) { return h.out(ad::relu(h.hidden(z))); }

ad::Value classify(const HeadParams& h, const ad::Value& z) { return ad::softmax(head_logits(h, z)); }

Matrix classify(const HeadParams& h, const Matrix& z) { return classify(h, ad::Value::constant(z)).data(); }

Prediction lambda_argmax(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("lambda_argmax: empty probability vector");
  Prediction best{0, p[0]};
  for (size_t i = 1; i < p.size(); ++i)
    if (p[i] > best.confidence) best = {static_cast<int>(i), p[i]};
  return best;
}

Prediction lambda_argmax(const Eigen::Ref<const RowVector>& p) {
  return lambda_argmax(std::span<const double>(p.data(), static_cast<size_t>(p.size())));
}

void transfer_encoder(const EncoderParams& from, EncoderParams& to) {
  if (from.layers.size() != to.layers.size()) throw std::invalid_argument("transfer_encoder: layer counts differ");
  for (size_t i = 0; i < from.layers.size(); ++i) {
    const auto& a = from.layers[i];
    const auto& b = to.layers[i];
    if (a.in() != b.in() || a.out() != b.out())
      throw std::invalid_argument("transfer_encoder: layer " + std::to_string(i) + " shapes differ");
  }
  to = from.clone();
}

// ---------------------------------------------------------------------------

const Matrix& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw std::runtime_error("checkpoint has no tensor '" + name + "'");
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json header;
  header["format"] = "RRCK v1";
  header["metadata"] = ckpt.metadata;
  header["tensors"] = json::array();
  for (const auto& [name, m] : ckpt.tensors) header["tensors"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("RRCK: cannot write " + path.string());
  os.write(kMagic, sizeof kMagic - 1);
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : ckpt.tensors) {
    for (Eigen::Index i = 0; i < m.size(); ++i) write_u64_le(os, std::bit_cast<std::uint64_t>(m.data()[i]));
  }
  if (!os) throw std::runtime_error("RRCK: write failed for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("RRCK: cannot open " + path.string());
  char magic[sizeof kMagic - 1];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error("RRCK: " + path.string() + " is not an RRCK v1 file");
  const std::uint64_t len = read_u64_le(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("RRCK: truncated header");
  const json header = json::parse(text);
  if (header.value("format", "") != "RRCK v1") throw std::runtime_error("RRCK: unsupported format version");
  Checkpoint ckpt;
  ckpt.metadata = header.at("metadata");
  for (const auto& t : header.at("tensors")) {
    const auto r = t.at("shape").at(0).get<Eigen::Index>();
    const auto c = t.at("shape").at(1).get<Eigen::Index>();
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(read_u64_le(is));
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void append_tensors(Checkpoint& ckpt, const std::string& prefix, const EncoderParams& p) {
  append_layers(ckpt, prefix, p.layers);
}

void append_tensors(Checkpoint& ckpt, const std::string& prefix, const DecoderParams& p) {
  append_layers(ckpt, prefix, p.layers);
  ckpt.metadata[prefix + ".points"] = p.points;
}

void append_tensors(Checkpoint& ckpt, const std::string& prefix, const HeadParams& p) {
  append_layers(ckpt, prefix, {p.hidden, p.out});
}

EncoderParams encoder_from(const Checkpoint& ckpt, const std::string& prefix) { return {layers_from(ckpt, prefix)}; }

DecoderParams decoder_from(const Checkpoint& ckpt, const std::string& prefix) {
  DecoderParams p{layers_from(ckpt, prefix), ckpt.metadata.at(prefix + ".points").get<int>()};
  if (p.layers.size() != 3) throw std::runtime_error("checkpoint decoder '" + prefix + "' does not have 3 layers");
  return p;
}

HeadParams head_from(const Checkpoint& ckpt, const std::string& prefix) {
  auto layers = layers_from(ckpt, prefix);
  if (layers.size() != 2) throw std::runtime_error("checkpoint head '" + prefix + "' does not have 2 layers");
  return {layers[0], layers[1]};
}

}  // namespace refrec::model
