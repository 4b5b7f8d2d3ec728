#include "meshreg/lora.hpp"

#include "meshreg/binio.hpp"

namespace meshreg {

namespace {

void write_matrix_f32(std::ostream& os, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) binio::write_f32(os, static_cast<float>(m(r, c)));
  }
}

Eigen::MatrixXd read_matrix_f32(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(binio::read_f32(is));
  }
  return m;
}

}  // namespace

void save_lora(const std::vector<LoraLayer<double>>& layers, const std::string& path) {
  auto os = binio::open_out(path);
  binio::write_magic(os, "LORA");
  binio::write_u32(os, 1);
  binio::write_u32(os, static_cast<std::uint32_t>(layers.size()));
  for (const auto& layer : layers) {
    if (layer.merged) {
      throw std::logic_error("save_lora: merged layers have no factors to save");
    }
    binio::write_u32(os, layer.rows());
    binio::write_u32(os, layer.cols());
    binio::write_u32(os, layer.rank);
    write_matrix_f32(os, layer.A);
    write_matrix_f32(os, layer.B);
  }
  if (!os) throw std::runtime_error("failed writing LORA: " + path);
}

std::vector<LoraLayer<double>> load_lora(const std::string& path,
                                         std::vector<Eigen::MatrixXd> frozen_weights) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "LORA", path);
  binio::expect_version(is, 1, path);
  const std::uint32_t count = binio::read_u32(is);
  if (count != frozen_weights.size()) {
    throw std::runtime_error(path + ": checkpoint has " + std::to_string(count) +
                             " layers but " + std::to_string(frozen_weights.size()) +
                             " frozen weights were provided");
  }
  std::vector<LoraLayer<double>> layers;
  layers.reserve(count);
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t m = binio::read_u32(is);
    const std::uint32_t n = binio::read_u32(is);
    const std::uint32_t r = binio::read_u32(is);
    if (frozen_weights[l].rows() != m || frozen_weights[l].cols() != n) {
      throw std::runtime_error(path + ": layer " + std::to_string(l) +
                               " shape mismatch with frozen weight");
    }
    LoraLayer<double> layer;
    layer.W = std::move(frozen_weights[l]);
    layer.rank = r;
    layer.A = read_matrix_f32(is, r, n);
    layer.B = read_matrix_f32(is, m, r);
    layers.push_back(std::move(layer));
  }
  return layers;
}

void save_dense_weights(const std::vector<Eigen::MatrixXd>& weights, const std::string& path) {
  auto os = binio::open_out(path);
  binio::write_magic(os, "DNSW");
  binio::write_u32(os, 1);
  binio::write_u32(os, static_cast<std::uint32_t>(weights.size()));
  for (const auto& w : weights) {
    binio::write_u32(os, static_cast<std::uint32_t>(w.rows()));
    binio::write_u32(os, static_cast<std::uint32_t>(w.cols()));
    write_matrix_f32(os, w);
  }
  if (!os) throw std::runtime_error("failed writing dense weights: " + path);
}

std::vector<Eigen::MatrixXd> load_dense_weights(const std::string& path) {
  auto is = binio::open_in(path);
  binio::expect_magic(is, "DNSW", path);
  binio::expect_version(is, 1, path);
  const std::uint32_t count = binio::read_u32(is);
  std::vector<Eigen::MatrixXd> weights;
  weights.reserve(count);
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t m = binio::read_u32(is);
    const std::uint32_t n = binio::read_u32(is);
    weights.push_back(read_matrix_f32(is, m, n));
  }
  return weights;
}

}  // namespace meshreg
