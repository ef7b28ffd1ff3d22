#pragma once

// Binary checkpoint layout (all integers and floats little-endian):
//
//   "FTRJ"                      4 magic bytes
//   u32 version                 currently 1
//   repeated until EOF:
//     u32 name_length, name     UTF-8, no terminator
//     u32 rank
//     u64 dims[rank]
//     f64 payload[prod(dims)]   row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ftrj/error.hpp"
#include "ftrj/nn/dense.hpp"
#include "ftrj/nn/mlp.hpp"

namespace ftrj::nn {

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

using TensorMap = std::map<std::string, Tensor>;

inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'R', 'J'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>)
    bits = std::bit_cast<std::uint64_t>(value);
  else
    bits = static_cast<std::uint64_t>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    int c = is.get();
    if (c == EOF) fail(ErrorKind::data, "checkpoint: truncated record");
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>)
    return std::bit_cast<double>(bits);
  else
    return static_cast<T>(bits);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const TensorMap& tensors) {
  os.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    require(count == t.values.size(), "checkpoint: tensor '" + name + "' size mismatch");
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_le<std::uint64_t>(os, d);
    for (double v : t.values) detail::put_le<double>(os, v);
  }
}

inline TensorMap read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail(ErrorKind::data, "checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    fail(ErrorKind::data, "checkpoint: unsupported version " + std::to_string(version));
  TensorMap out;
  while (is.peek() != EOF) {
    const auto len = detail::get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) fail(ErrorKind::data, "checkpoint: truncated name");
    Tensor t;
    const auto rank = detail::get_le<std::uint32_t>(is);
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(detail::get_le<std::uint64_t>(is));
      count *= t.dims.back();
    }
    t.values.resize(count);
    for (auto& v : t.values) v = detail::get_le<double>(is);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write checkpoint " + path);
  write_checkpoint(os, tensors);
}

inline TensorMap load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::data, "cannot open checkpoint " + path);
  return read_checkpoint(is);
}

inline Tensor to_tensor(const DenseMatrix& m) {
  return {{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
          std::vector<double>(m.data(), m.data() + m.size())};
}

inline Tensor to_tensor(const Vector& v) {
  return {{static_cast<std::uint64_t>(v.size())},
          std::vector<double>(v.data(), v.data() + v.size())};
}

inline const Tensor& find_tensor(const TensorMap& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) fail(ErrorKind::data, "checkpoint: missing tensor '" + name + "'");
  return it->second;
}

inline DenseMatrix matrix_from(const Tensor& t) {
  require(t.dims.size() == 2, "checkpoint: expected rank-2 tensor", ErrorKind::data);
  DenseMatrix m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  std::copy(t.values.begin(), t.values.end(), m.data());
  return m;
}

inline Vector vector_from(const Tensor& t) {
  require(t.dims.size() == 1, "checkpoint: expected rank-1 tensor", ErrorKind::data);
  Vector v(static_cast<Eigen::Index>(t.dims[0]));
  std::copy(t.values.begin(), t.values.end(), v.data());
  return v;
}

inline void store_network(TensorMap& map, const std::string& prefix, const MlpNetwork& net) {
  const auto& o = net.options();
  Tensor meta;
  meta.dims = {o.dims.size() + 2};
  for (auto d : o.dims) meta.values.push_back(static_cast<double>(d));
  meta.values.push_back(static_cast<double>(static_cast<int>(o.activation)));
  meta.values.push_back(o.batch_norm ? 1.0 : 0.0);
  map[prefix + ".meta"] = std::move(meta);
  for (std::size_t k = 0; k < net.linear().size(); ++k) {
    map[prefix + ".layer" + std::to_string(k) + ".weight"] = to_tensor(net.linear()[k].weight);
    map[prefix + ".layer" + std::to_string(k) + ".bias"] = to_tensor(net.linear()[k].bias);
  }
  for (std::size_t k = 0; k < net.norms().size(); ++k) {
    const auto& n = net.norms()[k];
    const auto base = prefix + ".norm" + std::to_string(k);
    map[base + ".gamma"] = to_tensor(n.gamma);
    map[base + ".beta"] = to_tensor(n.beta);
    map[base + ".running_mean"] = to_tensor(n.running_mean);
    map[base + ".running_var"] = to_tensor(n.running_var);
  }
}

inline MlpNetwork load_network(const TensorMap& map, const std::string& prefix) {
  const auto& meta = find_tensor(map, prefix + ".meta");
  require(meta.values.size() >= 4, "checkpoint: malformed network meta", ErrorKind::data);
  MlpOptions o;
  for (std::size_t i = 0; i + 2 < meta.values.size(); ++i)
    o.dims.push_back(static_cast<std::size_t>(meta.values[i]));
  o.activation = static_cast<Activation>(static_cast<int>(meta.values[meta.values.size() - 2]));
  o.batch_norm = meta.values.back() != 0.0;
  Rng dummy(0);
  MlpNetwork net(o, dummy);
  for (std::size_t k = 0; k < net.linear().size(); ++k) {
    auto& l = net.linear()[k];
    DenseMatrix w = matrix_from(find_tensor(map, prefix + ".layer" + std::to_string(k) + ".weight"));
    Vector b = vector_from(find_tensor(map, prefix + ".layer" + std::to_string(k) + ".bias"));
    require(w.rows() == l.weight.rows() && w.cols() == l.weight.cols() && b.size() == l.bias.size(),
            "checkpoint: layer shape mismatch in " + prefix, ErrorKind::data);
    l.weight = std::move(w);
    l.bias = std::move(b);
  }
  for (std::size_t k = 0; k < net.norms().size(); ++k) {
    auto& n = net.norms()[k];
    const auto base = prefix + ".norm" + std::to_string(k);
    n.gamma = vector_from(find_tensor(map, base + ".gamma"));
    n.beta = vector_from(find_tensor(map, base + ".beta"));
    n.running_mean = vector_from(find_tensor(map, base + ".running_mean"));
    n.running_var = vector_from(find_tensor(map, base + ".running_var"));
  }
  net.set_mode(NormMode::inference);
  return net;
}

}  // namespace ftrj::nn
