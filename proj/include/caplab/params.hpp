#pragma once

// Named parameter store and the versioned binary checkpoint container.
//
// Checkpoint layout (little endian throughout):
//   magic "CPLB", version byte (1)
//   u32 meta_len, meta bytes (free-form JSON written by the caller)
//   u64 optimizer step counter
//   u32 param count, then per parameter:
//     u32 name_len, name bytes
//     u8  dtype (4 = f32, 8 = f64)
//     u32 ndim, u32 dims...
//     raw values, then u8 has_moments; if 1, raw first and second moments

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/optim.hpp"
#include "caplab/tensor.hpp"

namespace caplab {

template <class T>
class ParamStore {
 public:
  Tensor<T>& create(const std::string& name, Shape shape) {
    if (by_name_.count(name))
      throw std::invalid_argument("ParamStore: duplicate parameter '" + name +
                                  "'");
    auto t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    order_.push_back(name);
    auto [it, ok] = by_name_.emplace(name, std::move(t));
    return it->second;
  }

  bool contains(const std::string& name) const { return by_name_.count(name); }

  Tensor<T>& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::pair<std::string, Tensor<T>*>> entries() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.reserve(order_.size());
    for (auto& n : order_) out.emplace_back(n, &by_name_.at(n));
    return out;
  }

  size_t total_count() const {
    size_t n = 0;
    for (auto& [k, t] : by_name_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [k, t] : by_name_) t.zero_grad();
  }

 private:
  std::vector<std::string> order_;  // creation order, fixed for serialization
  std::map<std::string, Tensor<T>> by_name_;
};

namespace ckpt_detail {

template <class V>
void write_pod(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  uint32_t n = read_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace ckpt_detail

inline constexpr char kCheckpointMagic[4] = {'C', 'P', 'L', 'B'};
inline constexpr uint8_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, ParamStore<T>& params,
                     const OptimizerState<T>* opt, const std::string& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kCheckpointMagic, 4);
  ckpt_detail::write_pod<uint8_t>(os, kCheckpointVersion);
  ckpt_detail::write_str(os, meta);
  ckpt_detail::write_pod<uint64_t>(os, opt ? static_cast<uint64_t>(opt->step) : 0);
  ckpt_detail::write_pod<uint32_t>(os,
                                   static_cast<uint32_t>(params.names().size()));
  for (const auto& name : params.names()) {
    auto& t = params.at(name);
    ckpt_detail::write_str(os, name);
    ckpt_detail::write_pod<uint8_t>(os, static_cast<uint8_t>(sizeof(T)));
    ckpt_detail::write_pod<uint32_t>(os,
                                     static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) ckpt_detail::write_pod<uint32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    const bool moments = opt && opt->m.count(name);
    ckpt_detail::write_pod<uint8_t>(os, moments ? 1 : 0);
    if (moments) {
      os.write(reinterpret_cast<const char*>(opt->m.at(name).data()),
               static_cast<std::streamsize>(t.numel() * sizeof(T)));
      os.write(reinterpret_cast<const char*>(opt->v.at(name).data()),
               static_cast<std::streamsize>(t.numel() * sizeof(T)));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Loads into an already-constructed store; shapes must match. Returns the
// metadata blob. Optimizer moments are restored when present and requested.
template <class T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& params,
                            OptimizerState<T>* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint8_t version = ckpt_detail::read_pod<uint8_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  std::string meta = ckpt_detail::read_str(is);
  uint64_t step = ckpt_detail::read_pod<uint64_t>(is);
  if (opt) opt->step = static_cast<long>(step);
  uint32_t count = ckpt_detail::read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = ckpt_detail::read_str(is);
    uint8_t dtype = ckpt_detail::read_pod<uint8_t>(is);
    if (dtype != sizeof(T))
      throw std::runtime_error("checkpoint: dtype width " +
                               std::to_string(dtype) + " does not match build");
    uint32_t ndim = ckpt_detail::read_pod<uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape)
      d = static_cast<int>(ckpt_detail::read_pod<uint32_t>(is));
    if (!params.contains(name))
      throw std::runtime_error("checkpoint: unexpected parameter '" + name +
                               "'");
    auto& t = params.at(name);
    if (t.shape() != shape)
      throw std::runtime_error("checkpoint: parameter '" + name + "' is " +
                               shape_str(shape) + " on disk but " +
                               shape_str(t.shape()) + " in model");
    is.read(reinterpret_cast<char*>(t.values().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    uint8_t moments = ckpt_detail::read_pod<uint8_t>(is);
    if (moments) {
      std::vector<T> m(t.numel()), v(t.numel());
      is.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
      is.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
      if (opt) {
        opt->m[name] = std::move(m);
        opt->v[name] = std::move(v);
      }
    }
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
  }
  return meta;
}

}  // namespace caplab
