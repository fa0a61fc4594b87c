#pragma once

// Named trainable tensors and the DEAOTW1 weights file.
//
// Layout (little-endian):
//   "DEAOTW1\0"  u32 count
//   per tensor:  u16 name_len, name bytes (UTF-8), u8 ndim, u32 dims[ndim],
//                u8 dtype (0 = float32, 1 = float64), payload

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "deaot/tensor.hpp"

namespace deaot {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

inline constexpr char kWeightsMagic[8] = {'D', 'E', 'A', 'O', 'T', 'W', '1', '\0'};

template <typename T>
class ParamStore {
 public:
  // Registers a new trainable leaf; names must be unique.
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    value.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(value)});
    return entries_.back().tensor;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Copies values (not graph or gradients) from another store with the same
  // names and shapes, converting precision as needed.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    for (auto& e : entries_) {
      const auto& src = other.get(e.name);
      if (src.shape() != e.tensor.shape()) throw DimensionError("shape mismatch for parameter " + e.name);
      auto dst = e.tensor.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <typename V>
void put(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V take(std::istream& in, const std::string& where) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw IoError("truncated weights file " + where);
  return value;
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <typename T>
void save_weights(const std::filesystem::path& path, const ParamStore<T>& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.ndim()));
    for (auto d : e.tensor.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    detail::put<std::uint8_t>(out, detail::dtype_code<T>());
    out.write(reinterpret_cast<const char*>(e.tensor.data().data()),
              static_cast<std::streamsize>(e.tensor.numel() * sizeof(T)));
  }
  if (!out) throw IoError("short write on " + path.string());
}

// Raw tensors from a weights file, keyed by name, values widened to double.
struct WeightsFile {
  struct Record {
    Shape shape;
    std::uint8_t dtype = 0;
    std::vector<double> values;
  };
  std::vector<std::pair<std::string, Record>> tensors;
};

inline WeightsFile read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto where = path.string();
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0) throw IoError(where + " is not a DEAOTW1 file");
  WeightsFile file;
  const auto count = detail::take<std::uint32_t>(in, where);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = detail::take<std::uint16_t>(in, where);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    WeightsFile::Record rec;
    const auto ndim = detail::take<std::uint8_t>(in, where);
    for (std::uint8_t d = 0; d < ndim; ++d) rec.shape.push_back(detail::take<std::uint32_t>(in, where));
    rec.dtype = detail::take<std::uint8_t>(in, where);
    const auto n = shape_numel(rec.shape);
    rec.values.resize(n);
    if (rec.dtype == 0) {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
      std::copy(buf.begin(), buf.end(), rec.values.begin());
    } else if (rec.dtype == 1) {
      in.read(reinterpret_cast<char*>(rec.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    } else {
      throw IoError("unknown dtype code " + std::to_string(rec.dtype) + " in " + where);
    }
    if (!in) throw IoError("truncated weights file " + where);
    file.tensors.emplace_back(std::move(name), std::move(rec));
  }
  return file;
}

// Loads every parameter of `store` from the file; missing names or shape
// mismatches are errors.
template <typename T>
void load_weights(const std::filesystem::path& path, ParamStore<T>& store) {
  const auto file = read_weights(path);
  std::map<std::string, const WeightsFile::Record*> by_name;
  for (const auto& [name, rec] : file.tensors) by_name[name] = &rec;
  for (auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw IoError("weights file " + path.string() + " lacks tensor " + e.name);
    if (it->second->shape != e.tensor.shape())
      throw DimensionError("tensor " + e.name + " has shape " + shape_str(it->second->shape) + ", model expects " +
                           shape_str(e.tensor.shape()));
    auto dst = e.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
}

}  // namespace deaot
