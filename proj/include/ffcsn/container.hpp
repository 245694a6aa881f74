#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ffcsn/tensor.hpp"

// Binary tensor container, used both for dataset sample files and for
// training checkpoints.
//
// Layout: magic "FFCS", u32 version, u32 entry count; per entry:
//   u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 ndim,
//   ndim x u64 dims, raw little-endian values.

namespace ffcsn {

static_assert(std::endian::native == std::endian::little,
              "container serialization assumes a little-endian host");

class TensorContainer {
 public:
  static constexpr std::uint32_t kVersion = 1;

  using F32 = std::vector<float>;
  using F64 = std::vector<double>;

  struct Entry {
    Shape dims;
    std::variant<F32, F64> values;
  };

  void put_f32(const std::string& name, Shape dims, F32 values) {
    insert(name, Entry{std::move(dims), std::move(values)});
  }
  void put_f64(const std::string& name, Shape dims, F64 values) {
    insert(name, Entry{std::move(dims), std::move(values)});
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const Entry& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::runtime_error("container: no entry named '" + name + "'");
    return it->second;
  }

  const F32& get_f32(const std::string& name) const {
    const Entry& e = get(name);
    if (!std::holds_alternative<F32>(e.values))
      throw std::runtime_error("container: entry '" + name + "' is not f32");
    return std::get<F32>(e.values);
  }

  const F64& get_f64(const std::string& name) const {
    const Entry& e = get(name);
    if (!std::holds_alternative<F64>(e.values))
      throw std::runtime_error("container: entry '" + name + "' is not f64");
    return std::get<F64>(e.values);
  }

  double get_scalar(const std::string& name) const {
    const Entry& e = get(name);
    if (shape_numel(e.dims) != 1)
      throw std::runtime_error("container: entry '" + name + "' is not a scalar");
    return std::holds_alternative<F32>(e.values)
               ? static_cast<double>(std::get<F32>(e.values)[0])
               : std::get<F64>(e.values)[0];
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("container: cannot open '" + path + "' for writing");
    out.write("FFCS", 4);
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      if (name.size() > 0xFFFF)
        throw std::runtime_error("container: entry name too long: " + name);
      write_pod(out, static_cast<std::uint16_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      const std::uint8_t dtype = std::holds_alternative<F32>(e.values) ? 0 : 1;
      write_pod(out, dtype);
      write_pod(out, static_cast<std::uint8_t>(e.dims.size()));
      for (std::size_t d : e.dims) write_pod(out, static_cast<std::uint64_t>(d));
      if (dtype == 0) {
        const auto& v = std::get<F32>(e.values);
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(float)));
      } else {
        const auto& v = std::get<F64>(e.values);
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
      }
    }
    if (!out) throw std::runtime_error("container: write failed for '" + path + "'");
  }

  static TensorContainer read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FFCS", 4) != 0)
      throw std::runtime_error("container: bad magic in '" + path + "'");
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kVersion)
      throw std::runtime_error("container: unsupported version " + std::to_string(version) +
                               " in '" + path + "'");
    const auto count = read_pod<std::uint32_t>(in, path);
    TensorContainer c;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = read_pod<std::uint16_t>(in, path);
      std::string name(name_len, '\0');
      in.read(name.data(), name_len);
      if (!in) throw std::runtime_error("container: truncated file '" + path + "'");
      const auto dtype = read_pod<std::uint8_t>(in, path);
      if (dtype > 1)
        throw std::runtime_error("container: unknown dtype in '" + path + "'");
      const auto ndim = read_pod<std::uint8_t>(in, path);
      Shape dims(ndim);
      std::size_t numel = 1;
      for (auto& d : dims) {
        d = static_cast<std::size_t>(read_pod<std::uint64_t>(in, path));
        numel *= d;
      }
      Entry e;
      e.dims = std::move(dims);
      if (dtype == 0) {
        F32 v(numel);
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        e.values = std::move(v);
      } else {
        F64 v(numel);
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        e.values = std::move(v);
      }
      if (!in) throw std::runtime_error("container: truncated file '" + path + "'");
      if (c.entries_.count(name))
        throw std::runtime_error("container: duplicate entry '" + name + "' in '" + path + "'");
      c.entries_.emplace(std::move(name), std::move(e));
    }
    in.peek();
    if (!in.eof())
      throw std::runtime_error("container: trailing bytes in '" + path + "'");
    return c;
  }

 private:
  void insert(const std::string& name, Entry entry) {
    const bool ok = std::visit(
        [&](const auto& v) { return shape_numel(entry.dims) == v.size(); }, entry.values);
    if (!ok)
      throw std::invalid_argument("container: entry '" + name + "' value count mismatch");
    if (entries_.count(name))
      throw std::invalid_argument("container: duplicate entry '" + name + "'");
    entries_.emplace(name, std::move(entry));
  }

  template <class T>
  static void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <class T>
  static T read_pod(std::ifstream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("container: truncated file '" + path + "'");
    return v;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace ffcsn
