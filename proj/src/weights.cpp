#include "gacn/weights.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "gacn/image.hpp"

namespace gacn {

void WeightStore::add(std::string name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("duplicate weight name " + name);
  entries_.emplace_back(std::move(name), std::move(t));
}

bool WeightStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.first == name; });
}

const Tensor& WeightStore::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw std::out_of_range("no weight named " + std::string(name));
}

Tensor& WeightStore::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

std::size_t WeightStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void WeightStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

WeightStore WeightStore::clone() const {
  WeightStore out;
  for (const auto& [name, t] : entries_) {
    Tensor c = t.clone();
    c.set_requires_grad(true);
    out.add(name, c);
  }
  return out;
}

void round_to_float(WeightStore& w) {
  for (auto& e : w) {
    for (double& v : e.second.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

namespace binio {

static_assert(std::endian::native == std::endian::little, "binary IO assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw DataError("unexpected end of binary stream");
  }
  return v;
}

void put_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void put_f32(std::ostream& os, float v) { put(os, v); }
void put_f64(std::ostream& os, double v) { put(os, v); }
std::uint32_t get_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get<std::uint64_t>(is); }
float get_f32(std::istream& is) { return get<float>(is); }
double get_f64(std::istream& is) { return get<double>(is); }

}  // namespace binio

void write_weights(std::ostream& os, const WeightStore& w) {
  os.write(kWeightMagic, 4);
  binio::put_u32(os, kWeightFormatVersion);
  binio::put_u64(os, w.size());
  for (const auto& [name, t] : w) {
    binio::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) binio::put_u64(os, d);
    for (double v : t.values()) binio::put_f32(os, static_cast<float>(v));
  }
}

WeightStore read_weights(std::istream& is, const WeightStore& layout) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kWeightMagic, 4) != 0) {
    throw DataError("not a GACN weight file (bad magic)");
  }
  const std::uint32_t version = binio::get_u32(is);
  if (version != kWeightFormatVersion) {
    throw DataError("unsupported weight format version " + std::to_string(version));
  }
  const std::uint64_t count = binio::get_u64(is);
  if (count != layout.size()) {
    throw DataError("weight file has " + std::to_string(count) + " tensors, architecture needs " +
                    std::to_string(layout.size()));
  }
  WeightStore out;
  for (const auto& [expected_name, expected] : layout) {
    const std::uint32_t len = binio::get_u32(is);
    if (len > 4096) throw DataError("implausible weight name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated weight name");
    if (name != expected_name) {
      throw DataError("weight record '" + name + "' where '" + expected_name + "' was expected");
    }
    const std::uint32_t rank = binio::get_u32(is);
    if (rank > 8) throw DataError("implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = binio::get_u64(is);
    if (shape != expected.shape()) {
      throw DataError("shape mismatch for " + name + ": file " + shape_string(shape) +
                      ", architecture " + shape_string(expected.shape()));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = binio::get_f32(is);
    out.add(name, Tensor(shape, std::move(values), true));
  }
  return out;
}

void save_weights(const WeightStore& w, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_weights(os, w);
  if (!os) throw DataError("write failed for " + path.string());
}

WeightStore load_weights(const std::filesystem::path& path, const WeightStore& layout) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open weight file " + path.string());
  return read_weights(is, layout);
}

}  // namespace gacn
