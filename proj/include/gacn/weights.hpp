#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gacn/tensor.hpp"

namespace gacn {

/// Named parameter tensors in a fixed insertion order.
class WeightStore {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor t);
  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  /// Independent deep copy; every tensor in the copy requires gradients.
  WeightStore clone() const;

 private:
  std::vector<Entry> entries_;
};

inline constexpr char kWeightMagic[4] = {'G', 'A', 'C', 'N'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

/// Writes "GACN", version, record count, then per tensor:
/// u32 name length, name bytes, u32 rank, u64 dims, f32 payload (all little-endian).
void write_weights(std::ostream& os, const WeightStore& w);
/// Reads the layout written by write_weights. Every record must match the name
/// and shape of the corresponding tensor in `layout`.
WeightStore read_weights(std::istream& is, const WeightStore& layout);

void save_weights(const WeightStore& w, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path, const WeightStore& layout);

/// Rounds every parameter to the nearest float32 so it survives the f32 file payload.
void round_to_float(WeightStore& w);

namespace binio {
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f32(std::ostream& os, float v);
void put_f64(std::ostream& os, double v);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
float get_f32(std::istream& is);
double get_f64(std::istream& is);
}  // namespace binio

}  // namespace gacn
