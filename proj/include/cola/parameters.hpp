#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cola/error.hpp"
#include "cola/tensor.hpp"
#include "cola/util.hpp"

namespace cola {

/// Shared parameters move between city models; private ones never do.
enum class Group : std::uint8_t { Shared = 0, Private = 1 };

inline const char* to_string(Group g) { return g == Group::Shared ? "shared" : "private"; }

struct NamedParameter {
  std::string name;
  Tensor tensor;
  Group group;
};

/// Ordered, named collection of parameter tensors tagged shared or private.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor tensor, Group group) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor), group});
    return entries_.back().tensor;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<NamedParameter>& entries() const noexcept { return entries_; }
  std::vector<NamedParameter>& entries() noexcept { return entries_; }

  const NamedParameter& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw RegistryError("no parameter named '" + name + "'");
    return entries_[it->second];
  }
  NamedParameter& entry(const std::string& name) {
    return const_cast<NamedParameter&>(std::as_const(*this).entry(name));
  }
  Tensor& at(const std::string& name) { return entry(name).tensor; }
  const Tensor& at(const std::string& name) const { return entry(name).tensor; }

  /// Handles onto every tensor (storage is shared, not copied).
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  std::vector<std::string> names(Group group) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.group == group) out.push_back(e.name);
    return out;
  }

  /// Entries of one group; tensors alias this set's storage.
  ParameterSet view(Group group) const {
    ParameterSet out;
    for (const auto& e : entries_)
      if (e.group == group) out.add(e.name, e.tensor, e.group);
    return out;
  }

  ParameterSet deep_copy() const {
    ParameterSet out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.deep_copy(), e.group);
    return out;
  }

  void set_all(Group group) {
    for (auto& e : entries_) e.group = group;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

 private:
  std::vector<NamedParameter> entries_;
  std::map<std::string, std::size_t> index_;
};

/// True when both tensors hold the same shape and bit-identical values.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

/// Compares the entries of `group` in both sets by name, shape and bits.
inline bool bitwise_equal(const ParameterSet& a, const ParameterSet& b, Group group) {
  const auto names = a.names(group);
  if (names != b.names(group)) return false;
  for (const auto& name : names) {
    if (!bitwise_equal(a.at(name), b.at(name))) return false;
  }
  return true;
}

inline bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  return bitwise_equal(a, b, Group::Shared) && bitwise_equal(a, b, Group::Private);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary layout (little-endian):
//   "COLACKPT" u32 version u64 count
//   per entry: u32 name_len, name, u8 group, u32 rank, u64 dims[rank],
//              f64 values[product(dims)]
// A text manifest "<path>.manifest" lists name, group and shape per entry.

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {
template <typename T>
void write_pod(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw IoError("truncated checkpoint");
  return value;
}
inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'L', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParameterSet& params) {
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod(os, detail::kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& e : params.entries()) {
    detail::write_pod(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_pod(os, static_cast<std::uint8_t>(e.group));
    detail::write_pod(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) detail::write_pod(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(e.tensor.ptr()),
             static_cast<std::streamsize>(e.tensor.size() * sizeof(double)));
  }
}

inline ParameterSet read_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint (bad magic)");
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != detail::kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_pod<std::uint64_t>(is);
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto group = detail::read_pod<std::uint8_t>(is);
    if (group > 1) throw IoError("bad group tag for '" + name + "'");
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint data for '" + name + "'");
    params.add(std::move(name), Tensor(std::move(shape), std::move(values), true),
               static_cast<Group>(group));
  }
  return params;
}

inline std::string checkpoint_manifest(const ParameterSet& params) {
  std::ostringstream os;
  os << "# name\tgroup\tshape\n";
  for (const auto& e : params.entries()) {
    os << e.name << '\t' << to_string(e.group) << '\t' << shape_string(e.tensor.shape())
       << '\n';
  }
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    write_checkpoint(os, params);
  }
  std::ofstream manifest(path.string() + ".manifest", std::ios::trunc);
  if (!manifest) throw IoError("cannot write manifest for " + path.string());
  manifest << checkpoint_manifest(params);
}

inline ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  return read_checkpoint(is);
}

/// FNV-1a hash over the serialized bytes of a parameter set.
inline std::uint64_t checkpoint_hash(const ParameterSet& params) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, params);
  return fnv1a(os.str());
}

}  // namespace cola
