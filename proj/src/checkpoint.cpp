#include "all4one/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "all4one/errors.hpp"

namespace all4one {

namespace {

constexpr char kMagic[8] = {'A', '4', '1', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError("checkpoint truncated: " + path.string());
  }
  return v;
}

std::string get_string(std::istream& is, std::uint64_t len, const std::filesystem::path& path) {
  std::string s(len, '\0');
  if (len && !is.read(s.data(), static_cast<std::streamsize>(len))) {
    throw IoError("checkpoint truncated: " + path.string());
  }
  return s;
}

}  // namespace

const NamedArray& Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(arrays.begin(), arrays.end(), [&](const auto& a) { return a.name == name; });
  if (it == arrays.end()) throw ContractError("checkpoint has no array named '" + name + "'");
  return *it;
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const auto& a) { return a.name == name; });
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
  arrays.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
}

void Checkpoint::add(const ParameterList& params) {
  for (const auto& p : params) add(p.name, p.tensor);
}

void Checkpoint::restore(const ParameterList& params) const {
  for (const auto& p : params) {
    const auto& a = find(p.name);
    if (a.shape != p.tensor.shape()) {
      throw DimensionError("checkpoint array '" + p.name + "' has shape " + shape_to_string(a.shape) +
                           ", model expects " + shape_to_string(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, ckpt.metadata.size());
  os.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(a.values.data()),
             static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not an all4one checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  Checkpoint ckpt;
  ckpt.metadata = get_string(is, get<std::uint64_t>(is, path), path);
  const auto count = get<std::uint32_t>(is, path);
  ckpt.arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto rank = get<std::uint32_t>(is, path);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(get<std::uint64_t>(is, path));
    a.values.resize(shape_numel(a.shape));
    if (!is.read(reinterpret_cast<char*>(a.values.data()),
                 static_cast<std::streamsize>(a.values.size() * sizeof(double)))) {
      throw IoError("checkpoint truncated in array '" + a.name + "': " + path.string());
    }
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& a : ckpt.arrays) {
    mix(a.name.data(), a.name.size());
    for (auto e : a.shape) mix(&e, sizeof(e));
    mix(a.values.data(), a.values.size() * sizeof(double));
  }
  return h;
}

}  // namespace all4one
