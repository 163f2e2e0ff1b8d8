#include "mvagg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mvagg {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated while reading " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
    for (float v : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw IoError("checkpoint: write failed: " + path.string());
}

std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  const uint32_t version = get_u32(is, "version");
  if (version != kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = get_u32(is, "entry count");
  std::map<std::string, Tensor> out;
  for (uint32_t e = 0; e < count; ++e) {
    const uint32_t name_len = get_u32(is, "name length");
    if (name_len > 4096) throw IoError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint: truncated name");
    const uint32_t ndim = get_u32(is, "rank");
    if (ndim > 8) throw IoError("checkpoint: implausible rank");
    std::vector<int> shape(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<int>(get_u32(is, "extent"));
      numel *= shape[d];
    }
    if (numel < 0 || numel > (1LL << 31)) throw IoError("checkpoint: implausible tensor size");
    Tensor t(shape);
    for (int64_t i = 0; i < numel; ++i) {
      uint32_t bits = get_u32(is, "data");
      float v;
      std::memcpy(&v, &bits, 4);
      t.data[static_cast<size_t>(i)] = v;
    }
    if (out.count(name)) throw IoError("checkpoint: duplicate entry '" + name + "'");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace mvagg
