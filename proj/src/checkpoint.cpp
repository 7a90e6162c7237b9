#include "xiltk/checkpoint.hpp"

#include <cstdint>
#include <fstream>

namespace xiltk {

const NamedArray& ArrayFile::at(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw TensorError("array file: no array named '" + name + "'");
}

void write_array_file(const std::string& path, const ArrayFile& file) {
  nlohmann::json header = file.meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : file.arrays)
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  XILTK_CHECK(out.good(), "cannot open '" + path + "' for writing");
  uint32_t len = static_cast<uint32_t>(hs.size());
  char lenb[4] = {char(len & 0xff), char((len >> 8) & 0xff), char((len >> 16) & 0xff),
                  char((len >> 24) & 0xff)};
  out.write(lenb, 4);
  out.write(hs.data(), hs.size());
  for (const auto& a : file.arrays)
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  XILTK_CHECK(out.good(), "write failed for '" + path + "'");
}

ArrayFile read_array_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  XILTK_CHECK(in.good(), "cannot open '" + path + "'");
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  XILTK_CHECK(in.good(), "truncated header in '" + path + "'");
  uint32_t len = lenb[0] | (uint32_t(lenb[1]) << 8) | (uint32_t(lenb[2]) << 16) |
                 (uint32_t(lenb[3]) << 24);
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  XILTK_CHECK(in.good(), "truncated header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(hs);
  ArrayFile file;
  file.meta = header;
  file.meta.erase("arrays");
  for (const auto& e : header.at("arrays")) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.shape = e.at("shape").get<Shape>();
    int64_t n = 1;
    for (auto d : a.shape) n *= d;
    a.data.resize(n);
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    XILTK_CHECK(in.good(), "truncated array '" + a.name + "' in '" + path + "'");
    file.arrays.push_back(std::move(a));
  }
  return file;
}

}  // namespace xiltk
