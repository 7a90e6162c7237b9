#pragma once

// Flat binary container: little-endian u32 header length, JSON header
// (array names, shapes, arbitrary metadata), then the raw f64 arrays in
// header order. Used for model checkpoints, cached datasets, and raw
// explanation dumps.

#include <string>
#include <vector>

#include "xiltk/tensor.hpp"

#include <json.hpp>

namespace xiltk {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct ArrayFile {
  nlohmann::json meta;
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
};

void write_array_file(const std::string& path, const ArrayFile& file);
ArrayFile read_array_file(const std::string& path);

}  // namespace xiltk
