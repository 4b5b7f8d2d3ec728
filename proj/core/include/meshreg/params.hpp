#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace meshreg {

/// A named view over one flat parameter tensor. Optimizers and the
/// gradient checker address parameters through lists of these.
struct ParamSpan {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
};

inline std::size_t total_size(const std::vector<ParamSpan>& spans) {
  std::size_t n = 0;
  for (const ParamSpan& s : spans) n += s.size;
  return n;
}

inline std::vector<double> gather(const std::vector<ParamSpan>& spans) {
  std::vector<double> flat;
  flat.reserve(total_size(spans));
  for (const ParamSpan& s : spans) flat.insert(flat.end(), s.data, s.data + s.size);
  return flat;
}

inline void scatter(const std::vector<ParamSpan>& spans, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (const ParamSpan& s : spans) {
    for (std::size_t i = 0; i < s.size; ++i) s.data[i] = flat[off + i];
    off += s.size;
  }
}

/// Name of the tensor owning flat offset `index`, plus the within-tensor
/// offset, for error messages.
inline std::string locate(const std::vector<ParamSpan>& spans, std::size_t index) {
  for (const ParamSpan& s : spans) {
    if (index < s.size) return s.name + "[" + std::to_string(index) + "]";
    index -= s.size;
  }
  return "<out of range>";
}

}  // namespace meshreg
