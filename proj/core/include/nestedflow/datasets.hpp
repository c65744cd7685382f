#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace nestedflow {

struct DatasetSpec {
  enum class Kind { eight_gaussians, two_moons, checkerboard, two_spirals };

  Kind kind = Kind::eight_gaussians;
  int64_t n = 8192;
  double noise_std = 0.1;
  uint64_t seed = 0;
  bool normalize = false;

  void validate() const;
};

// Per-coordinate affine map y = (x - shift) / scale applied when
// DatasetSpec::normalize is set; inverse() undoes it exactly.
struct AffineTransform {
  std::array<double, 2> shift{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};

  std::array<double, 2> apply(const std::array<double, 2>& p) const {
    return {(p[0] - shift[0]) / scale[0], (p[1] - shift[1]) / scale[1]};
  }
  std::array<double, 2> inverse(const std::array<double, 2>& p) const {
    return {p[0] * scale[0] + shift[0], p[1] * scale[1] + shift[1]};
  }
};

struct Dataset {
  static constexpr int kDim = 2;

  std::vector<double> points;  // row-major n x 2
  std::vector<int> labels;
  int num_classes = 0;
  AffineTransform transform;  // identity unless normalized

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  std::array<double, 2> point(int64_t i) const {
    return {points[2 * i], points[2 * i + 1]};
  }
};

Dataset generate(const DatasetSpec& spec);

DatasetSpec::Kind dataset_kind_from_string(const std::string& name);
std::string to_string(DatasetSpec::Kind kind);

// CSV dump, one `x,y,label` row per point with LF line endings.
void write_csv(const Dataset& data, std::ostream& out);

}  // namespace nestedflow
