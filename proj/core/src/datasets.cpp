#include "nestedflow/datasets.hpp"

#include <charconv>
#include <cmath>
#include <ostream>

#include "nestedflow/errors.hpp"
#include "nestedflow/rng.hpp"

namespace nestedflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

void append_double(std::string& line, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  line.append(buf, res.ptr);
}

}  // namespace

void DatasetSpec::validate() const {
  if (n < 1) throw ConfigError("dataset size must be at least 1");
  if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
}

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, /*stream=*/1);

  Dataset data;
  data.points.resize(2 * spec.n);
  data.labels.resize(spec.n);

  switch (spec.kind) {
    case DatasetSpec::Kind::eight_gaussians: {
      data.num_classes = 8;
      for (int64_t i = 0; i < spec.n; ++i) {
        const int mode = static_cast<int>(i % 8);
        const double angle = 2.0 * kPi * mode / 8.0;
        data.points[2 * i] = 2.0 * std::cos(angle) + spec.noise_std * rng.normal();
        data.points[2 * i + 1] = 2.0 * std::sin(angle) + spec.noise_std * rng.normal();
        data.labels[i] = mode;
      }
      break;
    }
    case DatasetSpec::Kind::two_moons: {
      data.num_classes = 2;
      for (int64_t i = 0; i < spec.n; ++i) {
        const int side = static_cast<int>(i % 2);
        const double angle = kPi * rng.uniform();
        double x, y;
        if (side == 0) {
          x = std::cos(angle);
          y = std::sin(angle);
        } else {
          x = 1.0 - std::cos(angle);
          y = 0.5 - std::sin(angle);
        }
        data.points[2 * i] = x + spec.noise_std * rng.normal();
        data.points[2 * i + 1] = y + spec.noise_std * rng.normal();
        data.labels[i] = side;
      }
      break;
    }
    case DatasetSpec::Kind::checkerboard: {
      // 4x4 grid on [-2, 2]^2; only cells with even (ix + iy) carry mass.
      // Within that active set column parity splits the cells into the two
      // label classes.
      data.num_classes = 2;
      for (int64_t i = 0; i < spec.n; ++i) {
        int ix, iy;
        do {
          ix = static_cast<int>(rng.below(4));
          iy = static_cast<int>(rng.below(4));
        } while ((ix + iy) % 2 != 0);
        const double x = -2.0 + (ix + rng.uniform());
        const double y = -2.0 + (iy + rng.uniform());
        data.points[2 * i] = x + spec.noise_std * rng.normal();
        data.points[2 * i + 1] = y + spec.noise_std * rng.normal();
        data.labels[i] = ix % 2;
      }
      break;
    }
    case DatasetSpec::Kind::two_spirals: {
      data.num_classes = 2;
      const double max_angle = 3.0 * kPi;
      for (int64_t i = 0; i < spec.n; ++i) {
        const int arm = static_cast<int>(i % 2);
        const double u = rng.uniform();
        const double angle = max_angle * std::sqrt(u);  // denser toward the rim
        const double radius = 2.0 * angle / max_angle;
        const double sign = arm == 0 ? 1.0 : -1.0;
        data.points[2 * i] = sign * radius * std::cos(angle) + spec.noise_std * rng.normal();
        data.points[2 * i + 1] = sign * radius * std::sin(angle) + spec.noise_std * rng.normal();
        data.labels[i] = arm;
      }
      break;
    }
  }

  if (spec.normalize) {
    for (int c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (int64_t i = 0; i < spec.n; ++i) mean += data.points[2 * i + c];
      mean /= static_cast<double>(spec.n);
      double var = 0.0;
      for (int64_t i = 0; i < spec.n; ++i) {
        const double d = data.points[2 * i + c] - mean;
        var += d * d;
      }
      var /= static_cast<double>(spec.n);
      const double stddev = var > 0.0 ? std::sqrt(var) : 1.0;
      data.transform.shift[c] = mean;
      data.transform.scale[c] = stddev;
      for (int64_t i = 0; i < spec.n; ++i) {
        data.points[2 * i + c] = (data.points[2 * i + c] - mean) / stddev;
      }
    }
  }
  return data;
}

DatasetSpec::Kind dataset_kind_from_string(const std::string& name) {
  if (name == "eight_gaussians") return DatasetSpec::Kind::eight_gaussians;
  if (name == "two_moons") return DatasetSpec::Kind::two_moons;
  if (name == "checkerboard") return DatasetSpec::Kind::checkerboard;
  if (name == "two_spirals") return DatasetSpec::Kind::two_spirals;
  throw ConfigError("unknown dataset kind: " + name);
}

std::string to_string(DatasetSpec::Kind kind) {
  switch (kind) {
    case DatasetSpec::Kind::eight_gaussians: return "eight_gaussians";
    case DatasetSpec::Kind::two_moons: return "two_moons";
    case DatasetSpec::Kind::checkerboard: return "checkerboard";
    case DatasetSpec::Kind::two_spirals: return "two_spirals";
  }
  throw ConfigError("invalid dataset kind");
}

void write_csv(const Dataset& data, std::ostream& out) {
  out << "x,y,label\n";
  std::string line;
  for (int64_t i = 0; i < data.size(); ++i) {
    line.clear();
    append_double(line, data.points[2 * i]);
    line.push_back(',');
    append_double(line, data.points[2 * i + 1]);
    line.push_back(',');
    line += std::to_string(data.labels[i]);
    line.push_back('\n');
    out << line;
  }
}

}  // namespace nestedflow
