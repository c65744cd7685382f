#include "nestedflow/paths.hpp"

#include <cmath>

#include "nestedflow/errors.hpp"

namespace nestedflow {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void PathSpec::validate() const {
  if (kind == Kind::variance_preserving) {
    if (!(vp_epsilon > 0.0 && vp_epsilon < 0.5)) {
      throw ConfigError("vp_epsilon must lie in (0, 0.5)");
    }
  }
}

void TimeDist::validate() const {
  if (kind == Kind::lognormal && !(lognormal_sigma > 0.0)) {
    throw ConfigError("lognormal_sigma must be positive");
  }
}

double sample_time(Rng& rng, const TimeDist& dist) {
  dist.validate();
  if (dist.kind == TimeDist::Kind::uniform) {
    return rng.uniform();
  }
  const double z = dist.lognormal_mu + dist.lognormal_sigma * rng.normal();
  return 1.0 / (1.0 + std::exp(-z));
}

double effective_time(const PathSpec& spec, double t) {
  if (spec.kind != PathSpec::Kind::variance_preserving) return t;
  const double lo = spec.vp_epsilon;
  const double hi = 1.0 - spec.vp_epsilon;
  return t < lo ? lo : (t > hi ? hi : t);
}

PathCoeffs path_coeffs(const PathSpec& spec, double t) {
  PathCoeffs c;
  if (spec.kind == PathSpec::Kind::rectified) {
    c.mean_scale_x1 = t;
    c.mean_scale_x0 = 1.0 - t;
    c.sigma = 0.0;
    c.dmean_scale_x1 = 1.0;
    c.dmean_scale_x0 = -1.0;
    c.dsigma = 0.0;
    return c;
  }
  // alpha(1-t) = sin(pi t / 2), sigma_t = cos(pi t / 2)
  const double half_pi = 0.5 * kPi;
  c.mean_scale_x1 = std::sin(half_pi * t);
  c.mean_scale_x0 = 0.0;
  c.sigma = std::cos(half_pi * t);
  c.dmean_scale_x1 = half_pi * std::cos(half_pi * t);
  c.dmean_scale_x0 = 0.0;
  c.dsigma = -half_pi * std::sin(half_pi * t);
  return c;
}

void interpolate(const PathSpec& spec, double t, std::span<const double> x0,
                 std::span<const double> x1, std::span<double> x_t_out,
                 std::span<double> u_out) {
  spec.validate();
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("interpolation time must lie in [0, 1]");
  }
  if (x0.size() != x1.size() || x_t_out.size() != x0.size() || u_out.size() != x0.size()) {
    throw ConfigError("interpolate: mismatched dimensions");
  }
  for (size_t i = 0; i < x0.size(); ++i) {
    if (!std::isfinite(x0[i]) || !std::isfinite(x1[i])) {
      throw NumericError("interpolate: non-finite input coordinate");
    }
  }

  if (spec.kind == PathSpec::Kind::rectified) {
    for (size_t i = 0; i < x0.size(); ++i) {
      x_t_out[i] = t * x1[i] + (1.0 - t) * x0[i];
      u_out[i] = x1[i] - x0[i];
    }
    return;
  }

  const double tc = effective_time(spec, t);
  const PathCoeffs c = path_coeffs(spec, tc);
  for (size_t i = 0; i < x0.size(); ++i) {
    const double mean = c.mean_scale_x1 * x1[i];
    const double xt = mean + c.sigma * x0[i];
    // u = (x_t - mean) * sigma' / sigma + mean'
    u_out[i] = (xt - mean) * (c.dsigma / c.sigma) + c.dmean_scale_x1 * x1[i];
    x_t_out[i] = xt;
  }
}

PathSample draw_path_sample(const PathSpec& spec, Rng& rng, const TimeDist& dist,
                            std::span<const double> x1) {
  PathSample s;
  const size_t dim = x1.size();
  s.x1.assign(x1.begin(), x1.end());
  s.x0.resize(dim);
  for (size_t i = 0; i < dim; ++i) s.x0[i] = rng.normal();
  s.t = sample_time(rng, dist);
  s.x_t.resize(dim);
  s.u_target.resize(dim);
  interpolate(spec, s.t, s.x0, s.x1, s.x_t, s.u_target);
  return s;
}

}  // namespace nestedflow
