#pragma once

#include <span>
#include <vector>

#include "nestedflow/rng.hpp"

namespace nestedflow {

// Conditional probability path between the prior draw x0 and the data point
// x1. The rectified path is the straight line x_t = t*x1 + (1-t)*x0 with the
// constant target x1 - x0. The variance-preserving path uses the cosine
// schedule alpha(s) = cos(pi*s/2):
//   mean_t  = alpha(1-t) * x1 = sin(pi*t/2) * x1
//   sigma_t = cos(pi*t/2),  so alpha(1-t)^2 + sigma_t^2 = 1 exactly.
// sigma_t vanishes at t = 1, so VP evaluation clamps t into
// [vp_epsilon, 1 - vp_epsilon].
struct PathSpec {
  enum class Kind { rectified, variance_preserving };

  Kind kind = Kind::rectified;
  double vp_epsilon = 1e-3;

  void validate() const;
};

// One drawn training tuple.
struct PathSample {
  double t = 0.0;
  std::vector<double> x_t;
  std::vector<double> u_target;
  std::vector<double> x0;
  std::vector<double> x1;
};

// Distribution of the training time t. The lognormal option is realized as
// the logistic of a normal draw (logit-normal), so samples stay in (0, 1).
struct TimeDist {
  enum class Kind { uniform, lognormal };

  Kind kind = Kind::uniform;
  double lognormal_mu = 0.0;
  double lognormal_sigma = 1.0;

  void validate() const;
};

double sample_time(Rng& rng, const TimeDist& dist);

// Mean/std of the conditional path and their time derivatives, evaluated for
// a single coordinate pair (x0_i, x1_i). VP times must already be clamped.
struct PathCoeffs {
  double mean_scale_x1 = 0.0;   // d(mean)/d(x1)
  double mean_scale_x0 = 0.0;   // d(mean)/d(x0); zero for VP
  double sigma = 0.0;
  double dmean_scale_x1 = 0.0;  // time derivative of mean_scale_x1
  double dmean_scale_x0 = 0.0;
  double dsigma = 0.0;
};

PathCoeffs path_coeffs(const PathSpec& spec, double t);

// Clamp applied before VP evaluation; identity for the rectified path.
double effective_time(const PathSpec& spec, double t);

// Evaluates (x_t, u_target) from Eq. with analytic mean/std derivatives.
// Throws NumericError when any input coordinate is non-finite, ConfigError
// when t is outside [0, 1].
void interpolate(const PathSpec& spec, double t, std::span<const double> x0,
                 std::span<const double> x1, std::span<double> x_t_out,
                 std::span<double> u_out);

PathSample draw_path_sample(const PathSpec& spec, Rng& rng, const TimeDist& dist,
                            std::span<const double> x1);

}  // namespace nestedflow
