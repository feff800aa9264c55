#pragma once

#include <cmath>
#include <stdexcept>

namespace submerge {

// Storage is f32, arithmetic is f64. Pushing a value through float yields
// exactly what a round trip through an on-disk archive yields.
inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// Snap x onto a dyadic grid with the given step (a power of two).
inline double quantize_grid(double x, double step) {
  return std::nearbyint(x / step) * step;
}

// Affinities and squared cosines live in [0,1]. A few ulp of drift is
// clamped; anything beyond `slack` means a broken identity and is an error,
// never a silent clamp.
template <typename Scalar>
Scalar clamp_unit(Scalar v, Scalar slack = Scalar(1e-9)) {
  if (v < -slack || v > Scalar(1) + slack)
    throw std::logic_error("value outside [0,1] beyond numerical slack");
  return v < Scalar(0) ? Scalar(0) : (v > Scalar(1) ? Scalar(1) : v);
}

// Affinity scores additionally snap to the exact endpoints so that
// threshold comparisons stay reproducible when inputs are exactly aligned
// or exactly orthogonal up to rounding.
template <typename Scalar>
Scalar snap_unit(Scalar v, Scalar snap = Scalar(1e-12)) {
  if (v >= Scalar(1) - snap) return Scalar(1);
  if (v <= snap) return Scalar(0);
  return v;
}

}  // namespace submerge
