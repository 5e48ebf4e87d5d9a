#include "dualsc/rng.hpp"

#include <cmath>

namespace dualsc {

float SeededRng::normal(float mean, float stddev) {
  if (has_spare_) {
    has_spare_ = false;
    return mean + stddev * spare_;
  }
  float u1 = next_unit();
  float u2 = next_unit();
  while (u1 <= 1e-12f) u1 = next_unit();
  const float r = std::sqrt(-2.0f * std::log(u1));
  const float theta = 6.28318530717958647692f * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return mean + stddev * r * std::cos(theta);
}

}  // namespace dualsc
