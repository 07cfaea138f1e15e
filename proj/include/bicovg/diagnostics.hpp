#pragma once

// Summary numbers over per-layer accuracy curves. A curve is one accuracy
// value per head, in depth order, expressed in percent (0..100). All
// functions validate their inputs and throw std::invalid_argument rather
// than return NaN.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace bicovg {

inline void check_curve(const std::vector<double>& curve, const char* what) {
  if (curve.empty())
    throw std::invalid_argument(std::string(what) + ": empty curve");
  for (double v : curve)
    if (!(v >= 0.0 && v <= 100.0))
      throw std::invalid_argument(std::string(what) +
                                  ": accuracy outside [0, 100]");
}

// Index of the curve's peak; earliest layer wins ties.
inline std::size_t peak_index(const std::vector<double>& curve) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i] > curve[best]) best = i;
  return best;
}

// Accuracy lost past the peak: sum over layers after the peak of how far
// each falls short of it. Zero iff the curve never dips below its peak
// after reaching it.
inline double decline_area(const std::vector<double>& curve) {
  check_curve(curve, "decline_area");
  std::size_t p = peak_index(curve);
  double area = 0;
  for (std::size_t i = p + 1; i < curve.size(); ++i)
    area += std::max(0.0, curve[p] - curve[i]);
  return area;
}

// Mean of the last four layers over the peak. 1.0 means the deep end holds
// everything the best layer reached.
inline double tail_retention(const std::vector<double>& curve) {
  check_curve(curve, "tail_retention");
  if (curve.size() < 4)
    throw std::invalid_argument("tail_retention: need at least 4 layers");
  double peak = curve[peak_index(curve)];
  if (peak <= 0)
    throw std::invalid_argument("tail_retention: peak accuracy is zero");
  double tail = 0;
  for (std::size_t i = curve.size() - 4; i < curve.size(); ++i)
    tail += curve[i];
  return (tail / 4.0) / peak;
}

struct GainSplit {
  double shallow = 0;  // mean gain of curve b over curve a, front half
  double deep = 0;     // same, back half
};

// Compares two curves layer by layer (b minus a) and averages the gains
// over the shallow and deep halves. The halves split after layer
// ceil(L/2) - 1, so a 16-layer curve splits 8 / 8.
inline GainSplit shallow_deep_gain(const std::vector<double>& a,
                                   const std::vector<double>& b) {
  check_curve(a, "shallow_deep_gain");
  check_curve(b, "shallow_deep_gain");
  if (a.size() != b.size())
    throw std::invalid_argument("shallow_deep_gain: curve lengths differ (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  if (a.size() < 2)
    throw std::invalid_argument("shallow_deep_gain: need at least 2 layers");
  std::size_t split = (a.size() + 1) / 2;
  GainSplit g;
  for (std::size_t i = 0; i < split; ++i) g.shallow += b[i] - a[i];
  for (std::size_t i = split; i < a.size(); ++i) g.deep += b[i] - a[i];
  g.shallow /= double(split);
  g.deep /= double(a.size() - split);
  return g;
}

// Participation ratio of a nonnegative weight vector: 1 when one entry
// carries everything, the vector length when all entries are equal.
inline double n_eff(const std::vector<double>& w) {
  if (w.empty()) throw std::invalid_argument("n_eff: empty weight vector");
  double s = 0, s2 = 0;
  for (double v : w) {
    if (v < 0) throw std::invalid_argument("n_eff: negative weight");
    s += v;
    s2 += v * v;
  }
  if (s2 == 0) throw std::invalid_argument("n_eff: all weights zero");
  return s * s / s2;
}

}  // namespace bicovg
