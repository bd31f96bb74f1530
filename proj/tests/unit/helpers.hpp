#pragma once

#include <bit>
#include <cstdint>
#include <random>
#include <vector>

#include "taskvec/param.hpp"

namespace th {

inline taskvec::ParamLayout flat(std::size_t n) {
  taskvec::ParamLayout l;
  l.append("w", {n}, taskvec::EntryKind::BackboneWeight);
  return l;
}

inline taskvec::ParamVector vec(std::vector<double> v) {
  const auto n = v.size();
  return taskvec::ParamVector(flat(n), std::move(v));
}

inline taskvec::ParamVector randn(const taskvec::ParamLayout& layout, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  taskvec::ParamVector v(layout);
  for (auto& x : v.values()) x = n(rng);
  return v;
}

template <class A, class B>
bool bitwise_equal(const A& a, const B& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(double(a[i])) != std::bit_cast<std::uint64_t>(double(b[i]))) return false;
  return true;
}

}  // namespace th
