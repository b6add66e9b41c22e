#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prf/tensor.hpp"

namespace prf {

// Finite-difference gradient audit of every differentiable module on small
// seeded instances. Returns (module name, max scaled relative error) pairs.
std::vector<std::pair<std::string, double>> gradcheck_suite(
    std::uint64_t seed, double h = 1e-5);

}  // namespace prf
