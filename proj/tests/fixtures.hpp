#pragma once

// Planted tasks shared across test files; built once per process.

#include "crl/planted.hpp"

namespace crl::testing {

inline const PlantedTask& default_planted() {
  static const PlantedTask task = make_planted_task(PlantedTaskSpec{});
  return task;
}

}  // namespace crl::testing
