#pragma once

#include <functional>
#include <string>
#include <vector>

namespace msholo {

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Small oracle and property checks that run in a few seconds: propagation
// against a direct DFT, energy and adjoint identities, gradient against
// finite differences, speckle statistics, tensor round trip, calibration
// identity reduction and the memory-effect threshold.
std::vector<SelftestCheck> run_selftest(const std::function<void(const SelftestCheck&)>& report = {});

}  // namespace msholo
