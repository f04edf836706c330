#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trunet/gradcheck.hpp"

namespace trunet {

struct GradCheckRow {
  std::string name;
  std::string kind;  // "primitive" or "block"
  GradCheckReport report;
  double seconds = 0.0;
};

/// Names of every registered check, primitives first.
std::vector<std::string> gradcheck_names();

/// Runs the registered double-precision finite-difference checks (eps 1e-6,
/// tolerance 1e-4) on random toy shapes drawn from `seed`. `only` restricts
/// the run to one name; unknown names throw UsageError.
std::vector<GradCheckRow> run_gradcheck_suite(const std::string& only = "", uint64_t seed = 0);

}  // namespace trunet
