#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace toposeg::gradcheck {

/// Shared pass threshold for the finite-difference comparisons.
constexpr double kTolerance = 1e-4;

struct Entry {
    std::string name;
    double max_err = 0.0; // worst relative error across the runs
    int runs = 0;
};

/// Central-finite-difference audit of every differentiable operation, the
/// box-counting descriptor stack, and every loss term: 10 seeded random
/// inputs per entry, drawn away from ties and clamp thresholds so the
/// comparison is well posed. The stop_gradient entry instead reports the
/// largest gradient magnitude observed behind the barrier, which must be
/// exactly zero.
std::vector<Entry> run_suite(uint64_t seed);

bool entry_passes(const Entry& e);
double worst(const std::vector<Entry>& entries);
bool all_pass(const std::vector<Entry>& entries);

/// [{"name": ..., "max_err": ..., "runs": ..., "pass": ...}, ...]
std::string to_json(const std::vector<Entry>& entries);

} // namespace toposeg::gradcheck
