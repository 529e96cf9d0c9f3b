#pragma once

// Finite-difference gradient checks for every primitive and for the memory
// composites, plus a handful of runtime invariants, on toy shapes.

#include <cstdint>
#include <string>
#include <vector>

namespace memts {

enum class CheckKind { Primitive, Composite, Invariant };

struct CheckResult {
    std::string name;
    CheckKind kind = CheckKind::Primitive;
    double max_rel_error = 0.0;  // invariants report 0 or 1
    double tolerance = 0.0;
    bool passed = false;
    std::string detail;
};

struct SelfCheckOptions {
    std::uint64_t seed = 7;
    /// Primitive whose gradient is negated for the duration of the run.
    std::string inject_fault;
};

struct SelfCheckReport {
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const;
    std::size_t failures() const;
    /// One line per check, then a summary line.
    std::string format() const;
};

inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kCompositeTolerance = 1e-3;

SelfCheckReport run_selfcheck(const SelfCheckOptions& options = {});

}  // namespace memts
