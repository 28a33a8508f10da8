#pragma once

#include <stdexcept>
#include <string>

namespace manifp {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// A pointwise operation was requested inside the pole exclusion band.
struct PoleProximity : Error {
    explicit PoleProximity(const std::string& what) : Error(what) {}
};

/// An operation received an SDE description in the wrong convention.
struct ConventionMismatch : Error {
    explicit ConventionMismatch(const std::string& what) : Error(what) {}
};

/// Grid resolution below the supported minimum (or odd azimuthal count).
struct GridTooSmall : Error {
    explicit GridTooSmall(const std::string& what) : Error(what) {}
};

/// Requested time step violates the explicit stability bound.
struct CflViolation : Error {
    explicit CflViolation(const std::string& what) : Error(what) {}
};

/// Density values became non-finite (or collapsed to zero mass) during a run.
struct NonFiniteDensity : Error {
    explicit NonFiniteDensity(const std::string& what) : Error(what) {}
};

/// A particle state became non-finite during simulation.
struct NonFiniteState : Error {
    explicit NonFiniteState(const std::string& what) : Error(what) {}
};

/// Mismatched grid shapes in a binary grid operation.
struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& what) : Error(what) {}
};

/// Measurement update produced a non-normalizable posterior.
struct DegenerateUpdate : Error {
    explicit DegenerateUpdate(const std::string& what) : Error(what) {}
};

/// Importance weights collapsed (effective sample size below threshold).
struct WeightCollapse : Error {
    explicit WeightCollapse(const std::string& what) : Error(what) {}
};

/// Malformed configuration input.
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(what) {}
};

} // namespace manifp
