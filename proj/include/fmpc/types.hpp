#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>

namespace fmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Scalar-valued signal t -> R.
using ScalarFn = std::function<double(double)>;
/// Vector-valued signal t -> R^m.
using VectorFn = std::function<Vec(double)>;

enum class ErrorCode {
  NonPositiveFunnel,
  DimensionMismatch,
  InitialErrorOutsideFunnel,
  DomainViolation,
  NonFinite,
  StepIncompatibleWithPartition,
  TimeMismatch,
  NotPositiveDefinite,
  SingularG,
  NoFeasiblePoint,
  OcpInfeasible,
  PredictionOutsideFunnel,
  MeasurementOutsideEnvelope,
  DataInputTooLarge,
  InfeasibleProjection,
  LearnerReturnedInfeasibleModel,
  ConfigError,
};

/// Error type carrying a machine-readable code plus context index where
/// applicable (e.g. the first funnel index violated).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, long index = -1)
      : std::runtime_error(what), code_(code), index_(index) {}
  ErrorCode code() const { return code_; }
  long index() const { return index_; }

 private:
  ErrorCode code_;
  long index_;
};

/// Cost value in R>=0 united with infinity. The saturation cap stands in for
/// infinity wherever a finite ordering value is needed; it is never reported
/// as a true cost.
struct ExtendedCost {
  static constexpr double kSaturation = 1e12;

  double value = 0.0;
  bool infinite = false;

  static ExtendedCost finite(double v) { return {v, false}; }
  static ExtendedCost inf() { return {kSaturation, true}; }

  /// Finite value for comparisons; infinite costs all collapse to the cap.
  double ordering_value() const { return infinite ? kSaturation : value; }

  ExtendedCost& operator+=(const ExtendedCost& o) {
    if (infinite || o.infinite) {
      infinite = true;
      value = kSaturation;
    } else {
      value += o.value;
    }
    return *this;
  }
  ExtendedCost& operator+=(double v) { return *this += finite(v); }
  friend ExtendedCost operator+(ExtendedCost a, const ExtendedCost& b) { return a += b; }
  friend ExtendedCost operator*(double s, const ExtendedCost& c) {
    if (c.infinite) return c;
    return finite(s * c.value);
  }
  bool operator<(const ExtendedCost& o) const { return ordering_value() < o.ordering_value(); }
};

/// Relative strictness margin: "strictly inside" means norm <= bound*(1 - kStrictMargin),
/// making floating-point boundary grazing deterministic.
inline constexpr double kStrictMargin = 1e-9;

/// True when nrm is strictly inside the bound with the relative margin.
inline bool strictly_inside(double nrm, double bound) {
  return nrm <= bound - kStrictMargin * bound;
}

}  // namespace fmpc
