#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace needleplan {

enum class ErrorCode {
  InvalidArgument,
  IoError,
  NonRigidTransform,
  MalformedHeader,
  UnsupportedEncoding,
  DimensionMismatch,
  OutOfBounds,
  TooSmall,
  EmptyMask,
  TooFewComponents,
  DegenerateSegment,
  StartOutsideBody,
  OutOfDomain,
  TargetOutsideBody,
  DegenerateNeedle,
  NoConvergence,
  UnreachableGoal,
  DegeneratePath,
  DegenerateConfiguration,
  AmbiguousMatch,
  TooFewDetections,
  InsufficientDiversity,
  SingularSystem,
  BindFailure,
  BadRequest,
  NoVolume,
  NoTarget,
  NoScene,
  NoHeatMap,
  NotFeasible,
  NotReachable,
  NotConfirmed,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonRigidTransform: return "NonRigidTransform";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::TooFewComponents: return "TooFewComponents";
    case ErrorCode::DegenerateSegment: return "DegenerateSegment";
    case ErrorCode::StartOutsideBody: return "StartOutsideBody";
    case ErrorCode::OutOfDomain: return "OutOfDomain";
    case ErrorCode::TargetOutsideBody: return "TargetOutsideBody";
    case ErrorCode::DegenerateNeedle: return "DegenerateNeedle";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::UnreachableGoal: return "UnreachableGoal";
    case ErrorCode::DegeneratePath: return "DegeneratePath";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::AmbiguousMatch: return "AmbiguousMatch";
    case ErrorCode::TooFewDetections: return "TooFewDetections";
    case ErrorCode::InsufficientDiversity: return "InsufficientDiversity";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::BindFailure: return "BindFailure";
    case ErrorCode::BadRequest: return "BadRequest";
    case ErrorCode::NoVolume: return "NoVolume";
    case ErrorCode::NoTarget: return "NoTarget";
    case ErrorCode::NoScene: return "NoScene";
    case ErrorCode::NoHeatMap: return "NoHeatMap";
    case ErrorCode::NotFeasible: return "NotFeasible";
    case ErrorCode::NotReachable: return "NotReachable";
    case ErrorCode::NotConfirmed: return "NotConfirmed";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code; every library failure is one of these.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace needleplan
