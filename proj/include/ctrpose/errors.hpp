#pragma once

#include <stdexcept>
#include <string>

namespace ctrpose {

// Base class for every error this library raises on contract violations.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BehindCameraError : Error {
  using Error::Error;
};
struct NonFiniteError : Error {
  using Error::Error;
};
struct JointLimitError : Error {
  using Error::Error;
};
struct TooFewPointsError : Error {
  using Error::Error;
};
struct DivergedError : Error {
  using Error::Error;
};
struct SingularHessianError : Error {
  using Error::Error;
};
struct EmptyFrustumError : Error {
  using Error::Error;
};
struct ShapeMismatchError : Error {
  using Error::Error;
};
struct UnknownSceneError : Error {
  using Error::Error;
};
struct SamplingExhaustedError : Error {
  using Error::Error;
};
struct UnreachableError : Error {
  using Error::Error;
};
struct EmptyInputError : Error {
  using Error::Error;
};
struct EmptyPointsError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace ctrpose
