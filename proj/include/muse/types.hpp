#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace muse {

// Activations and images are stored as (positions x channels), row-major, so
// a batch of B images of HxW is a (B*H*W) x C matrix.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

inline constexpr int kImageSize = 32;
inline constexpr int kImagePixels = kImageSize * kImageSize;
inline constexpr int kImageChannels = 3;
inline constexpr int kNumEmotions = 8;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for arithmetic outside its numeric domain (e.g. alpha_bar ~ 0).
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's calling contract.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Training ran to completion but missed its quality floor/ceiling.
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

// The guidance loop produced a non-finite gradient or loss.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace muse
