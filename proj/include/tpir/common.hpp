#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tpir {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// A FeatureMatrix is d x L with the class token in column 0 and L >= 2.
template <typename Scalar>
using FeatureMatrix = Mat<Scalar>;

// Violated precondition or shape contract.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numerically degenerate input (e.g. zero-norm vector where a direction is
// required). Surfaced rather than epsilon-clamped.
struct DegenerateInputError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace tpir
