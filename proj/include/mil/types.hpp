#pragma once

#include <Eigen/Dense>

namespace mil {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using ArrX = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using MatXf = MatX<float>;
using MatXd = MatX<double>;
using VecXf = VecX<float>;
using VecXd = VecX<double>;
using ArrXb = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

}  // namespace mil
