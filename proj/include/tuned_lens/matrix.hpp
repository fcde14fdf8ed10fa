#pragma once

#include <Eigen/Dense>

namespace tuned_lens {

// Row-major everywhere: one row per token position.
template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVectorT = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Matrix = MatrixT<double>;
using MatrixF = MatrixT<float>;
using RowVector = RowVectorT<double>;
using Vector = Eigen::VectorXd;

}  // namespace tuned_lens
