#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace gspull {

#ifdef GSPULL_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Index = Eigen::Index;

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mat = MatrixT<Real>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using Vec2 = Eigen::Matrix<Real, 2, 1>;
using Vec3 = Eigen::Matrix<Real, 3, 1>;
using Vec4 = Eigen::Matrix<Real, 4, 1>;
using Mat2 = Eigen::Matrix<Real, 2, 2>;
using Mat3 = Eigen::Matrix<Real, 3, 3>;
using Mat4 = Eigen::Matrix<Real, 4, 4>;

// N x 3 point lists, one point per row.
using Points = Eigen::Matrix<Real, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Maps positions into the normalized cube [-1, 1]^3: x_n = (x - offset) * scale.
struct SceneTransform {
    Real scale = 1;
    Vec3 offset = Vec3::Zero();

    Vec3 normalize(const Vec3& x) const { return (x - offset) * scale; }
    Vec3 denormalize(const Vec3& x) const { return x / scale + offset; }
    bool is_identity() const { return scale == 1 && offset.isZero(); }
};

} // namespace gspull
