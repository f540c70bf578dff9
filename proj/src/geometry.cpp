// SPDX-License-Identifier: Apache-2.0
#include "faceshape/geometry.hpp"
#include "faceshape/error.hpp"

#include "Eigen/Dense"
#include "Eigen/SVD"

#include <algorithm>
#include <cmath>
#include <string>

namespace faceshape {

Shape::Shape(Vector coords) : coords_(std::move(coords))
{
    require(coords_.size() % 3 == 0, ErrorKind::InvariantViolation,
            "shape coordinate count " + std::to_string(coords_.size()) + " is not a multiple of 3");
    require(coords_.size() >= 12, ErrorKind::InvariantViolation,
            "shape has " + std::to_string(coords_.size() / 3) + " vertices; at least 4 are required");
    require(coords_.allFinite(), ErrorKind::InvariantViolation, "shape has non-finite coordinates");
}

Shape Shape::from_points(const Points3& points)
{
    return Shape(Eigen::Map<const Vector>(points.data(), points.size()));
}

Points3 Shape::points() const
{
    return Eigen::Map<const Points3>(coords_.data(), 3, coords_.size() / 3);
}

void MorphableModel::validate(bool check_orthonormal) const
{
    const auto rows = static_cast<Eigen::Index>(3 * vertex_count());
    require(basis_id.rows() == rows && basis_exp.rows() == rows, ErrorKind::InvariantViolation,
            "basis row count does not match 3 * vertex count");
    require(basis_id.cols() == sigma_id.size(), ErrorKind::InvariantViolation,
            "sigma_id length does not match identity basis width");
    require(basis_exp.cols() == sigma_exp.size(), ErrorKind::InvariantViolation,
            "sigma_exp length does not match expression basis width");
    require((sigma_id.array() > 0.0).all() && (sigma_exp.array() > 0.0).all(), ErrorKind::InvariantViolation,
            "basis standard deviations must be positive");
    require(basis_id.allFinite() && basis_exp.allFinite(), ErrorKind::InvariantViolation,
            "basis has non-finite entries");
    require(landmark_indices.size() >= 4, ErrorKind::InvariantViolation, "at least 4 landmarks are required");
    std::vector<int> sorted = landmark_indices;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::InvariantViolation,
            "landmark indices are not distinct");
    require(sorted.front() >= 0 && static_cast<std::size_t>(sorted.back()) < vertex_count(),
            ErrorKind::InvariantViolation, "landmark index out of range");
    require(nose_tip_index >= 0 && static_cast<std::size_t>(nose_tip_index) < vertex_count(),
            ErrorKind::InvariantViolation, "nose tip index out of range");
    if (check_orthonormal) {
        Matrix basis(rows, basis_id.cols() + basis_exp.cols());
        basis << basis_id, basis_exp;
        const Matrix gram = basis.transpose() * basis;
        const double err = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
        require(err <= 1e-10, ErrorKind::InvariantViolation,
                "basis columns are not orthonormal (max Gram error " + std::to_string(err) + ")");
    }
}

void check_rotation(const Eigen::Matrix3d& rotation, double tol, const char* what)
{
    require(rotation.allFinite(), ErrorKind::InvalidArgument, std::string(what) + ": rotation is not finite");
    const double orth = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    require(orth <= tol, ErrorKind::InvalidArgument, std::string(what) + ": rotation is not orthonormal");
    require(std::abs(rotation.determinant() - 1.0) <= tol, ErrorKind::InvalidArgument,
            std::string(what) + ": rotation determinant is not +1");
}

void PoseParams::validate() const
{
    require(std::isfinite(scale) && scale > 0.0, ErrorKind::InvalidArgument, "pose scale must be positive");
    require(translation.allFinite(), ErrorKind::InvalidArgument, "pose translation is not finite");
    check_rotation(rotation, 1e-10, "pose");
}

void SimilarityTransform::validate() const
{
    require(std::isfinite(scale) && scale > 0.0, ErrorKind::InvalidArgument,
            "similarity scale must be positive");
    require(translation.allFinite(), ErrorKind::InvalidArgument, "similarity translation is not finite");
    check_rotation(rotation, 1e-10, "similarity transform");
}

double rotation_distance(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b)
{
    const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

Eigen::Matrix3d euler_zyx_rotation(double yaw, double pitch, double roll)
{
    const double cz = std::cos(roll), sz = std::sin(roll);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double cx = std::cos(pitch), sx = std::sin(pitch);
    Eigen::Matrix3d rz, ry, rx;
    rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
    return rz * ry * rx;
}

Shape compose_shape(const MorphableModel& model, const CoeffPair& coeffs)
{
    require(coeffs.alpha_id.size() == model.basis_id.cols(), ErrorKind::InvalidArgument,
            "identity coefficient count " + std::to_string(coeffs.alpha_id.size()) + " does not match basis width " +
                std::to_string(model.basis_id.cols()));
    require(coeffs.alpha_exp.size() == model.basis_exp.cols(), ErrorKind::InvalidArgument,
            "expression coefficient count " + std::to_string(coeffs.alpha_exp.size()) +
                " does not match basis width " + std::to_string(model.basis_exp.cols()));
    Vector s = model.mean.coords();
    s.noalias() += model.basis_id * coeffs.alpha_id;
    s.noalias() += model.basis_exp * coeffs.alpha_exp;
    return Shape(std::move(s));
}

Shape compose_from_components(const Shape& mean, const Vector& delta_id, const Vector& delta_res)
{
    require(delta_id.size() == mean.coords().size() && delta_res.size() == mean.coords().size(),
            ErrorKind::InvalidArgument, "shape component lengths differ from the mean shape");
    return Shape(mean.coords() + (delta_id + delta_res));
}

Points3 select_landmarks(const Shape& shape, std::span<const int> indices)
{
    Points3 out(3, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        require(idx >= 0 && static_cast<std::size_t>(idx) < shape.size(), ErrorKind::InvalidArgument,
                "landmark index " + std::to_string(idx) + " out of range");
        out.col(static_cast<Eigen::Index>(i)) = shape.vertex(static_cast<std::size_t>(idx));
    }
    return out;
}

LandmarkSet2D project_landmarks(const Points3& points, const PoseParams& pose)
{
    pose.validate();
    const Eigen::Matrix<double, 2, 3> top = pose.scale * pose.rotation.topRows<2>();
    const Eigen::Matrix2Xd projected = top * (points.colwise() + pose.translation);
    return {Eigen::Map<const Vector>(projected.data(), projected.size())};
}

SimilarityTransform procrustes_align(const Points3& source, const Points3& target)
{
    require(source.cols() == target.cols(), ErrorKind::InvalidArgument, "point counts differ");
    require(source.cols() >= 4, ErrorKind::InvalidArgument, "at least 4 point pairs are required");
    const auto n = static_cast<double>(source.cols());

    const Eigen::Vector3d mu_src = source.rowwise().mean();
    const Eigen::Vector3d mu_dst = target.rowwise().mean();
    const Points3 src = source.colwise() - mu_src;
    const Points3 dst = target.colwise() - mu_dst;

    const double var_src = src.squaredNorm() / n;
    const double extent = std::max(1.0, mu_src.squaredNorm());
    require(var_src > 1e-24 * extent, ErrorKind::DegenerateGeometry, "source points are coincident");

    const Eigen::Matrix3d cov = dst * src.transpose() / n;
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    require(sv(0) > 0.0 && sv(1) > 1e-12 * sv(0), ErrorKind::DegenerateGeometry,
            "cross-covariance is rank deficient");

    Eigen::Vector3d sign = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
        sign(2) = -1.0;
    }
    SimilarityTransform xf;
    xf.rotation = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
    xf.scale = sv.dot(sign) / var_src;
    xf.translation = mu_dst - xf.scale * xf.rotation * mu_src;
    require(xf.scale > 0.0, ErrorKind::DegenerateGeometry, "alignment produced a non-positive scale");
    return xf;
}

Points3 apply_transform(const Points3& points, const SimilarityTransform& xf)
{
    return ((xf.scale * xf.rotation) * points).colwise() + xf.translation;
}

Shape apply_transform(const Shape& shape, const SimilarityTransform& xf)
{
    return Shape::from_points(apply_transform(shape.points(), xf));
}

std::vector<int> crop_indices(const Shape& shape, int center_index, double radius)
{
    require(center_index >= 0 && static_cast<std::size_t>(center_index) < shape.size(), ErrorKind::InvalidArgument,
            "crop center index " + std::to_string(center_index) + " out of range");
    require(radius >= 0.0 && !std::isnan(radius), ErrorKind::InvalidArgument, "crop radius must be non-negative");
    const Eigen::Vector3d center = shape.vertex(static_cast<std::size_t>(center_index));
    std::vector<int> out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (static_cast<int>(i) == center_index || (shape.vertex(i) - center).norm() <= radius) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

namespace {

void check_pairs(std::span<const Shape> truth, std::span<const Shape> predicted, std::span<const int> indices)
{
    require(!truth.empty(), ErrorKind::InvalidArgument, "no shape pairs given");
    require(truth.size() == predicted.size(), ErrorKind::InvalidArgument, "truth and prediction counts differ");
    require(!indices.empty(), ErrorKind::InvalidArgument, "empty index list");
    for (std::size_t k = 0; k < truth.size(); ++k) {
        require(truth[k].size() == predicted[k].size(), ErrorKind::InvalidArgument,
                "shape pair " + std::to_string(k) + " has mismatched vertex counts");
        for (const int idx : indices) {
            require(idx >= 0 && static_cast<std::size_t>(idx) < truth[k].size(), ErrorKind::InvalidArgument,
                    "index " + std::to_string(idx) + " out of range");
        }
    }
}

} // namespace

double rmse(std::span<const Shape> truth, std::span<const Shape> predicted, std::span<const int> indices)
{
    check_pairs(truth, predicted, indices);
    const auto n_c = static_cast<double>(indices.size());
    double total = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        double sq = 0.0;
        for (const int idx : indices) {
            const auto i = static_cast<std::size_t>(idx);
            sq += (truth[k].vertex(i) - predicted[k].vertex(i)).squaredNorm();
        }
        total += std::sqrt(sq) / n_c;
    }
    return total / static_cast<double>(truth.size());
}

double mean_vertex_distance(std::span<const Shape> truth, std::span<const Shape> predicted,
                            std::span<const int> indices)
{
    check_pairs(truth, predicted, indices);
    double total = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        double sum = 0.0;
        for (const int idx : indices) {
            const auto i = static_cast<std::size_t>(idx);
            sum += (truth[k].vertex(i) - predicted[k].vertex(i)).norm();
        }
        total += sum / static_cast<double>(indices.size());
    }
    return total / static_cast<double>(truth.size());
}

} // namespace faceshape
