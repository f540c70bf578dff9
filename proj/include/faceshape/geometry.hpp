// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "Eigen/Core"

#include <cstddef>
#include <span>
#include <vector>

namespace faceshape {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Ordered list of 3D points, one per column.
using Points3 = Eigen::Matrix3Xd;

/**
 * A dense 3D point cloud stored as one flat coordinate vector (x1, y1, z1, ..., xn, yn, zn).
 *
 * Construction validates the layout: the length is a multiple of three, every entry is finite and
 * there are at least 4 vertices.
 */
class Shape
{
public:
    explicit Shape(Vector coords);

    static Shape from_points(const Points3& points);

    std::size_t size() const noexcept { return static_cast<std::size_t>(coords_.size() / 3); }
    const Vector& coords() const noexcept { return coords_; }
    Eigen::Vector3d vertex(std::size_t i) const { return coords_.segment<3>(3 * static_cast<Eigen::Index>(i)); }
    Points3 points() const;

    bool operator==(const Shape& other) const
    {
        return coords_.size() == other.coords_.size() && (coords_.array() == other.coords_.array()).all();
    }

private:
    Vector coords_;
};

/// Mean shape plus identity and expression bases (3n x K each, column-major coefficients).
struct MorphableModel
{
    Shape mean;
    Matrix basis_id;
    Matrix basis_exp;
    Vector sigma_id;
    Vector sigma_exp;
    std::vector<int> landmark_indices;
    int nose_tip_index = 0;

    std::size_t vertex_count() const noexcept { return mean.size(); }
    int id_dim() const noexcept { return static_cast<int>(basis_id.cols()); }
    int exp_dim() const noexcept { return static_cast<int>(basis_exp.cols()); }

    /// Throws InvariantViolation. Orthonormality is only required of generated models.
    void validate(bool check_orthonormal = true) const;
};

struct CoeffPair
{
    Vector alpha_id;
    Vector alpha_exp;
};

/// Weak-perspective camera: u = scale * P * rotation * (p + translation), P drops z.
struct PoseParams
{
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    void validate() const;
};

/// 2D landmarks as a flat vector (u1, v1, ..., uL, vL).
struct LandmarkSet2D
{
    Vector points;

    int count() const noexcept { return static_cast<int>(points.size() / 2); }
    Eigen::Vector2d at(int i) const { return points.segment<2>(2 * i); }
};

/// Maps p to scale * rotation * p + translation.
struct SimilarityTransform
{
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    void validate() const;
};

/// Throws InvalidArgument unless R^T R = I and det R = +1 within tol.
void check_rotation(const Eigen::Matrix3d& rotation, double tol, const char* what);

/// Geodesic angle (radians) between two rotations.
double rotation_distance(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

/**
 * Rotation from yaw-pitch-roll angles in the intrinsic Z-Y-X convention: R = Rz(roll) * Ry(yaw) * Rx(pitch).
 * With y pointing up and z towards the viewer, yaw turns the head left/right, pitch nods and roll
 * tilts within the image plane.
 */
Eigen::Matrix3d euler_zyx_rotation(double yaw, double pitch, double roll);

Shape compose_shape(const MorphableModel& model, const CoeffPair& coeffs);

/// mean + delta_id + delta_res, element-wise.
Shape compose_from_components(const Shape& mean, const Vector& delta_id, const Vector& delta_res);

Points3 select_landmarks(const Shape& shape, std::span<const int> indices);

LandmarkSet2D project_landmarks(const Points3& points, const PoseParams& pose);

/**
 * Closed-form similarity transform (Umeyama) minimising sum ||s R p_i + t - q_i||^2.
 * The rotation is constrained to det = +1, so a mirrored target is never matched exactly.
 * Throws DegenerateGeometry for coincident sources or a cross-covariance of rank < 2.
 */
SimilarityTransform procrustes_align(const Points3& source, const Points3& target);

Shape apply_transform(const Shape& shape, const SimilarityTransform& xf);
Points3 apply_transform(const Points3& points, const SimilarityTransform& xf);

/// Sorted indices of vertices within `radius` (inclusive) of vertex `center_index`.
std::vector<int> crop_indices(const Shape& shape, int center_index, double radius);

/**
 * Reconstruction error averaged over shape pairs: for each pair the Euclidean norm of the stacked
 * 3*n_c difference vector over `indices`, divided by n_c. Shapes must already be aligned.
 */
double rmse(std::span<const Shape> truth, std::span<const Shape> predicted, std::span<const int> indices);

/// Mean per-vertex Euclidean distance over `indices`, averaged over pairs.
double mean_vertex_distance(std::span<const Shape> truth, std::span<const Shape> predicted,
                            std::span<const int> indices);

} // namespace faceshape
