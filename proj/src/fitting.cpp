// SPDX-License-Identifier: Apache-2.0
#include "faceshape/fitting.hpp"
#include "faceshape/error.hpp"

#include "Eigen/Geometry"
#include "Eigen/QR"
#include "Eigen/SVD"

#include <cmath>
#include <limits>
#include <string>

namespace faceshape {

void FitConfig::validate() const
{
    require(max_iterations >= 1, ErrorKind::InvalidArgument, "max_iterations must be at least 1");
    require(rel_tol > 0.0, ErrorKind::InvalidArgument, "rel_tol must be positive");
    require(reg_id >= 0.0 && reg_exp >= 0.0, ErrorKind::InvalidArgument,
            "regularisation weights must be non-negative");
}

namespace {

// Landmark rows of a 3n x K basis, as a 3L x K matrix.
Matrix landmark_rows(const Matrix& basis, const std::vector<int>& indices)
{
    Matrix out(3 * static_cast<Eigen::Index>(indices.size()), basis.cols());
    for (std::size_t l = 0; l < indices.size(); ++l) {
        out.middleRows<3>(3 * static_cast<Eigen::Index>(l)) = basis.middleRows<3>(3 * indices[l]);
    }
    return out;
}

Vector landmark_coords(const Vector& coords, const std::vector<int>& indices)
{
    Vector out(3 * static_cast<Eigen::Index>(indices.size()));
    for (std::size_t l = 0; l < indices.size(); ++l) {
        out.segment<3>(3 * static_cast<Eigen::Index>(l)) = coords.segment<3>(3 * indices[l]);
    }
    return out;
}

// Applies f * P * R to every 3-row block: 3L x K -> 2L x K.
Matrix project_rows(const Matrix& rows3, const PoseParams& pose)
{
    const Eigen::Matrix<double, 2, 3> fpr = pose.scale * pose.rotation.topRows<2>();
    const auto n_pts = rows3.rows() / 3;
    Matrix out(2 * n_pts, rows3.cols());
    for (Eigen::Index l = 0; l < n_pts; ++l) {
        out.middleRows<2>(2 * l) = fpr * rows3.middleRows<3>(3 * l);
    }
    return out;
}

Vector project_coords(const Vector& coords3, const PoseParams& pose)
{
    const Eigen::Matrix<double, 2, 3> fpr = pose.scale * pose.rotation.topRows<2>();
    const auto n_pts = coords3.size() / 3;
    Vector out(2 * n_pts);
    for (Eigen::Index l = 0; l < n_pts; ++l) {
        out.segment<2>(2 * l) = fpr * (coords3.segment<3>(3 * l) + pose.translation);
    }
    return out;
}

void check_landmarks(const MorphableModel& model, const LandmarkSet2D& lm)
{
    require(lm.points.size() == 2 * static_cast<Eigen::Index>(model.landmark_indices.size()),
            ErrorKind::InvalidArgument,
            "landmark set has " + std::to_string(lm.points.size() / 2) + " points, model has " +
                std::to_string(model.landmark_indices.size()));
    require(lm.points.allFinite(), ErrorKind::InvalidArgument, "landmarks are not finite");
}

// Solves min ||J x - b||^2 + reg * ||x / sigma||^2 through a column-pivoted QR of the stacked system.
Vector regularized_solve(const Matrix& jac, const Vector& rhs, const Vector& sigma, double reg, const char* what)
{
    require(reg >= 0.0 && std::isfinite(reg), ErrorKind::InvalidArgument, "regularisation weight must be >= 0");
    const auto k = jac.cols();
    if (reg == 0.0) {
        require(jac.rows() >= k, ErrorKind::Underdetermined,
                std::string(what) + ": " + std::to_string(jac.rows()) + " equations for " + std::to_string(k) +
                    " unknowns without regularisation");
    }
    Matrix a(jac.rows() + (reg > 0.0 ? k : 0), k);
    Vector b = Vector::Zero(a.rows());
    a.topRows(jac.rows()) = jac;
    b.head(jac.rows()) = rhs;
    if (reg > 0.0) {
        a.bottomRows(k) = (std::sqrt(reg) * sigma.cwiseInverse()).asDiagonal();
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(a);
    qr.setThreshold(1e-12);
    require(qr.rank() == k, ErrorKind::Underdetermined,
            std::string(what) + ": system is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                std::to_string(k) + ")");
    Vector x = qr.solve(b);
    require(x.allFinite(), ErrorKind::NumericalFailure, std::string(what) + ": solution is not finite");
    return x;
}

Points3 landmark_points(const MorphableModel& model, const Vector& alpha_id, const Vector& alpha_exp)
{
    return select_landmarks(compose_shape(model, {alpha_id, alpha_exp}), model.landmark_indices);
}

double image_residual(const MorphableModel& model, const Vector& alpha_id, const ImageObservation& obs)
{
    const LandmarkSet2D proj = project_landmarks(landmark_points(model, alpha_id, obs.alpha_exp), obs.pose);
    return (obs.landmarks.points - proj.points).squaredNorm();
}

} // namespace

PoseParams estimate_pose(const Points3& points3d, const LandmarkSet2D& landmarks2d)
{
    const auto n = points3d.cols();
    require(n >= 4, ErrorKind::InvalidArgument, "pose estimation needs at least 4 points");
    require(landmarks2d.points.size() == 2 * n, ErrorKind::InvalidArgument, "3D and 2D point counts differ");
    require(points3d.allFinite() && landmarks2d.points.allFinite(), ErrorKind::InvalidArgument,
            "pose inputs are not finite");

    const Eigen::Map<const Eigen::Matrix2Xd> u(landmarks2d.points.data(), 2, n);
    const Eigen::Vector3d mu_p = points3d.rowwise().mean();
    const Eigen::Vector2d mu_u = u.rowwise().mean();
    const Points3 pc = points3d.colwise() - mu_p;
    const Eigen::Matrix2Xd uc = u.colwise() - mu_u;

    const Eigen::JacobiSVD<Matrix> psvd(pc.transpose());
    const Eigen::Vector3d ps = psvd.singularValues();
    require(ps(0) > 0.0 && ps(2) > 1e-9 * ps(0), ErrorKind::DegenerateGeometry,
            "3D points are collinear or coplanar; the affine camera is not determined");

    // Affine camera uc ~ A pc, solved row-wise.
    const Eigen::ColPivHouseholderQR<Matrix> qr(pc.transpose());
    const Eigen::Matrix<double, 3, 2> at = qr.solve(Matrix(uc.transpose()));
    const Eigen::Matrix<double, 2, 3> a = at.transpose();

    const Eigen::JacobiSVD<Matrix> asvd(Matrix(a), Eigen::ComputeThinU | Eigen::ComputeThinV);
    require(asvd.singularValues()(1) > 1e-12 * std::max(1.0, asvd.singularValues()(0)),
            ErrorKind::DegenerateGeometry, "affine camera is rank deficient");
    const Eigen::Matrix<double, 2, 3> rows = asvd.matrixU() * asvd.matrixV().transpose();

    PoseParams pose;
    pose.scale = 0.5 * (a.row(0).norm() + a.row(1).norm());
    pose.rotation.row(0) = rows.row(0);
    pose.rotation.row(1) = rows.row(1);
    pose.rotation.row(2) = rows.row(0).cross(rows.row(1));

    const Eigen::Matrix<double, 2, 3> fpr = pose.scale * pose.rotation.topRows<2>();
    const Eigen::Vector2d c = (u - fpr * points3d).rowwise().mean();
    pose.translation = pose.rotation.transpose() * Eigen::Vector3d(c(0) / pose.scale, c(1) / pose.scale, 0.0);
    return pose;
}

Vector solve_expression(const MorphableModel& model, const Vector& alpha_id, const PoseParams& pose,
                        const LandmarkSet2D& landmarks, double reg_exp)
{
    pose.validate();
    check_landmarks(model, landmarks);
    require(alpha_id.size() == model.id_dim(), ErrorKind::InvalidArgument, "identity coefficient count mismatch");
    const Vector base = landmark_coords(model.mean.coords() + model.basis_id * alpha_id, model.landmark_indices);
    const Matrix jac = project_rows(landmark_rows(model.basis_exp, model.landmark_indices), pose);
    const Vector rhs = landmarks.points - project_coords(base, pose);
    return regularized_solve(jac, rhs, model.sigma_exp, reg_exp, "expression solve");
}

Vector solve_identity_shared(const MorphableModel& model, std::span<const ImageObservation> per_image,
                             double reg_id)
{
    require(!per_image.empty(), ErrorKind::InvalidArgument, "identity solve needs at least one image");
    const Matrix id_rows = landmark_rows(model.basis_id, model.landmark_indices);
    const auto two_l = 2 * static_cast<Eigen::Index>(model.landmark_indices.size());
    const auto m = static_cast<Eigen::Index>(per_image.size());
    Matrix jac(two_l * m, model.id_dim());
    Vector rhs(two_l * m);
    for (Eigen::Index j = 0; j < m; ++j) {
        const ImageObservation& obs = per_image[static_cast<std::size_t>(j)];
        obs.pose.validate();
        check_landmarks(model, obs.landmarks);
        require(obs.alpha_exp.size() == model.exp_dim(), ErrorKind::InvalidArgument,
                "expression coefficient count mismatch");
        const Vector base =
            landmark_coords(model.mean.coords() + model.basis_exp * obs.alpha_exp, model.landmark_indices);
        jac.middleRows(j * two_l, two_l) = project_rows(id_rows, obs.pose);
        rhs.segment(j * two_l, two_l) = obs.landmarks.points - project_coords(base, obs.pose);
    }
    return regularized_solve(jac, rhs, model.sigma_id, reg_id, "identity solve");
}

double objective(const MorphableModel& model, const Vector& alpha_id, std::span<const ImageObservation> per_image)
{
    double total = 0.0;
    for (const ImageObservation& obs : per_image) {
        check_landmarks(model, obs.landmarks);
        total += image_residual(model, alpha_id, obs);
    }
    return total;
}

double regularized_objective(const MorphableModel& model, const Vector& alpha_id,
                             std::span<const ImageObservation> per_image, const FitConfig& cfg)
{
    double total = objective(model, alpha_id, per_image);
    total += cfg.reg_id * alpha_id.cwiseQuotient(model.sigma_id).squaredNorm();
    for (const ImageObservation& obs : per_image) {
        total += cfg.reg_exp * obs.alpha_exp.cwiseQuotient(model.sigma_exp).squaredNorm();
    }
    return total;
}

FitResult multi_image_fit(const MorphableModel& model, std::span<const LandmarkSet2D> landmarks,
                          const FitConfig& config)
{
    config.validate();
    require(!landmarks.empty(), ErrorKind::InvalidArgument, "fitting needs at least one image");
    double energy = 0.0;
    for (const LandmarkSet2D& lm : landmarks) {
        check_landmarks(model, lm);
        energy += lm.points.squaredNorm();
    }

    std::vector<ImageObservation> obs;
    obs.reserve(landmarks.size());
    for (const LandmarkSet2D& lm : landmarks) {
        obs.push_back({Vector::Zero(model.exp_dim()), PoseParams{}, lm});
    }
    Vector alpha_id = Vector::Zero(model.id_dim());

    FitResult result;
    constexpr double slack = 1e-9;
    double previous = std::numeric_limits<double>::infinity();
    const auto check_step = [&](double before, const char* step, int pass) {
        const double after = regularized_objective(model, alpha_id, obs, config);
        require(std::isfinite(after), ErrorKind::NumericalFailure,
                std::string("objective became non-finite after the ") + step + " step");
        require(after <= before + slack, ErrorKind::NumericalFailure,
                std::string("objective increased in the ") + step + " step of pass " + std::to_string(pass) +
                    " (" + std::to_string(before) + " -> " + std::to_string(after) + ")");
        return after;
    };

    for (int pass = 1; pass <= config.max_iterations; ++pass) {
        for (ImageObservation& o : obs) {
            const Points3 pts = landmark_points(model, alpha_id, o.alpha_exp);
            PoseParams candidate = estimate_pose(pts, o.landmarks);
            if (pass == 1) {
                o.pose = candidate;
                continue;
            }
            const double current = (o.landmarks.points - project_landmarks(pts, o.pose).points).squaredNorm();
            const double proposed = (o.landmarks.points - project_landmarks(pts, candidate).points).squaredNorm();
            if (proposed <= current) {
                o.pose = candidate;
            }
        }
        double value = pass == 1 ? std::numeric_limits<double>::infinity() : previous;
        value = check_step(value, "pose", pass);

        for (ImageObservation& o : obs) {
            o.alpha_exp = solve_expression(model, alpha_id, o.pose, o.landmarks, config.reg_exp);
        }
        value = check_step(value, "expression", pass);

        alpha_id = solve_identity_shared(model, obs, config.reg_id);
        value = check_step(value, "identity", pass);

        const double data = objective(model, alpha_id, obs);
        result.objective_trace.push_back(value);
        result.iterations_used = pass;
        if (data <= config.rel_tol * config.rel_tol * energy ||
            (std::isfinite(previous) && std::abs(previous - value) <= config.rel_tol * previous)) {
            result.converged = true;
            break;
        }
        previous = value;
    }

    result.alpha_id = std::move(alpha_id);
    for (ImageObservation& o : obs) {
        result.per_image.push_back({std::move(o.alpha_exp), o.pose});
    }
    return result;
}

} // namespace faceshape
