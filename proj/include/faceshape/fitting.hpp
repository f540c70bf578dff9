// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/geometry.hpp"

#include <span>
#include <vector>

namespace faceshape {

struct FitConfig
{
    int max_iterations = 20;
    /**
     * Stop when |J_prev - J| <= rel_tol * J_prev, or when the landmark residual norm is at most
     * rel_tol times the norm of the landmarks themselves. The second test is what ends a fit on
     * noiseless data, where J keeps shrinking geometrically and never stops changing in relative terms.
     */
    double rel_tol = 1e-6;
    double reg_id = 0.0;
    double reg_exp = 0.0;

    void validate() const;
};

struct ImageState
{
    Vector alpha_exp;
    PoseParams pose;
};

struct FitResult
{
    Vector alpha_id;
    std::vector<ImageState> per_image;
    /// Regularised objective after each full pass; the plain data term when both weights are 0.
    std::vector<double> objective_trace;
    int iterations_used = 0;
    bool converged = false;
};

/// One image's inputs to the shared identity solve.
struct ImageObservation
{
    Vector alpha_exp;
    PoseParams pose;
    LandmarkSet2D landmarks;
};

/**
 * Scaled-orthographic pose from 3D-2D correspondences.
 *
 * Solves the 2x4 affine camera in least squares, projects its 2x3 part onto the nearest scaled
 * pair of orthonormal rows, completes the rotation with their cross product and recovers t in the
 * model frame so that f * P * R * (p + t) fits the landmarks. The third component of t is not
 * observable and is set so that R * t has zero depth.
 */
PoseParams estimate_pose(const Points3& points3d, const LandmarkSet2D& landmarks2d);

/// argmin over alpha_exp of ||u - f P R (S_U + t)||^2 + reg_exp * ||alpha_exp / sigma_exp||^2.
Vector solve_expression(const MorphableModel& model, const Vector& alpha_id, const PoseParams& pose,
                        const LandmarkSet2D& landmarks, double reg_exp);

/// argmin over the shared alpha_id of sum_j ||u_j - u_hat_j||^2 + reg_id * ||alpha_id / sigma_id||^2.
Vector solve_identity_shared(const MorphableModel& model, std::span<const ImageObservation> per_image,
                             double reg_id);

/// Sum over images of the squared landmark residual (regularisers excluded).
double objective(const MorphableModel& model, const Vector& alpha_id, std::span<const ImageObservation> per_image);

/// Data term plus the Tikhonov terms weighted by cfg.
double regularized_objective(const MorphableModel& model, const Vector& alpha_id,
                             std::span<const ImageObservation> per_image, const FitConfig& cfg);

/**
 * Alternating fit of one shared identity and per-image expression and pose, started at zero
 * coefficients. Each pass updates every pose, then every expression, then the identity.
 * A pose update that would increase its image's residual is rejected. If the regularised
 * objective increases by more than 1e-9 within a pass the fit aborts with NumericalFailure.
 */
FitResult multi_image_fit(const MorphableModel& model, std::span<const LandmarkSet2D> landmarks,
                          const FitConfig& config);

} // namespace faceshape
