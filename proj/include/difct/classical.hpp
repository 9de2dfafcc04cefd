#pragma once

#include <vector>

#include "difct/projector.hpp"

namespace difct {

struct FdkConfig {
    enum class Filter { ram_lak, shepp_logan_window };
    Filter filter = Filter::shepp_logan_window;
    // Spec'd behavior clamps to >= 0; linearity tests disable this.
    bool clamp_nonneg = true;
};

struct SartConfig {
    int n_iterations = 30;
    double relaxation = 0.5;  // in (0,2)
    bool nonnegativity_clamp = true;

    void validate() const;
};

// Feldkamp filtered backprojection: cosine weighting, row-wise ramp
// filtering at isocenter scale, distance-weighted voxel-driven
// backprojection with bilinear detector reads, scaled by pi/K.
Volume3D fdk_reconstruct(const ProjectionStack& proj, const ScannerGeometry& geom,
                         Shape3 out_shape, const FdkConfig& cfg = {});

// Symmetric, and zero-mean for ram_lak. Exposed for the filter invariants.
std::vector<double> fdk_filter_kernel(FdkConfig::Filter filter, int cols, double tau_mm);

// SART: per-view residual backprojection with ray-length normalization and
// relaxation, sweeping views in angle order. residual_curve, when given,
// receives the projection-space RMS residual after each full sweep.
Volume3D sart_reconstruct(const ProjectionStack& proj, const ScannerGeometry& geom,
                          Shape3 out_shape, const SartConfig& cfg,
                          std::vector<double>* residual_curve = nullptr);

}  // namespace difct
