#pragma once

#include <cstdint>
#include <vector>

#include "difct/geometry.hpp"
#include "difct/volume.hpp"

namespace difct {

// K detector images of line-integral values (intensity * mm), one per view
// angle, tied to the geometry they were synthesized with.
struct ProjectionStack {
    int det_rows = 0;
    int det_cols = 0;
    std::vector<double> angles;
    std::vector<float> data;  // [view][row][col]
    uint64_t geometry_fingerprint = 0;

    int n_views() const { return int(angles.size()); }
    int64_t view_stride() const { return int64_t(det_rows) * det_cols; }
    float* view(int k) { return data.data() + int64_t(k) * view_stride(); }
    const float* view(int k) const { return data.data() + int64_t(k) * view_stride(); }

    void validate() const;

    // Checks angles and detector shape against geom, then adopts its
    // fingerprint. Loaded stacks must be bound before reconstruction.
    void bind_geometry(const ScannerGeometry& geom);
};

// Line integral of trilinearly interpolated intensity from the source to
// each detector pixel center, midpoint-sampled with a step of half the
// smallest voxel dimension.
ProjectionStack forward_project(const Volume3D& vol, const ScannerGeometry& geom);

// One view of the above; writes det_rows*det_cols values into out.
void forward_project_single(const Volume3D& vol, const ScannerGeometry& geom, int view_index,
                            float* out);

// Step override used by the discretization-convergence check.
ProjectionStack forward_project_with_step(const Volume3D& vol, const ScannerGeometry& geom,
                                          double step_mm);

}  // namespace difct
