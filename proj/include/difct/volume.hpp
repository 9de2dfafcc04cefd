#pragma once

#include <cstdint>
#include <vector>

#include "difct/common.hpp"

namespace difct {

// Discrete CT volume. Axis order (H,W,D) maps to world (x,y,z); memory is
// z-fastest: index = (i*W + j)*D + k. Voxel (i,j,k) is centered at
// ((i+0.5)*s_h, (j+0.5)*s_w, (k+0.5)*s_d) mm.
struct Volume3D {
    Shape3 shape{0, 0, 0};            // H, W, D
    Vec3 spacing{1.0, 1.0, 1.0};      // s_h, s_w, s_d in mm
    std::vector<float> data;

    static Volume3D zeros(Shape3 shape, Vec3 spacing);

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
    Vec3 extent_mm() const {
        return {shape[0] * spacing[0], shape[1] * spacing[1], shape[2] * spacing[2]};
    }
    float& at(int64_t i, int64_t j, int64_t k) {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    float at(int64_t i, int64_t j, int64_t k) const {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }

    void validate() const;  // shape/data agreement, finite values in [0,1]
};

struct PointBatch {
    std::vector<Vec3> coords;    // world mm
    std::vector<float> values;   // optional ground-truth intensities; empty = absent

    int64_t size() const { return int64_t(coords.size()); }
    bool has_values() const { return !values.empty(); }
};

// Trilinear interpolation of the 8 surrounding voxel centers with border
// clamping. Points outside the extent beyond a small round-off tolerance
// throw OutOfBoundsError.
float trilinear_sample(const Volume3D& vol, const Vec3& p);

// Non-throwing variant for ray-march loops: clamps to the border.
float trilinear_sample_clamped(const Volume3D& vol, const Vec3& p);

// Rejection-samples n/2 points with trilinear value > threshold and n/2
// with value <= threshold, uniformly within each class. Throws
// DegenerateVolumeError when a class is empty (or cannot be filled within
// the attempt cap of 1e7).
PointBatch sample_balanced_points(const Volume3D& vol, int64_t n, float threshold,
                                  uint64_t rng_seed);

// Voxel-center lattice of out_shape points covering extent_mm, in the same
// z-fastest order as Volume3D memory.
PointBatch grid_points(const Vec3& extent_mm, const Shape3& out_shape);

enum class PhantomKind { shepp_logan_3d, random_ellipsoids };

PhantomKind phantom_kind_from_string(const std::string& s);
std::string to_string(PhantomKind k);

// Deterministic synthetic volumes with background exactly 0 and intensities
// in [0,1].
Volume3D make_phantom(PhantomKind kind, Shape3 shape, Vec3 spacing, uint64_t rng_seed);

// Centered uniform sphere, optionally with a linear edge ramp (half a voxel
// on each side keeps chord integrals exact for central rays). Shared by the
// projector and reconstruction test fixtures.
Volume3D make_sphere_volume(Shape3 shape, Vec3 spacing, double radius_mm, float intensity,
                            double edge_mm = 0.0);

// Trilinear resampling onto the voxel-center lattice of out_shape over the
// same physical extent.
Volume3D resample_trilinear(const Volume3D& vol, const Shape3& out_shape);

}  // namespace difct
