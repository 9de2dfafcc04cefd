#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "difct/common.hpp"

namespace difct {

// Circular-orbit CBCT acquisition. Scanner frame per view: origin at the
// isocenter, source at (0,-dso,0), detector plane perpendicular to the
// source-isocenter line at distance dsd from the source; u runs along +x,
// v along +z. The world origin sits at the volume corner, so the isocenter
// is volume_extent/2.
struct ScannerGeometry {
    double dso_mm = 1000.0;
    double dsd_mm = 1500.0;
    int det_rows = 64;
    int det_cols = 64;
    double det_spacing_u_mm = 6.4;
    double det_spacing_v_mm = 6.4;
    std::vector<double> angles;  // radians, strictly increasing, in [0, pi)
    Vec3 volume_extent_mm{204.8, 204.8, 204.8};

    Vec3 isocenter() const {
        return {volume_extent_mm[0] / 2, volume_extent_mm[1] / 2, volume_extent_mm[2] / 2};
    }
    int n_views() const { return int(angles.size()); }

    // Throws InvalidArgumentError on violated invariants.
    void validate() const;

    uint64_t fingerprint() const;
};

struct Mat4 {
    std::array<double, 16> m{};  // row-major
    double at(int r, int c) const { return m[size_t(r * 4 + c)]; }
};

struct Mat34 {
    std::array<double, 12> m{};  // row-major
    double at(int r, int c) const { return m[size_t(r * 4 + c)]; }
};

// R(alpha_i): world -> scanner frame. Rot_z(-alpha) composed with the
// isocenter translation.
Mat4 rotation_matrix(const ScannerGeometry& geom, int view_index);

// A(beta): scanner frame -> homogeneous detector coordinates,
// [[dsd,0,0,0],[0,0,dsd,0],[0,1,0,dso]].
Mat34 projection_matrix(const ScannerGeometry& geom);

struct ProjectionMatrixSet {
    std::vector<Mat4> rotations;  // per view
    Mat34 projection;
};

ProjectionMatrixSet projection_matrices(const ScannerGeometry& geom);

// phi(p, alpha_i, beta) = H(A * R * [p;1]) in continuous pixel units,
// pixel (0,0) center at (0,0). Throws DegenerateProjectionError when the
// homogeneous w = y_s + dso falls below 1e-6 mm.
std::array<double, 2> project_point(const ScannerGeometry& geom, int view_index, const Vec3& p);

// Precomputed per-view transform for hot loops; same arithmetic as
// project_point.
struct ViewTransform {
    double cos_a, sin_a;
    Vec3 iso;
    double dso, dsd;
    double inv_su, inv_sv;
    double cu, cv;  // detector center in pixels

    static ViewTransform make(const ScannerGeometry& geom, int view_index);

    // Returns false when the projection is degenerate (w <= eps).
    bool project(const Vec3& p, double& u_px, double& v_px) const {
        const double dx = p[0] - iso[0], dy = p[1] - iso[1];
        const double xs = cos_a * dx + sin_a * dy;
        const double ys = -sin_a * dx + cos_a * dy;
        const double zs = p[2] - iso[2];
        const double w = ys + dso;
        if (w <= 1e-6) return false;
        u_px = dsd * xs / w * inv_su + cu;
        v_px = dsd * zs / w * inv_sv + cv;
        return true;
    }

    // Scanner-frame coordinates of a world point.
    Vec3 to_scanner(const Vec3& p) const {
        const double dx = p[0] - iso[0], dy = p[1] - iso[1];
        return {cos_a * dx + sin_a * dy, -sin_a * dx + cos_a * dy, p[2] - iso[2]};
    }

    // Source position in world coordinates.
    Vec3 source_world() const {
        return {iso[0] + sin_a * dso, iso[1] - cos_a * dso, iso[2]};
    }

    // Center of detector pixel (row, col) in world coordinates.
    Vec3 detector_pixel_world(double row, double col) const;
};

// alpha_i = i*pi/k, endpoint-exclusive.
std::vector<double> uniform_angles(int k);

}  // namespace difct
