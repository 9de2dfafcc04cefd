#include "difct/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <string>

namespace difct {

void ScannerGeometry::validate() const {
    if (!(dso_mm > 0.0) || !(dso_mm < dsd_mm))
        throw InvalidArgumentError("geometry: need 0 < dso (" + std::to_string(dso_mm) +
                                   ") < dsd (" + std::to_string(dsd_mm) + ")");
    if (det_rows <= 0 || det_cols <= 0)
        throw InvalidArgumentError("geometry: detector grid must be positive, got " +
                                   std::to_string(det_rows) + "x" + std::to_string(det_cols));
    if (!(det_spacing_u_mm > 0.0) || !(det_spacing_v_mm > 0.0))
        throw InvalidArgumentError("geometry: detector spacing must be positive");
    if (angles.empty()) throw InvalidArgumentError("geometry: empty angle list");
    for (size_t i = 0; i < angles.size(); ++i) {
        if (!(angles[i] >= 0.0) || !(angles[i] < std::numbers::pi))
            throw InvalidArgumentError("geometry: angle " + std::to_string(i) +
                                       " outside [0, pi)");
        if (i > 0 && !(angles[i] > angles[i - 1]))
            throw InvalidArgumentError("geometry: angles must be strictly increasing");
    }
    for (double e : volume_extent_mm)
        if (!(e > 0.0)) throw InvalidArgumentError("geometry: volume extent must be positive");
}

uint64_t ScannerGeometry::fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, size_t n) { h = fnv1a(p, n, h); };
    mix(&dso_mm, sizeof dso_mm);
    mix(&dsd_mm, sizeof dsd_mm);
    mix(&det_rows, sizeof det_rows);
    mix(&det_cols, sizeof det_cols);
    mix(&det_spacing_u_mm, sizeof det_spacing_u_mm);
    mix(&det_spacing_v_mm, sizeof det_spacing_v_mm);
    mix(volume_extent_mm.data(), sizeof(double) * 3);
    for (double a : angles) mix(&a, sizeof a);
    return h;
}

Mat4 rotation_matrix(const ScannerGeometry& geom, int view_index) {
    if (view_index < 0 || view_index >= geom.n_views())
        throw InvalidArgumentError("rotation_matrix: view index " + std::to_string(view_index) +
                                   " out of range [0," + std::to_string(geom.n_views()) + ")");
    const double a = geom.angles[size_t(view_index)];
    const double c = std::cos(a), s = std::sin(a);
    const Vec3 iso = geom.isocenter();
    // Rot_z(-a) * Translate(-iso)
    Mat4 r;
    r.m = {c,  s, 0, -(c * iso[0] + s * iso[1]),
           -s, c, 0, -(-s * iso[0] + c * iso[1]),
           0,  0, 1, -iso[2],
           0,  0, 0, 1};
    return r;
}

Mat34 projection_matrix(const ScannerGeometry& geom) {
    geom.validate();
    Mat34 a;
    a.m = {geom.dsd_mm, 0, 0,           0,
           0,           0, geom.dsd_mm, 0,
           0,           1, 0,           geom.dso_mm};
    return a;
}

ProjectionMatrixSet projection_matrices(const ScannerGeometry& geom) {
    ProjectionMatrixSet set;
    set.rotations.reserve(geom.angles.size());
    for (int i = 0; i < geom.n_views(); ++i) set.rotations.push_back(rotation_matrix(geom, i));
    set.projection = projection_matrix(geom);
    return set;
}

ViewTransform ViewTransform::make(const ScannerGeometry& geom, int view_index) {
    if (view_index < 0 || view_index >= geom.n_views())
        throw InvalidArgumentError("view transform: view index " + std::to_string(view_index) +
                                   " out of range [0," + std::to_string(geom.n_views()) + ")");
    const double a = geom.angles[size_t(view_index)];
    ViewTransform t;
    t.cos_a = std::cos(a);
    t.sin_a = std::sin(a);
    t.iso = geom.isocenter();
    t.dso = geom.dso_mm;
    t.dsd = geom.dsd_mm;
    t.inv_su = 1.0 / geom.det_spacing_u_mm;
    t.inv_sv = 1.0 / geom.det_spacing_v_mm;
    t.cu = (geom.det_cols - 1) / 2.0;
    t.cv = (geom.det_rows - 1) / 2.0;
    return t;
}

Vec3 ViewTransform::detector_pixel_world(double row, double col) const {
    const double u = (col - cu) / inv_su;
    const double v = (row - cv) / inv_sv;
    const double y = dsd - dso;  // detector plane in scanner frame
    return {cos_a * u - sin_a * y + iso[0], sin_a * u + cos_a * y + iso[1], v + iso[2]};
}

std::array<double, 2> project_point(const ScannerGeometry& geom, int view_index, const Vec3& p) {
    for (double c : p)
        if (!std::isfinite(c))
            throw InvalidArgumentError("project_point: non-finite world coordinate");
    const ViewTransform t = ViewTransform::make(geom, view_index);
    double u, v;
    if (!t.project(p, u, v))
        throw DegenerateProjectionError(
            "project_point: point at or behind the source plane in view " +
                std::to_string(view_index),
            view_index);
    return {u, v};
}

std::vector<double> uniform_angles(int k) {
    if (k < 1) throw InvalidArgumentError("uniform_angles: k must be >= 1, got " + std::to_string(k));
    std::vector<double> a(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) a[size_t(i)] = double(i) * std::numbers::pi / double(k);
    return a;
}

}  // namespace difct
