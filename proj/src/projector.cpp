#include "difct/projector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace difct {

void ProjectionStack::validate() const {
    if (det_rows <= 0 || det_cols <= 0)
        throw InvalidArgumentError("projection stack: non-positive detector shape");
    if (angles.empty()) throw InvalidArgumentError("projection stack: no views");
    if (int64_t(data.size()) != int64_t(n_views()) * view_stride())
        throw InvalidArgumentError("projection stack: buffer size mismatch");
    for (float v : data)
        if (!std::isfinite(v) || v < 0.0f)
            throw InvalidArgumentError("projection stack: negative or non-finite value");
}

void ProjectionStack::bind_geometry(const ScannerGeometry& geom) {
    if (geom.det_rows != det_rows || geom.det_cols != det_cols)
        throw InvalidArgumentError("projection stack: detector " + std::to_string(det_rows) + "x" +
                                   std::to_string(det_cols) + " does not match geometry " +
                                   std::to_string(geom.det_rows) + "x" +
                                   std::to_string(geom.det_cols));
    if (geom.angles.size() != angles.size())
        throw InvalidArgumentError("projection stack: view count " +
                                   std::to_string(angles.size()) +
                                   " does not match geometry angle count " +
                                   std::to_string(geom.angles.size()));
    for (size_t i = 0; i < angles.size(); ++i)
        if (std::abs(angles[i] - geom.angles[i]) > 1e-12)
            throw InvalidArgumentError("projection stack: angle " + std::to_string(i) +
                                       " differs from geometry");
    geometry_fingerprint = geom.fingerprint();
}

namespace {

// Entry/exit of a ray against the volume bounding box; false when it misses.
bool ray_box(const Vec3& origin, const Vec3& dir, const Vec3& ext, double& t0, double& t1) {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double o = origin[size_t(a)], d = dir[size_t(a)];
        if (std::abs(d) < 1e-12) {
            if (o < 0.0 || o > ext[size_t(a)]) return false;
            continue;
        }
        double ta = (0.0 - o) / d;
        double tb = (ext[size_t(a)] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t0 < t1;
}

void project_view(const Volume3D& vol, const ScannerGeometry& geom, int view_index,
                  double step_mm, float* out) {
    const ViewTransform vt = ViewTransform::make(geom, view_index);
    const Vec3 src = vt.source_world();
    const Vec3 ext = vol.extent_mm();
    const int rows = geom.det_rows, cols = geom.det_cols;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const Vec3 px = vt.detector_pixel_world(double(r), double(c));
            Vec3 dir{px[0] - src[0], px[1] - src[1], px[2] - src[2]};
            const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            dir = {dir[0] / len, dir[1] / len, dir[2] / len};
            double t0, t1;
            double acc = 0.0;
            if (ray_box(src, dir, ext, t0, t1)) {
                const double span = t1 - t0;
                const int64_t n = std::max<int64_t>(1, int64_t(std::ceil(span / step_mm)));
                const double dt = span / double(n);
                for (int64_t s = 0; s < n; ++s) {
                    const double t = t0 + (double(s) + 0.5) * dt;
                    const Vec3 p{src[0] + t * dir[0], src[1] + t * dir[1], src[2] + t * dir[2]};
                    acc += double(trilinear_sample_clamped(vol, p));
                }
                acc *= dt;
            }
            out[int64_t(r) * cols + c] = float(acc);
        }
    }
}

}  // namespace

ProjectionStack forward_project_with_step(const Volume3D& vol, const ScannerGeometry& geom,
                                          double step_mm) {
    geom.validate();
    if (!(step_mm > 0.0)) throw InvalidArgumentError("forward_project: step must be positive");
    ProjectionStack stack;
    stack.det_rows = geom.det_rows;
    stack.det_cols = geom.det_cols;
    stack.angles = geom.angles;
    stack.data.assign(size_t(int64_t(geom.n_views()) * geom.det_rows * geom.det_cols), 0.0f);
    for (int k = 0; k < geom.n_views(); ++k)
        project_view(vol, geom, k, step_mm, stack.view(k));
    stack.geometry_fingerprint = geom.fingerprint();
    return stack;
}

ProjectionStack forward_project(const Volume3D& vol, const ScannerGeometry& geom) {
    const double step = 0.5 * std::min({vol.spacing[0], vol.spacing[1], vol.spacing[2]});
    return forward_project_with_step(vol, geom, step);
}

void forward_project_single(const Volume3D& vol, const ScannerGeometry& geom, int view_index,
                            float* out) {
    if (view_index < 0 || view_index >= geom.n_views())
        throw InvalidArgumentError("forward_project_single: view index " +
                                   std::to_string(view_index) + " out of range [0," +
                                   std::to_string(geom.n_views()) + ")");
    const double step = 0.5 * std::min({vol.spacing[0], vol.spacing[1], vol.spacing[2]});
    project_view(vol, geom, view_index, step, out);
}

}  // namespace difct
