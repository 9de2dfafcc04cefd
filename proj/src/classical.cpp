#include "difct/classical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace difct {

void SartConfig::validate() const {
    if (n_iterations < 1)
        throw InvalidArgumentError("sart: n_iterations must be >= 1, got " +
                                   std::to_string(n_iterations));
    if (!(relaxation > 0.0) || !(relaxation < 2.0))
        throw InvalidArgumentError("sart: relaxation must be in (0,2), got " +
                                   std::to_string(relaxation));
}

namespace {

void check_fingerprint(const ProjectionStack& proj, const ScannerGeometry& geom,
                       const char* who) {
    if (proj.geometry_fingerprint != geom.fingerprint())
        throw InvalidArgumentError(std::string(who) +
                                   ": projection stack is not bound to this geometry "
                                   "(fingerprint mismatch)");
}

Volume3D make_output(const ScannerGeometry& geom, Shape3 out_shape) {
    for (int64_t d : out_shape)
        if (d <= 0) throw InvalidArgumentError("reconstruct: non-positive output axis");
    const Vec3 ext = geom.volume_extent_mm;
    return Volume3D::zeros(out_shape, {ext[0] / double(out_shape[0]), ext[1] / double(out_shape[1]),
                                       ext[2] / double(out_shape[2])});
}

// Bilinear detector read with zero padding outside the panel.
inline double detector_read(const float* img, int rows, int cols, double u_px, double v_px) {
    const int64_t x0 = int64_t(std::floor(u_px)), y0 = int64_t(std::floor(v_px));
    const double wx = u_px - double(x0), wy = v_px - double(y0);
    double acc = 0.0;
    for (int iy = 0; iy < 2; ++iy) {
        const int64_t y = y0 + iy;
        if (y < 0 || y >= rows) continue;
        const double wyv = iy ? wy : 1.0 - wy;
        for (int ix = 0; ix < 2; ++ix) {
            const int64_t x = x0 + ix;
            if (x < 0 || x >= cols) continue;
            const double wxv = ix ? wx : 1.0 - wx;
            acc += wyv * wxv * double(img[y * cols + x]);
        }
    }
    return acc;
}

}  // namespace

std::vector<double> fdk_filter_kernel(FdkConfig::Filter filter, int cols, double tau_mm) {
    const int n = 2 * cols - 1;
    std::vector<double> h(size_t(n), 0.0);
    const double tau2 = tau_mm * tau_mm;
    for (int i = 0; i < n; ++i) {
        const int k = i - (cols - 1);
        if (filter == FdkConfig::Filter::ram_lak) {
            if (k == 0)
                h[size_t(i)] = 1.0 / (4.0 * tau2);
            else if (k % 2 != 0)
                h[size_t(i)] = -1.0 / (std::numbers::pi * std::numbers::pi * k * k * tau2);
        } else {
            h[size_t(i)] =
                -2.0 / (std::numbers::pi * std::numbers::pi * tau2 * (4.0 * k * k - 1.0));
        }
    }
    if (filter == FdkConfig::Filter::ram_lak) {
        // zero the DC bin exactly; the truncated tail leaves a small residual
        double mean = 0.0;
        for (double v : h) mean += v;
        mean /= double(n);
        for (double& v : h) v -= mean;
    }
    return h;
}

Volume3D fdk_reconstruct(const ProjectionStack& proj, const ScannerGeometry& geom,
                         Shape3 out_shape, const FdkConfig& cfg) {
    geom.validate();
    check_fingerprint(proj, geom, "fdk");
    const int K = proj.n_views();
    const int rows = proj.det_rows, cols = proj.det_cols;
    const double R = geom.dso_mm, D = geom.dsd_mm;
    const double mag = R / D;  // rescale detector to the isocenter plane
    const double tau_u = geom.det_spacing_u_mm * mag;
    const double tau_v = geom.det_spacing_v_mm * mag;
    const std::vector<double> kernel = fdk_filter_kernel(cfg.filter, cols, tau_u);

    // cosine weight + row-wise ramp filtering, per view
    std::vector<float> filtered(size_t(int64_t(K) * rows * cols));
    const double cu = (cols - 1) / 2.0, cv = (rows - 1) / 2.0;
    for (int k = 0; k < K; ++k) {
        const float* src = proj.view(k);
        float* dst = filtered.data() + int64_t(k) * rows * cols;
#pragma omp parallel for schedule(static)
        for (int r = 0; r < rows; ++r) {
            const double v = (r - cv) * tau_v;
            std::vector<double> wrow(static_cast<size_t>(cols));
            for (int c = 0; c < cols; ++c) {
                const double u = (c - cu) * tau_u;
                const double cosw = R / std::sqrt(R * R + u * u + v * v);
                wrow[size_t(c)] = double(src[int64_t(r) * cols + c]) * cosw;
            }
            for (int c = 0; c < cols; ++c) {
                double acc = 0.0;
                const double* kc = kernel.data() + (cols - 1) + c;
                for (int j = 0; j < cols; ++j) acc += wrow[size_t(j)] * kc[-j];
                dst[int64_t(r) * cols + c] = float(acc * tau_u);
            }
        }
    }

    Volume3D out = make_output(geom, out_shape);
    const auto [H, W, Dz] = out.shape;
    std::vector<ViewTransform> views;
    views.reserve(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) views.push_back(ViewTransform::make(geom, k));
    const double dbeta = std::numbers::pi / double(K);

#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
            for (int64_t kz = 0; kz < Dz; ++kz) {
                const Vec3 p{(double(i) + 0.5) * out.spacing[0], (double(j) + 0.5) * out.spacing[1],
                             (double(kz) + 0.5) * out.spacing[2]};
                double acc = 0.0;
                for (int k = 0; k < K; ++k) {
                    const ViewTransform& vt = views[size_t(k)];
                    const Vec3 ps = vt.to_scanner(p);
                    const double w = ps[1] + R;
                    if (w <= 1e-6) continue;
                    const double u_px = D * ps[0] / w * vt.inv_su + vt.cu;
                    const double v_px = D * ps[2] / w * vt.inv_sv + vt.cv;
                    const double dist_w = (R / w) * (R / w);
                    acc += dist_w * detector_read(filtered.data() + int64_t(k) * rows * cols, rows,
                                                  cols, u_px, v_px);
                }
                acc *= dbeta;
                if (cfg.clamp_nonneg && acc < 0.0) acc = 0.0;
                out.at(i, j, kz) = float(acc);
            }
        }
    }
    return out;
}

Volume3D sart_reconstruct(const ProjectionStack& proj, const ScannerGeometry& geom,
                          Shape3 out_shape, const SartConfig& cfg,
                          std::vector<double>* residual_curve) {
    geom.validate();
    cfg.validate();
    check_fingerprint(proj, geom, "sart");
    const int K = proj.n_views();
    const int rows = proj.det_rows, cols = proj.det_cols;
    const int64_t plane = int64_t(rows) * cols;

    Volume3D x = make_output(geom, out_shape);
    const auto [H, W, Dz] = x.shape;
    const Vec3 ext = x.extent_mm();

    // per-ray chord lengths through the volume box, per view
    std::vector<float> ray_len(size_t(K) * size_t(plane), 0.0f);
    std::vector<ViewTransform> views;
    views.reserve(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) views.push_back(ViewTransform::make(geom, k));
    for (int k = 0; k < K; ++k) {
        const ViewTransform& vt = views[size_t(k)];
        const Vec3 src = vt.source_world();
        float* lens = ray_len.data() + int64_t(k) * plane;
#pragma omp parallel for schedule(static)
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                const Vec3 px = vt.detector_pixel_world(double(r), double(c));
                Vec3 dir{px[0] - src[0], px[1] - src[1], px[2] - src[2]};
                const double len =
                    std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
                dir = {dir[0] / len, dir[1] / len, dir[2] / len};
                double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
                bool hit = true;
                for (int a = 0; a < 3; ++a) {
                    const double o = src[size_t(a)], d = dir[size_t(a)];
                    if (std::abs(d) < 1e-12) {
                        if (o < 0.0 || o > ext[size_t(a)]) hit = false;
                        continue;
                    }
                    double ta = (0.0 - o) / d, tb = (ext[size_t(a)] - o) / d;
                    if (ta > tb) std::swap(ta, tb);
                    t0 = std::max(t0, ta);
                    t1 = std::min(t1, tb);
                }
                lens[int64_t(r) * cols + c] = (hit && t1 > t0) ? float(t1 - t0) : 0.0f;
            }
        }
    }

    std::vector<float> sim(static_cast<size_t>(plane));
    std::vector<float> resid(static_cast<size_t>(plane));
    const float lambda = float(cfg.relaxation);
    for (int sweep = 0; sweep < cfg.n_iterations; ++sweep) {
        for (int k = 0; k < K; ++k) {
            forward_project_single(x, geom, k, sim.data());
            const float* meas = proj.view(k);
            const float* lens = ray_len.data() + int64_t(k) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const float r = meas[i] - sim[size_t(i)];
                if (!std::isfinite(r))
                    throw NumericalError("sart: non-finite residual at sweep " +
                                         std::to_string(sweep) + ", view " + std::to_string(k));
                resid[size_t(i)] = lens[i] > 0.0f ? r / lens[i] : 0.0f;
            }
            const ViewTransform& vt = views[size_t(k)];
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < H; ++i) {
                for (int64_t j = 0; j < W; ++j) {
                    for (int64_t kz = 0; kz < Dz; ++kz) {
                        const Vec3 p{(double(i) + 0.5) * x.spacing[0],
                                     (double(j) + 0.5) * x.spacing[1],
                                     (double(kz) + 0.5) * x.spacing[2]};
                        double u_px, v_px;
                        if (!vt.project(p, u_px, v_px)) continue;
                        const double upd = detector_read(resid.data(), rows, cols, u_px, v_px);
                        float v = x.at(i, j, kz) + lambda * float(upd);
                        if (cfg.nonnegativity_clamp && v < 0.0f) v = 0.0f;
                        x.at(i, j, kz) = v;
                    }
                }
            }
        }
        if (residual_curve) {
            double ss = 0.0;
            for (int k = 0; k < K; ++k) {
                forward_project_single(x, geom, k, sim.data());
                const float* meas = proj.view(k);
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = double(meas[i]) - double(sim[size_t(i)]);
                    ss += d * d;
                }
            }
            residual_curve->push_back(std::sqrt(ss / double(int64_t(K) * plane)));
        }
    }
    return x;
}

}  // namespace difct
