#include "difct/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace difct {

Volume3D Volume3D::zeros(Shape3 shape, Vec3 spacing) {
    Volume3D v;
    v.shape = shape;
    v.spacing = spacing;
    v.data.assign(size_t(shape[0] * shape[1] * shape[2]), 0.0f);
    return v;
}

void Volume3D::validate() const {
    for (int64_t d : shape)
        if (d <= 0) throw InvalidArgumentError("volume: non-positive shape axis");
    for (double s : spacing)
        if (!(s > 0.0)) throw InvalidArgumentError("volume: non-positive spacing");
    if (int64_t(data.size()) != numel())
        throw InvalidArgumentError("volume: buffer size " + std::to_string(data.size()) +
                                   " does not match shape product " + std::to_string(numel()));
    for (float v : data)
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
            throw InvalidArgumentError("volume: intensity outside [0,1]");
}

namespace {

inline float trilinear_impl(const Volume3D& vol, const Vec3& p) {
    const auto [H, W, D] = vol.shape;
    const double fi = p[0] / vol.spacing[0] - 0.5;
    const double fj = p[1] / vol.spacing[1] - 0.5;
    const double fk = p[2] / vol.spacing[2] - 0.5;
    int64_t i0 = int64_t(std::floor(fi)), j0 = int64_t(std::floor(fj)), k0 = int64_t(std::floor(fk));
    const double wi = fi - double(i0), wj = fj - double(j0), wk = fk - double(k0);
    const int64_t i1 = std::clamp<int64_t>(i0 + 1, 0, H - 1);
    const int64_t j1 = std::clamp<int64_t>(j0 + 1, 0, W - 1);
    const int64_t k1 = std::clamp<int64_t>(k0 + 1, 0, D - 1);
    i0 = std::clamp<int64_t>(i0, 0, H - 1);
    j0 = std::clamp<int64_t>(j0, 0, W - 1);
    k0 = std::clamp<int64_t>(k0, 0, D - 1);
    const double c000 = vol.at(i0, j0, k0), c001 = vol.at(i0, j0, k1);
    const double c010 = vol.at(i0, j1, k0), c011 = vol.at(i0, j1, k1);
    const double c100 = vol.at(i1, j0, k0), c101 = vol.at(i1, j0, k1);
    const double c110 = vol.at(i1, j1, k0), c111 = vol.at(i1, j1, k1);
    const double c00 = c000 * (1 - wk) + c001 * wk;
    const double c01 = c010 * (1 - wk) + c011 * wk;
    const double c10 = c100 * (1 - wk) + c101 * wk;
    const double c11 = c110 * (1 - wk) + c111 * wk;
    const double c0 = c00 * (1 - wj) + c01 * wj;
    const double c1 = c10 * (1 - wj) + c11 * wj;
    return float(c0 * (1 - wi) + c1 * wi);
}

}  // namespace

float trilinear_sample(const Volume3D& vol, const Vec3& p) {
    const Vec3 ext = vol.extent_mm();
    constexpr double tol = 1e-6;  // mm of round-off slack
    for (int a = 0; a < 3; ++a)
        if (p[size_t(a)] < -tol || p[size_t(a)] > ext[size_t(a)] + tol)
            throw OutOfBoundsError("trilinear_sample: coordinate " + std::to_string(p[size_t(a)]) +
                                   " outside extent [0," + std::to_string(ext[size_t(a)]) +
                                   "] on axis " + std::to_string(a));
    return trilinear_impl(vol, p);
}

float trilinear_sample_clamped(const Volume3D& vol, const Vec3& p) {
    return trilinear_impl(vol, p);
}

PointBatch sample_balanced_points(const Volume3D& vol, int64_t n, float threshold,
                                  uint64_t rng_seed) {
    if (n <= 0 || n % 2 != 0)
        throw InvalidArgumentError("balanced sampler: n must be positive and even, got " +
                                   std::to_string(n));
    bool any_fg = false, any_bg = false;
    for (float v : vol.data) {
        if (v > threshold) any_fg = true;
        else any_bg = true;
        if (any_fg && any_bg) break;
    }
    if (!any_fg)
        throw DegenerateVolumeError("balanced sampler: no voxel above threshold " +
                                    std::to_string(threshold));
    if (!any_bg)
        throw DegenerateVolumeError("balanced sampler: no voxel at or below threshold " +
                                    std::to_string(threshold));

    const Vec3 ext = vol.extent_mm();
    const int64_t half = n / 2;
    Rng rng(rng_seed);
    PointBatch out;
    out.coords.reserve(static_cast<size_t>(n));
    out.values.reserve(static_cast<size_t>(n));
    int64_t fg = 0, bg = 0;
    constexpr int64_t kMaxAttempts = 10'000'000;
    for (int64_t attempt = 0; attempt < kMaxAttempts && (fg < half || bg < half); ++attempt) {
        const Vec3 p{rng.uniform() * ext[0], rng.uniform() * ext[1], rng.uniform() * ext[2]};
        const float v = trilinear_impl(vol, p);
        const bool is_fg = v > threshold;
        if (is_fg && fg == half) continue;
        if (!is_fg && bg == half) continue;
        (is_fg ? fg : bg)++;
        out.coords.push_back(p);
        out.values.push_back(v);
    }
    if (fg < half || bg < half)
        throw DegenerateVolumeError("balanced sampler: attempt cap hit with " + std::to_string(fg) +
                                    " foreground / " + std::to_string(bg) + " background of " +
                                    std::to_string(half) + " each");
    return out;
}

PointBatch grid_points(const Vec3& extent_mm, const Shape3& out_shape) {
    for (int64_t d : out_shape)
        if (d <= 0)
            throw InvalidArgumentError("grid_points: non-positive output axis in shape [" +
                                       std::to_string(out_shape[0]) + "," +
                                       std::to_string(out_shape[1]) + "," +
                                       std::to_string(out_shape[2]) + "]");
    const auto [H, W, D] = out_shape;
    const double sx = extent_mm[0] / double(H);
    const double sy = extent_mm[1] / double(W);
    const double sz = extent_mm[2] / double(D);
    PointBatch out;
    out.coords.resize(size_t(H * W * D));
    int64_t idx = 0;
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
            for (int64_t k = 0; k < D; ++k)
                out.coords[size_t(idx++)] = {(double(i) + 0.5) * sx, (double(j) + 0.5) * sy,
                                             (double(k) + 0.5) * sz};
    return out;
}

PhantomKind phantom_kind_from_string(const std::string& s) {
    if (s == "shepp_logan_3d") return PhantomKind::shepp_logan_3d;
    if (s == "random_ellipsoids") return PhantomKind::random_ellipsoids;
    throw InvalidArgumentError("unknown phantom kind '" + s + "'");
}

std::string to_string(PhantomKind k) {
    return k == PhantomKind::shepp_logan_3d ? "shepp_logan_3d" : "random_ellipsoids";
}

namespace {

struct Ellipsoid {
    Vec3 center;     // in normalized [-1,1] coordinates
    Vec3 half_axes;  // normalized
    double angle_z;  // rotation about z
    float value;
};

void add_ellipsoids(Volume3D& vol, const std::vector<Ellipsoid>& parts, bool clip01) {
    const auto [H, W, D] = vol.shape;
    const Vec3 ext = vol.extent_mm();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
            for (int64_t k = 0; k < D; ++k) {
                // normalized coordinates in [-1, 1]
                const double x = (2.0 * (double(i) + 0.5) * vol.spacing[0] - ext[0]) / ext[0];
                const double y = (2.0 * (double(j) + 0.5) * vol.spacing[1] - ext[1]) / ext[1];
                const double z = (2.0 * (double(k) + 0.5) * vol.spacing[2] - ext[2]) / ext[2];
                double acc = vol.at(i, j, k);
                for (const auto& e : parts) {
                    const double c = std::cos(e.angle_z), s = std::sin(e.angle_z);
                    const double dx = x - e.center[0], dy = y - e.center[1], dz = z - e.center[2];
                    const double rx = (c * dx + s * dy) / e.half_axes[0];
                    const double ry = (-s * dx + c * dy) / e.half_axes[1];
                    const double rz = dz / e.half_axes[2];
                    if (rx * rx + ry * ry + rz * rz <= 1.0) acc += e.value;
                }
                vol.at(i, j, k) = clip01 ? float(std::clamp(acc, 0.0, 1.0)) : float(acc);
            }
        }
    }
}

Volume3D shepp_logan_3d(Shape3 shape, Vec3 spacing) {
    // 3D Shepp-Logan ellipsoid set (Kak & Slaney parametrization extended to
    // z), intensities scaled so the densest region lands at 1.0.
    static const std::vector<Ellipsoid> parts = {
        {{0, 0, 0}, {0.69, 0.92, 0.90}, 0.0, 1.0f},
        {{0, 0, 0}, {0.6624, 0.874, 0.88}, 0.0, -0.4f},
        {{-0.22, 0, -0.25}, {0.41, 0.16, 0.21}, 3 * std::numbers::pi / 5, -0.1f},
        {{0.22, 0, -0.25}, {0.31, 0.11, 0.22}, 2 * std::numbers::pi / 5, -0.1f},
        {{0, 0.35, -0.25}, {0.21, 0.25, 0.50}, 0.0, 0.1f},
        {{0, 0.10, -0.25}, {0.046, 0.046, 0.046}, 0.0, 0.1f},
        {{-0.08, -0.65, -0.25}, {0.046, 0.023, 0.02}, 0.0, 0.05f},
        {{0.06, -0.65, -0.25}, {0.046, 0.023, 0.02}, 0.0, 0.05f},
        {{0.06, -0.105, 0.625}, {0.056, 0.04, 0.10}, std::numbers::pi / 2, 0.1f},
        {{0, 0.10, 0.625}, {0.056, 0.056, 0.10}, 0.0, -0.1f},
    };
    Volume3D vol = Volume3D::zeros(shape, spacing);
    add_ellipsoids(vol, parts, true);
    return vol;
}

Volume3D random_ellipsoid_phantom(Shape3 shape, Vec3 spacing, uint64_t seed) {
    Rng rng(seed);
    std::vector<Ellipsoid> parts;
    // 5..12 structural parts: bulk shapes, some carving out cavities
    const int count = 5 + int(rng.below(8));
    for (int e = 0; e < count; ++e) {
        Ellipsoid el;
        // centers and axes keep every part inside ~85% of the extent, so
        // the border stays exactly 0
        for (int a = 0; a < 3; ++a) el.center[size_t(a)] = rng.uniform(-0.38, 0.38);
        // the first two parts always carry substantial bulk so no draw
        // degenerates into a near-empty volume
        for (int a = 0; a < 3; ++a)
            el.half_axes[size_t(a)] =
                e < 2 ? rng.uniform(0.22, 0.44) : rng.uniform(0.045, 0.21);
        el.angle_z = rng.uniform(0.0, std::numbers::pi);
        const bool carve = e >= 2 && rng.uniform() < 0.4;
        el.value = float(carve ? rng.uniform(-0.55, -0.2) : rng.uniform(0.15, 0.55));
        parts.push_back(el);
    }
    Volume3D vol = Volume3D::zeros(shape, spacing);
    add_ellipsoids(vol, parts, false);

    // broadband texture inside the foreground; without it ten views plus a
    // nonnegativity constraint nearly determine the volume and sparse-view
    // reconstruction degenerates into an easy problem
    struct Wave {
        Vec3 k;
        double phase, amp;
    };
    const int n_waves = 24;
    std::vector<Wave> waves(n_waves);
    for (auto& w : waves) {
        Vec3 dir{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        const double len =
            std::max(1e-6, std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]));
        // band chosen above the voxel Nyquist but below what ten views can
        // resolve angularly over most of the object
        const double wavelength = 6.5 * std::pow(11.0 / 6.5, rng.uniform());  // 6.5..11 mm
        const double kmag = 2.0 * std::numbers::pi / wavelength;
        w.k = {dir[0] / len * kmag, dir[1] / len * kmag, dir[2] / len * kmag};
        w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w.amp = 0.22 / std::sqrt(double(n_waves));
    }
    const auto [H, W, D] = vol.shape;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
            for (int64_t k = 0; k < D; ++k) {
                double v = vol.at(i, j, k);
                if (v > 0.02) {
                    const double x = (double(i) + 0.5) * vol.spacing[0];
                    const double y = (double(j) + 0.5) * vol.spacing[1];
                    const double z = (double(k) + 0.5) * vol.spacing[2];
                    double tex = 0.0;
                    for (const auto& w : waves)
                        tex += w.amp * std::cos(w.k[0] * x + w.k[1] * y + w.k[2] * z + w.phase);
                    // fade the texture in over the first bit of density so
                    // object boundaries stay clean
                    v += tex * std::min(1.0, (v - 0.02) / 0.08);
                }
                vol.at(i, j, k) = float(std::clamp(v, 0.0, 1.0));
            }
    return vol;
}

}  // namespace

Volume3D make_phantom(PhantomKind kind, Shape3 shape, Vec3 spacing, uint64_t rng_seed) {
    for (int64_t d : shape)
        if (d <= 0) throw InvalidArgumentError("make_phantom: non-positive shape axis");
    switch (kind) {
        case PhantomKind::shepp_logan_3d:
            return shepp_logan_3d(shape, spacing);
        case PhantomKind::random_ellipsoids:
            return random_ellipsoid_phantom(shape, spacing, rng_seed);
    }
    throw InvalidArgumentError("make_phantom: unknown kind");
}

Volume3D resample_trilinear(const Volume3D& vol, const Shape3& out_shape) {
    const Vec3 ext = vol.extent_mm();
    if (out_shape == vol.shape) return vol;
    Volume3D out = Volume3D::zeros(out_shape, {ext[0] / double(out_shape[0]),
                                               ext[1] / double(out_shape[1]),
                                               ext[2] / double(out_shape[2])});
    const auto [H, W, D] = out_shape;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
            for (int64_t k = 0; k < D; ++k)
                out.at(i, j, k) = trilinear_sample_clamped(
                    vol, {(double(i) + 0.5) * out.spacing[0], (double(j) + 0.5) * out.spacing[1],
                          (double(k) + 0.5) * out.spacing[2]});
    return out;
}

Volume3D make_sphere_volume(Shape3 shape, Vec3 spacing, double radius_mm, float intensity,
                            double edge_mm) {
    Volume3D vol = Volume3D::zeros(shape, spacing);
    const Vec3 ext = vol.extent_mm();
    const Vec3 c{ext[0] / 2, ext[1] / 2, ext[2] / 2};
    const auto [H, W, D] = shape;
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
            for (int64_t k = 0; k < D; ++k) {
                const double x = (double(i) + 0.5) * spacing[0] - c[0];
                const double y = (double(j) + 0.5) * spacing[1] - c[1];
                const double z = (double(k) + 0.5) * spacing[2] - c[2];
                const double r = std::sqrt(x * x + y * y + z * z);
                double v;
                if (edge_mm <= 0.0) {
                    v = r <= radius_mm ? intensity : 0.0;
                } else {
                    // linear ramp centered on the surface
                    v = intensity * std::clamp((radius_mm - r) / edge_mm + 0.5, 0.0, 1.0);
                }
                vol.at(i, j, k) = float(v);
            }
    return vol;
}

}  // namespace difct
