#pragma once

// Shared fixtures and the finite-difference gradient checker used by the
// unit and acceptance suites.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "difct/difnet.hpp"
#include "difct/geometry.hpp"
#include "difct/tensor.hpp"
#include "difct/volume.hpp"

namespace difct::testing {

// Desk-scale scanner: dso 1000, dsd 1500, square detector, volume extent
// 204.8 mm per axis.
inline ScannerGeometry make_test_geometry(int views = 10, int det = 64,
                                          double det_spacing = 6.4) {
    ScannerGeometry g;
    g.dso_mm = 1000.0;
    g.dsd_mm = 1500.0;
    g.det_rows = det;
    g.det_cols = det;
    g.det_spacing_u_mm = det_spacing;
    g.det_spacing_v_mm = det_spacing;
    g.angles = uniform_angles(views);
    g.volume_extent_mm = {204.8, 204.8, 204.8};
    return g;
}

// 64^3 sphere fixture: radius 60 mm, intensity 1, one-voxel edge ramp.
inline Volume3D make_test_sphere(int64_t n = 64) {
    const double spacing = 204.8 / double(n);
    return make_sphere_volume({n, n, n}, {spacing, spacing, spacing}, 60.0, 1.0f, spacing);
}

inline Rng make_value_rng(uint64_t seed) { return Rng(seed); }

template <class T>
Tensor<T> random_tensor(std::vector<int64_t> shape, uint64_t seed, bool requires_grad = false,
                        double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<T> data(static_cast<size_t>(n));
    for (auto& v : data) v = T(rng.uniform(lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Central-difference gradient check. make_loss rebuilds the graph from the
// current parameter values. Returns the worst violation ratio
// |analytic - fd| / (atol + rtol*max(|analytic|,|fd|)); below 1 passes.
struct GradCheck {
    double eps = 1e-4;
    double rtol = 1e-4;
    double atol = 1e-6;
    int samples_per_tensor = 24;
    uint64_t seed = 1234;

    double max_violation = 0.0;
    std::string worst;

    double run(const std::function<Tensor<double>()>& make_loss,
               std::vector<Tensor<double>> params,
               const std::vector<std::string>& names = {}) {
        for (auto& p : params) {
            p.grad().clear();
        }
        auto loss = make_loss();
        backward(loss);
        std::vector<std::vector<double>> analytic;
        analytic.reserve(params.size());
        for (auto& p : params) {
            if (!p.has_grad())
                analytic.emplace_back(size_t(p.numel()), 0.0);
            else
                analytic.push_back(p.grad());
        }

        Rng rng(seed);
        max_violation = 0.0;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi];
            const int64_t n = p.numel();
            std::vector<int64_t> indices;
            if (n <= samples_per_tensor) {
                for (int64_t i = 0; i < n; ++i) indices.push_back(i);
            } else {
                for (int s = 0; s < samples_per_tensor; ++s)
                    indices.push_back(int64_t(rng.below(uint64_t(n))));
            }
            for (int64_t idx : indices) {
                double* slot = p.data() + idx;
                const double v0 = *slot;
                double lp, lm;
                {
                    NoGradGuard ng;
                    *slot = v0 + eps;
                    lp = make_loss().item();
                    *slot = v0 - eps;
                    lm = make_loss().item();
                    *slot = v0;
                }
                const double fd = (lp - lm) / (2.0 * eps);
                const double a = analytic[pi][size_t(idx)];
                const double denom = atol + rtol * std::max(std::abs(a), std::abs(fd));
                const double violation = std::abs(a - fd) / denom;
                if (violation > max_violation) {
                    max_violation = violation;
                    worst = (pi < names.size() ? names[pi] : "param" + std::to_string(pi)) + "[" +
                            std::to_string(idx) + "] analytic=" + std::to_string(a) +
                            " fd=" + std::to_string(fd);
                }
            }
        }
        return max_violation;
    }
};

// Tiny end-to-end instance: K=2 views on an 8x8 detector, C=8, 8^3 volume.
struct ToySetup {
    ScannerGeometry geom;
    Volume3D volume;
    ProjectionStack proj;
    PointBatch points;

    static ToySetup make(uint64_t seed = 7, int64_t n_points = 16);
};

inline ToySetup ToySetup::make(uint64_t seed, int64_t n_points) {
    ToySetup s;
    s.geom = make_test_geometry(2, 8, 51.2);
    s.volume = make_phantom(PhantomKind::random_ellipsoids, {8, 8, 8}, {25.6, 25.6, 25.6}, seed);
    s.proj = forward_project(s.volume, s.geom);
    s.points = sample_balanced_points(s.volume, n_points, 1e-5f, seed + 1);
    return s;
}

template <class T>
DifModelT<T> make_toy_model(const ScannerGeometry& geom, FusionMode fusion = FusionMode::mlp,
                            uint64_t seed = 11) {
    return DifModelT<T>::create(8, 4, fusion, geom, seed);
}

}  // namespace difct::testing
