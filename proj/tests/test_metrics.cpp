#include <doctest.h>

#include <cmath>

#include "difct/metrics.hpp"
#include "support.hpp"

using namespace difct;

namespace {

// brute-force local-window SSIM, straight from the definition
double ssim_bruteforce(const Volume3D& a, const Volume3D& b, int w, double k1, double k2,
                       double L) {
    const double c1 = (k1 * L) * (k1 * L), c2 = (k2 * L) * (k2 * L);
    const auto [H, W, D] = a.shape;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i + w <= H; ++i)
        for (int64_t j = 0; j + w <= W; ++j)
            for (int64_t k = 0; k + w <= D; ++k) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int64_t di = 0; di < w; ++di)
                    for (int64_t dj = 0; dj < w; ++dj)
                        for (int64_t dk = 0; dk < w; ++dk) {
                            const double va = a.at(i + di, j + dj, k + dk);
                            const double vb = b.at(i + di, j + dj, k + dk);
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                const double n = double(w) * w * w;
                const double mua = sa / n, mub = sb / n;
                const double va = saa / n - mua * mua, vb = sbb / n - mub * mub;
                const double cov = sab / n - mua * mub;
                total += ((2 * mua * mub + c1) * (2 * cov + c2)) /
                         ((mua * mua + mub * mub + c1) * (va + vb + c2));
                count++;
            }
    return total / double(count);
}

}  // namespace

TEST_CASE("psnr: identical, anchor, and hand-computed values") {
    auto a = testing::make_test_sphere(16);
    const auto same = psnr(a, a);
    CHECK(same.identical);
    CHECK(same.db == 99.0);

    // MSE = data_range^2  ->  0 dB
    auto zero = Volume3D::zeros({4, 4, 4}, {1, 1, 1});
    auto ones = zero;
    for (auto& v : ones.data) v = 1.0f;
    CHECK(psnr(zero, ones, 1.0).db == doctest::Approx(0.0));

    // uniform offset 0.1 -> 10*log10(1/0.01) = 20 dB
    auto shifted = a;
    for (auto& v : shifted.data) v += 0.1f;
    CHECK(psnr(a, shifted, 1.0).db == doctest::Approx(20.0).epsilon(1e-4));
}

TEST_CASE("psnr is symmetric and rejects shape mismatch") {
    auto a = testing::make_test_sphere(8);
    auto b = make_phantom(PhantomKind::random_ellipsoids, {8, 8, 8}, {25.6, 25.6, 25.6}, 4);
    CHECK(psnr(a, b).db == doctest::Approx(psnr(b, a).db));
    auto c = Volume3D::zeros({4, 4, 4}, {1, 1, 1});
    CHECK_THROWS_AS(psnr(a, c), InvalidArgumentError);
    CHECK_THROWS_AS(psnr(a, a, 0.0), InvalidArgumentError);
}

TEST_CASE("psnr strictly decreases as noise grows") {
    auto a = testing::make_test_sphere(16);
    Rng rng(55);
    std::vector<float> noise(a.data.size());
    for (auto& v : noise) v = float(rng.uniform(-1.0, 1.0));
    double prev = 1e9;
    for (double amp : {0.01, 0.03, 0.1, 0.3}) {
        auto noisy = a;
        for (size_t i = 0; i < noisy.data.size(); ++i)
            noisy.data[i] += float(amp) * noise[i];
        const double p = psnr(a, noisy).db;
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("ssim: identical volumes score exactly 1") {
    auto a = testing::make_test_sphere(16);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim matches the brute-force oracle") {
    auto a = make_phantom(PhantomKind::random_ellipsoids, {12, 12, 12}, {4, 4, 4}, 3);
    auto b = make_phantom(PhantomKind::random_ellipsoids, {12, 12, 12}, {4, 4, 4}, 9);
    const double fast = ssim(a, b, 5);
    const double slow = ssim_bruteforce(a, b, 5, 0.01, 0.03, 1.0);
    CHECK(fast == doctest::Approx(slow).epsilon(1e-9));
}

TEST_CASE("ssim: inverted volume scores below 0.5") {
    auto a = testing::make_test_sphere(16);
    auto inv = a;
    for (auto& v : inv.data) v = 1.0f - v;
    CHECK(ssim(a, inv) < 0.5);
}

TEST_CASE("ssim: constant volumes reduce to the luminance term") {
    auto a = Volume3D::zeros({8, 8, 8}, {1, 1, 1});
    auto b = a;
    const double c1v = 0.3, c2v = 0.7;
    for (auto& v : a.data) v = float(c1v);
    for (auto& v : b.data) v = float(c2v);
    const double c1 = 0.01 * 0.01;
    const double expect = (2 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
    CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("ssim is symmetric and validates the window") {
    auto a = testing::make_test_sphere(12);
    auto b = make_phantom(PhantomKind::random_ellipsoids, {12, 12, 12},
                          {17.07, 17.07, 17.07}, 2);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(a, b, 4), InvalidArgumentError);
    auto tiny = Volume3D::zeros({4, 4, 4}, {1, 1, 1});
    CHECK_THROWS_AS(ssim(tiny, tiny, 7), InvalidArgumentError);
}

TEST_CASE("eval report aggregates and serializes") {
    EvalReport rep;
    rep.cases.push_back({"fdk", 10, 64, 0, 20.0, false, 0.5, 1.0});
    rep.cases.push_back({"fdk", 10, 64, 1, 22.0, false, 0.7, 2.0});
    rep.cases.push_back({"sart", 10, 64, 0, 26.0, false, 0.9, 30.0});
    rep.warnings.push_back("dif model for K=6 missing, skipped");
    CHECK(rep.mean_psnr("fdk", 10, 64) == doctest::Approx(21.0));
    CHECK(rep.mean_ssim("fdk", 10, 64) == doctest::Approx(0.6));
    CHECK(rep.mean_seconds("sart", 10, 64) == doctest::Approx(30.0));
    const auto csv = rep.to_csv();
    CHECK(csv.find("method,k_views,resolution") != std::string::npos);
    CHECK(csv.find("sart,10,64") != std::string::npos);
    CHECK(csv.find("# warning: dif model for K=6 missing") != std::string::npos);
    const auto txt = rep.to_text();
    CHECK(txt.find("fdk") != std::string::npos);
}
