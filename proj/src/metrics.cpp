#include "difct/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <tuple>

#include "difct/difnet.hpp"
#include "difct/io.hpp"

namespace difct {

namespace {
void check_shapes(const Volume3D& a, const Volume3D& b, const char* who) {
    if (a.shape != b.shape)
        throw InvalidArgumentError(std::string(who) + ": volume shapes differ, [" +
                                   std::to_string(a.shape[0]) + "," + std::to_string(a.shape[1]) +
                                   "," + std::to_string(a.shape[2]) + "] vs [" +
                                   std::to_string(b.shape[0]) + "," + std::to_string(b.shape[1]) +
                                   "," + std::to_string(b.shape[2]) + "]");
}
}  // namespace

PsnrResult psnr(const Volume3D& a, const Volume3D& b, double data_range) {
    check_shapes(a, b, "psnr");
    if (!(data_range > 0.0)) throw InvalidArgumentError("psnr: data_range must be positive");
    double mse = 0.0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(a.data[size_t(i)]) - double(b.data[size_t(i)]);
        mse += d * d;
    }
    mse /= double(n);
    PsnrResult r;
    if (mse == 0.0) {
        r.identical = true;
        r.db = 99.0;
        return r;
    }
    r.db = std::min(99.0, 10.0 * std::log10(data_range * data_range / mse));
    return r;
}

double ssim(const Volume3D& a, const Volume3D& b, int window, double k1, double k2,
            double data_range) {
    check_shapes(a, b, "ssim");
    if (window < 1 || window % 2 == 0)
        throw InvalidArgumentError("ssim: window must be odd and positive, got " +
                                   std::to_string(window));
    const auto [H, W, D] = a.shape;
    if (H < window || W < window || D < window)
        throw InvalidArgumentError("ssim: volume smaller than the " + std::to_string(window) +
                                   "^3 window");
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);

    // separable box sums over x (axis 0), y (axis 1), z (axis 2) for the five
    // local moments
    const int64_t n = a.numel();
    std::vector<double> ma(static_cast<size_t>(n)), mb(static_cast<size_t>(n)), maa(static_cast<size_t>(n)), mbb(static_cast<size_t>(n)),
        mab(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double va = a.data[size_t(i)], vb = b.data[size_t(i)];
        ma[size_t(i)] = va;
        mb[size_t(i)] = vb;
        maa[size_t(i)] = va * va;
        mbb[size_t(i)] = vb * vb;
        mab[size_t(i)] = va * vb;
    }
    const int64_t strideI = W * D, strideJ = D, strideK = 1;
    auto box_pass = [&](std::vector<double>& buf, int64_t stride, int64_t len, int64_t outer,
                        int64_t inner_count, int64_t inner_stride) {
        std::vector<double> tmp(static_cast<size_t>(len));
        const int64_t valid = len - window + 1;
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t q = 0; q < inner_count; ++q) {
                double* base = buf.data();
                const int64_t offset = o * (stride * len) + q * inner_stride;
                double acc = 0.0;
                for (int64_t t = 0; t < window; ++t) acc += base[offset + t * stride];
                for (int64_t t = 0; t < valid; ++t) {
                    tmp[size_t(t)] = acc;
                    if (t + 1 < valid)
                        acc += base[offset + (t + window) * stride] - base[offset + t * stride];
                }
                for (int64_t t = 0; t < valid; ++t) base[offset + t * stride] = tmp[size_t(t)];
            }
        }
    };
    // axis 2 (k, stride 1): lines indexed by (i,j)
    for (auto* buf : {&ma, &mb, &maa, &mbb, &mab})
        box_pass(*buf, strideK, D, H * W, 1, 0);
    // axis 1 (j, stride D): for each i, lines indexed by k
    for (auto* buf : {&ma, &mb, &maa, &mbb, &mab})
        box_pass(*buf, strideJ, W, H, D, strideK);
    // axis 0 (i, stride W*D): lines indexed by (j,k)
    for (auto* buf : {&ma, &mb, &maa, &mbb, &mab})
        box_pass(*buf, strideI, H, 1, W * D, 1);

    const double wn = double(window) * window * window;
    const int64_t Hv = H - window + 1, Wv = W - window + 1, Dv = D - window + 1;
    double total = 0.0;
    for (int64_t i = 0; i < Hv; ++i)
        for (int64_t j = 0; j < Wv; ++j)
            for (int64_t k = 0; k < Dv; ++k) {
                const size_t idx = size_t(i * strideI + j * strideJ + k);
                const double mua = ma[idx] / wn, mub = mb[idx] / wn;
                const double va = maa[idx] / wn - mua * mua;
                const double vb = mbb[idx] / wn - mub * mub;
                const double cov = mab[idx] / wn - mua * mub;
                const double num = (2 * mua * mub + c1) * (2 * cov + c2);
                const double den = (mua * mua + mub * mub + c1) * (va + vb + c2);
                total += num / den;
            }
    return total / double(Hv * Wv * Dv);
}

double EvalReport::mean_psnr(const std::string& method, int k, int64_t res) const {
    double s = 0.0;
    int n = 0;
    for (const auto& c : cases)
        if (c.method == method && c.k_views == k && c.resolution == res) {
            s += c.psnr_db;
            n++;
        }
    return n ? s / n : std::nan("");
}

double EvalReport::mean_ssim(const std::string& method, int k, int64_t res) const {
    double s = 0.0;
    int n = 0;
    for (const auto& c : cases)
        if (c.method == method && c.k_views == k && c.resolution == res) {
            s += c.ssim_score;
            n++;
        }
    return n ? s / n : std::nan("");
}

double EvalReport::mean_seconds(const std::string& method, int k, int64_t res) const {
    double s = 0.0;
    int n = 0;
    for (const auto& c : cases)
        if (c.method == method && c.k_views == k && c.resolution == res) {
            s += c.seconds;
            n++;
        }
    return n ? s / n : std::nan("");
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "method,k_views,resolution,case,psnr_db,ssim,seconds\n";
    char line[256];
    for (const auto& c : cases) {
        std::snprintf(line, sizeof line, "%s,%d,%lld,%d,%.4f,%.6f,%.3f\n", c.method.c_str(),
                      c.k_views, (long long)c.resolution, c.case_index, c.psnr_db, c.ssim_score,
                      c.seconds);
        os << line;
    }
    for (const auto& w : warnings) os << "# warning: " << w << "\n";
    return os.str();
}

EvalReport run_benchmark(const BenchmarkConfig& cfg, const std::vector<Volume3D>& ground_truth,
                         const GeometrySpec& spec) {
    using Clock = std::chrono::steady_clock;
    EvalReport report;
    if (ground_truth.empty()) throw InvalidArgumentError("benchmark: empty dataset");

    // load whichever DIF checkpoints exist up front
    std::map<int, DifModel> models;
    const bool wants_dif =
        std::find(cfg.methods.begin(), cfg.methods.end(), "dif") != cfg.methods.end();
    if (wants_dif) {
        for (int k : cfg.view_counts) {
            auto it = cfg.dif_models.find(k);
            if (it == cfg.dif_models.end() || !std::filesystem::exists(it->second)) {
                report.warnings.push_back("dif model for K=" + std::to_string(k) +
                                          " missing, skipped");
                continue;
            }
            models.emplace(k, load_model(it->second));
        }
    }

    for (int k : cfg.view_counts) {
        const ScannerGeometry geom = spec.with_views(k);
        for (size_t ci = 0; ci < ground_truth.size(); ++ci) {
            const Volume3D& gt = ground_truth[ci];
            const ProjectionStack stack = forward_project(gt, geom);
            for (int64_t res : cfg.resolutions) {
                const Shape3 out_shape{res, res, res};
                const Volume3D gt_res = resample_trilinear(gt, out_shape);
                for (const auto& method : cfg.methods) {
                    Volume3D recon;
                    const auto t0 = Clock::now();
                    if (method == "fdk") {
                        recon = fdk_reconstruct(stack, geom, out_shape, cfg.fdk);
                    } else if (method == "sart") {
                        recon = sart_reconstruct(stack, geom, out_shape, cfg.sart);
                    } else if (method == "dif") {
                        auto it = models.find(k);
                        if (it == models.end()) continue;
                        recon = dif_reconstruct(it->second, stack, geom, out_shape);
                    } else {
                        throw InvalidArgumentError("benchmark: unknown method '" + method + "'");
                    }
                    const auto t1 = Clock::now();
                    EvalCase c;
                    c.method = method;
                    c.k_views = k;
                    c.resolution = res;
                    c.case_index = int(ci);
                    const auto p = psnr(recon, gt_res);
                    c.psnr_db = p.db;
                    c.psnr_identical = p.identical;
                    c.ssim_score = ssim(recon, gt_res);
                    c.seconds = std::chrono::duration<double>(t1 - t0).count();
                    report.cases.push_back(std::move(c));
                }
            }
        }
    }
    return report;
}

std::string EvalReport::to_text() const {
    // aggregate over cases: one row per (method, K, res)
    std::map<std::tuple<std::string, int, int64_t>, int> keys;
    for (const auto& c : cases) keys[{c.method, c.k_views, c.resolution}]++;
    std::ostringstream os;
    char line[256];
    os << "method           K   res    PSNR(dB)  SSIM    time(s)\n";
    for (const auto& [key, count] : keys) {
        const auto& [m, k, r] = key;
        std::snprintf(line, sizeof line, "%-15s %3d  %4lld   %7.2f  %.4f  %8.2f  (n=%d)\n",
                      m.c_str(), k, (long long)r, mean_psnr(m, k, r), mean_ssim(m, k, r),
                      mean_seconds(m, k, r), count);
        os << line;
    }
    for (const auto& w : warnings) os << "warning: " << w << "\n";
    return os.str();
}

}  // namespace difct
