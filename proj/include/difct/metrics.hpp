#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "difct/classical.hpp"
#include "difct/volume.hpp"

namespace difct {

struct GeometrySpec;  // io.hpp

// 10*log10(data_range^2 / MSE); identical volumes are flagged and capped
// at 99 dB.
struct PsnrResult {
    double db = 0.0;
    bool identical = false;
};

PsnrResult psnr(const Volume3D& a, const Volume3D& b, double data_range = 1.0);

// Mean local SSIM over a sliding 3D window with uniform weighting.
double ssim(const Volume3D& a, const Volume3D& b, int window = 7, double k1 = 0.01,
            double k2 = 0.03, double data_range = 1.0);

struct EvalCase {
    std::string method;
    int k_views = 0;
    int64_t resolution = 0;
    int case_index = 0;
    double psnr_db = 0.0;
    bool psnr_identical = false;
    double ssim_score = 0.0;
    double seconds = 0.0;
};

struct EvalReport {
    std::vector<EvalCase> cases;
    std::vector<std::string> warnings;

    double mean_psnr(const std::string& method, int k, int64_t res) const;
    double mean_ssim(const std::string& method, int k, int64_t res) const;
    double mean_seconds(const std::string& method, int k, int64_t res) const;
    std::string to_csv() const;
    std::string to_text() const;
};

struct BenchmarkConfig {
    std::vector<std::string> methods;  // "fdk", "sart", "dif"
    std::vector<int> view_counts;
    std::vector<int64_t> resolutions;  // cubic output shapes
    std::map<int, std::filesystem::path> dif_models;  // per-K checkpoints
    SartConfig sart;
    FdkConfig fdk;
};

// Projects every ground-truth volume at each requested view count, runs
// each method, and scores PSNR/SSIM against the ground truth resampled to
// the output resolution. Missing DIF checkpoints are skipped with a
// warning. Wall-clock seconds cover reconstruction only.
EvalReport run_benchmark(const BenchmarkConfig& cfg, const std::vector<Volume3D>& ground_truth,
                         const GeometrySpec& spec);

}  // namespace difct
