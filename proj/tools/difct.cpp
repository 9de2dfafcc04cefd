// difct: batch CLI for the CBCT reconstruction toolkit.
//
// Subcommands: phantom, project, recon-fdk, recon-sart, train, recon-dif,
// eval, bench, slice, dataset. Exit codes: 0 success, 2 usage error,
// 3 data/format error, 4 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "difct/classical.hpp"
#include "difct/difnet.hpp"
#include "difct/io.hpp"
#include "difct/metrics.hpp"

namespace fs = std::filesystem;
using namespace difct;

namespace {

Shape3 parse_shape3(const std::vector<int64_t>& v, const char* flag) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw InvalidArgumentError(std::string(flag) + " takes 1 or 3 values");
}

Vec3 parse_vec3(const std::vector<double>& v, const char* flag) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw InvalidArgumentError(std::string(flag) + " takes 1 or 3 values");
}

// The stack file carries K and angles; rebuild the matching geometry from
// the config and bind.
ScannerGeometry bind_from_spec(ProjectionStack& stack, const GeometrySpec& spec) {
    ScannerGeometry geom = spec.with_views(stack.n_views());
    stack.bind_geometry(geom);
    return geom;
}

fs::path manifest_path(const fs::path& data) {
    if (fs::is_directory(data)) return data / "manifest.txt";
    return data;
}

std::vector<TrainSample> load_split(const DatasetManifest& m, const std::string& tag,
                                    const ScannerGeometry& geom) {
    std::vector<TrainSample> out;
    for (const auto& e : m.split(tag)) {
        TrainSample s;
        s.volume = read_difvol(e.volume);
        s.proj = read_difproj(e.projections);
        s.proj.bind_geometry(geom);
        out.push_back(std::move(s));
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"difct - continuous intensity field CBCT reconstruction toolkit"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    int threads = 0;
    bool verbose = false;
    app.add_option("--seed", seed, "global RNG seed");
    app.add_option("--threads", threads,
                   "worker cap (default: DIFCT_THREADS env or hardware)");
    app.add_flag("--verbose", verbose, "chatty progress output");

    // ---- phantom ----
    auto* cmd_phantom = app.add_subcommand("phantom", "generate a synthetic volume");
    std::string ph_kind = "random_ellipsoids";
    std::vector<int64_t> ph_shape{64};
    std::vector<double> ph_spacing{3.2};
    std::string ph_out;
    cmd_phantom->add_option("--kind", ph_kind, "shepp_logan_3d | random_ellipsoids");
    cmd_phantom->add_option("--shape", ph_shape, "voxels per axis (1 or 3 values)");
    cmd_phantom->add_option("--spacing", ph_spacing, "mm per voxel (1 or 3 values)");
    cmd_phantom->add_option("-o,--out", ph_out, "output .difvol")->required();

    // ---- project ----
    auto* cmd_project = app.add_subcommand("project", "forward-project a volume (DRR)");
    std::string pj_vol, pj_geom, pj_out;
    int pj_views = 0;
    cmd_project->add_option("--vol", pj_vol, "input .difvol")->required();
    cmd_project->add_option("--geom", pj_geom, "geometry config")->required();
    cmd_project->add_option("--views", pj_views, "view count (default: geometry n_views)");
    cmd_project->add_option("-o,--out", pj_out, "output .difproj")->required();

    // ---- recon-fdk ----
    auto* cmd_fdk = app.add_subcommand("recon-fdk", "filtered backprojection");
    std::string fk_proj, fk_geom, fk_out, fk_filter = "shepp_logan";
    std::vector<int64_t> fk_shape{64};
    cmd_fdk->add_option("--proj", fk_proj)->required();
    cmd_fdk->add_option("--geom", fk_geom)->required();
    cmd_fdk->add_option("--out-shape", fk_shape, "output voxels per axis");
    cmd_fdk->add_option("--filter", fk_filter, "ram_lak | shepp_logan");
    cmd_fdk->add_option("-o,--out", fk_out)->required();

    // ---- recon-sart ----
    auto* cmd_sart = app.add_subcommand("recon-sart", "iterative SART reconstruction");
    std::string sa_proj, sa_geom, sa_out;
    std::vector<int64_t> sa_shape{64};
    int sa_iters = 30;
    double sa_lambda = 0.5;
    cmd_sart->add_option("--proj", sa_proj)->required();
    cmd_sart->add_option("--geom", sa_geom)->required();
    cmd_sart->add_option("--out-shape", sa_shape);
    cmd_sart->add_option("--iters", sa_iters, "full sweeps");
    cmd_sart->add_option("--lambda", sa_lambda, "relaxation in (0,2)");
    cmd_sart->add_option("-o,--out", sa_out)->required();

    // ---- train ----
    auto* cmd_train = app.add_subcommand("train", "train the intensity-field model");
    std::string tr_data, tr_geom, tr_fusion = "mlp", tr_out;
    int tr_views = 10, tr_epochs = 150, tr_batch = 4, tr_save = 0;
    int64_t tr_points = 4096, tr_channels = 32, tr_width = 16;
    double tr_lr = 0.01, tr_momentum = 0.98;
    cmd_train->add_option("--data", tr_data, "dataset manifest (or its directory)")->required();
    cmd_train->add_option("--geom", tr_geom, "geometry config")->required();
    cmd_train->add_option("--views", tr_views, "projection views per stack");
    cmd_train->add_option("--fusion", tr_fusion, "mlp | max | avg");
    cmd_train->add_option("--epochs", tr_epochs);
    cmd_train->add_option("--batch", tr_batch, "volumes per optimizer step");
    cmd_train->add_option("--points", tr_points, "sampled points per volume");
    cmd_train->add_option("--channels", tr_channels, "feature channels C");
    cmd_train->add_option("--base-width", tr_width, "encoder base width");
    cmd_train->add_option("--lr", tr_lr, "initial learning rate");
    cmd_train->add_option("--momentum", tr_momentum);
    cmd_train->add_option("--save-interval", tr_save, "checkpoint every N epochs");
    cmd_train->add_option("-o,--out", tr_out, "output .difw")->required();

    // ---- recon-dif ----
    auto* cmd_dif = app.add_subcommand("recon-dif", "reconstruct with a trained model");
    std::string df_model, df_proj, df_out;
    std::vector<int64_t> df_shape{64};
    int64_t df_chunk = 65536;
    cmd_dif->add_option("--model", df_model)->required();
    cmd_dif->add_option("--proj", df_proj)->required();
    cmd_dif->add_option("--out-shape", df_shape);
    cmd_dif->add_option("--chunk", df_chunk, "points per inference chunk");
    cmd_dif->add_option("-o,--out", df_out)->required();

    // ---- eval ----
    auto* cmd_eval = app.add_subcommand("eval", "PSNR/SSIM between two volumes");
    std::string ev_pred, ev_gt;
    double ev_range = 1.0;
    cmd_eval->add_option("--pred", ev_pred)->required();
    cmd_eval->add_option("--gt", ev_gt)->required();
    cmd_eval->add_option("--data-range", ev_range);

    // ---- bench ----
    auto* cmd_bench = app.add_subcommand("bench", "method comparison table");
    std::string bn_config, bn_out;
    cmd_bench->add_option("--config", bn_config, "benchmark config file")->required();
    cmd_bench->add_option("-o,--out", bn_out, "output CSV (summary prints to stdout)");

    // ---- slice ----
    auto* cmd_slice = app.add_subcommand("slice", "export a volume slice as PGM");
    std::string sl_vol, sl_axis = "z", sl_out;
    int64_t sl_index = -1;
    cmd_slice->add_option("--vol", sl_vol)->required();
    cmd_slice->add_option("--axis", sl_axis, "x | y | z");
    cmd_slice->add_option("--index", sl_index, "slice index (default: middle)");
    cmd_slice->add_option("-o,--out", sl_out)->required();

    // ---- dataset ----
    auto* cmd_dataset = app.add_subcommand("dataset", "generate a phantom dataset");
    int ds_train = 4, ds_val = 1, ds_test = 2, ds_views = 10;
    std::string ds_kind = "random_ellipsoids", ds_geom, ds_out, ds_preset;
    cmd_dataset->add_option("--train", ds_train);
    cmd_dataset->add_option("--val", ds_val);
    cmd_dataset->add_option("--test", ds_test);
    cmd_dataset->add_option("--preset", ds_preset, "'paper' = 464/50/100 split");
    cmd_dataset->add_option("--kind", ds_kind);
    cmd_dataset->add_option("--geom", ds_geom, "geometry config")->required();
    cmd_dataset->add_option("--views", ds_views);
    cmd_dataset->add_option("-o,--out", ds_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (threads > 0) set_max_threads(threads);

    if (cmd_phantom->parsed()) {
        const auto vol = make_phantom(phantom_kind_from_string(ph_kind),
                                      parse_shape3(ph_shape, "--shape"),
                                      parse_vec3(ph_spacing, "--spacing"), seed);
        write_difvol(ph_out, vol);
        if (verbose) std::fprintf(stderr, "wrote %s\n", ph_out.c_str());
    } else if (cmd_project->parsed()) {
        const auto vol = read_difvol(pj_vol);
        auto spec = parse_geometry(pj_geom);
        const int k = pj_views > 0 ? pj_views : spec.n_views;
        const ScannerGeometry geom = spec.with_views(k);
        const Vec3 ext = vol.extent_mm();
        for (int a = 0; a < 3; ++a)
            if (std::abs(ext[size_t(a)] - geom.volume_extent_mm[size_t(a)]) > 1e-6)
                throw DataError("project: volume extent does not match the geometry config");
        write_difproj(pj_out, forward_project(vol, geom));
    } else if (cmd_fdk->parsed()) {
        auto stack = read_difproj(fk_proj);
        const auto spec = parse_geometry(fk_geom);
        const ScannerGeometry geom = bind_from_spec(stack, spec);
        FdkConfig cfg;
        if (fk_filter == "ram_lak") cfg.filter = FdkConfig::Filter::ram_lak;
        else if (fk_filter == "shepp_logan") cfg.filter = FdkConfig::Filter::shepp_logan_window;
        else throw InvalidArgumentError("unknown filter '" + fk_filter + "'");
        write_difvol(fk_out, fdk_reconstruct(stack, geom, parse_shape3(fk_shape, "--out-shape"),
                                             cfg));
    } else if (cmd_sart->parsed()) {
        auto stack = read_difproj(sa_proj);
        const auto spec = parse_geometry(sa_geom);
        const ScannerGeometry geom = bind_from_spec(stack, spec);
        SartConfig cfg;
        cfg.n_iterations = sa_iters;
        cfg.relaxation = sa_lambda;
        write_difvol(sa_out, sart_reconstruct(stack, geom, parse_shape3(sa_shape, "--out-shape"),
                                              cfg));
    } else if (cmd_train->parsed()) {
        const auto manifest = parse_manifest(manifest_path(tr_data));
        const auto spec = parse_geometry(tr_geom);
        const ScannerGeometry geom = spec.with_views(tr_views);
        auto samples = load_split(manifest, "train", geom);
        if (samples.empty()) throw DataError("train: manifest has no train entries");

        DifModel model = DifModel::create(tr_channels, tr_width,
                                          fusion_from_string(tr_fusion), geom, seed);
        model.norm_divisor = manifest.normalization_divisor;

        TrainConfig cfg;
        cfg.lr0 = tr_lr;
        cfg.momentum = tr_momentum;
        cfg.epochs = tr_epochs;
        cfg.batch_volumes = tr_batch;
        cfg.points_per_volume = tr_points;
        cfg.intensity_threshold = manifest.intensity_threshold;
        cfg.seed = seed;
        cfg.save_interval = tr_save;
        cfg.verbose = verbose;
        cfg.on_checkpoint = [&](const DifModel& m, int epoch) {
            save_model(tr_out, m);
            if (verbose) std::fprintf(stderr, "checkpoint at epoch %d -> %s\n", epoch + 1,
                                      tr_out.c_str());
        };
        const auto result = train(model, samples, cfg);
        std::printf("final epoch loss %.6e\n", result.epoch_loss.back());
    } else if (cmd_dif->parsed()) {
        const DifModel model = load_model(df_model);
        auto stack = read_difproj(df_proj);
        // pooling fusion accepts any K: rebuild the angle set from the stack
        ScannerGeometry geom = model.geometry;
        geom.angles = stack.angles;
        geom.validate();
        stack.bind_geometry(geom);
        write_difvol(df_out, dif_reconstruct(model, stack, geom,
                                             parse_shape3(df_shape, "--out-shape"), df_chunk));
    } else if (cmd_eval->parsed()) {
        const auto pred = read_difvol(ev_pred);
        const auto gt = read_difvol(ev_gt);
        const auto p = psnr(pred, gt, ev_range);
        const double s = ssim(pred, gt, 7, 0.01, 0.03, ev_range);
        if (p.identical)
            std::printf("PSNR: identical (capped at %.1f dB)\nSSIM: %.4f\n", p.db, s);
        else
            std::printf("PSNR: %.4f dB\nSSIM: %.4f\n", p.db, s);
    } else if (cmd_bench->parsed()) {
        // config: key-value lines (manifest, methods, views, resolutions,
        // model_k<K>, sart_iters, sart_lambda)
        std::ifstream f(bn_config);
        if (!f) throw DataError("cannot open " + bn_config);
        BenchmarkConfig cfg;
        fs::path manifest_file;
        const fs::path base = fs::path(bn_config).parent_path();
        std::string line;
        while (std::getline(f, line)) {
            if (auto pos = line.find('#'); pos != std::string::npos) line.resize(pos);
            std::istringstream ls(line);
            std::string key;
            if (!(ls >> key)) continue;
            if (key == "manifest") {
                std::string v;
                ls >> v;
                manifest_file = base / v;
            } else if (key == "methods") {
                std::string v;
                while (ls >> v) cfg.methods.push_back(v);
            } else if (key == "views") {
                int v;
                while (ls >> v) cfg.view_counts.push_back(v);
            } else if (key == "resolutions") {
                int64_t v;
                while (ls >> v) cfg.resolutions.push_back(v);
            } else if (key.rfind("model_k", 0) == 0) {
                std::string v;
                ls >> v;
                cfg.dif_models[std::stoi(key.substr(7))] = base / v;
            } else if (key == "sart_iters") {
                ls >> cfg.sart.n_iterations;
            } else if (key == "sart_lambda") {
                ls >> cfg.sart.relaxation;
            } else {
                throw FormatError(bn_config + ": unknown benchmark key '" + key + "'");
            }
        }
        if (manifest_file.empty()) throw FormatError(bn_config + ": missing 'manifest'");
        const auto manifest = parse_manifest(manifest_file);
        const auto spec = parse_geometry(manifest.geometry_path);
        std::vector<Volume3D> gt;
        for (const auto& e : manifest.split("test")) gt.push_back(read_difvol(e.volume));
        const auto report = run_benchmark(cfg, gt, spec);
        std::printf("%s", report.to_text().c_str());
        if (!bn_out.empty()) {
            std::ofstream out(bn_out, std::ios::trunc);
            out << report.to_csv();
        }
    } else if (cmd_slice->parsed()) {
        const auto vol = read_difvol(sl_vol);
        int axis;
        if (sl_axis == "x") axis = 0;
        else if (sl_axis == "y") axis = 1;
        else if (sl_axis == "z") axis = 2;
        else throw InvalidArgumentError("slice: axis must be x, y, or z");
        const int64_t n = vol.shape[size_t(axis)];
        const int64_t idx = sl_index < 0 ? n / 2 : sl_index;
        if (idx < 0 || idx >= n)
            throw InvalidArgumentError("slice: index " + std::to_string(idx) +
                                       " out of range [0," + std::to_string(n) + ")");
        int64_t rows, cols;
        auto get = [&](int64_t r, int64_t c) {
            switch (axis) {
                case 0: return vol.at(idx, r, c);
                case 1: return vol.at(r, idx, c);
                default: return vol.at(r, c, idx);
            }
        };
        if (axis == 0) {
            rows = vol.shape[1];
            cols = vol.shape[2];
        } else if (axis == 1) {
            rows = vol.shape[0];
            cols = vol.shape[2];
        } else {
            rows = vol.shape[0];
            cols = vol.shape[1];
        }
        std::ofstream out(sl_out, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + sl_out);
        out << "P5\n" << cols << " " << rows << "\n255\n";
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) {
                const float v = std::clamp(get(r, c), 0.0f, 1.0f);
                out.put(char(int(v * 255.0f + 0.5f)));
            }
    } else if (cmd_dataset->parsed()) {
        auto spec = parse_geometry(ds_geom);
        if (ds_preset == "paper") {
            ds_train = 464;
            ds_val = 50;
            ds_test = 100;
        } else if (!ds_preset.empty()) {
            throw InvalidArgumentError("unknown preset '" + ds_preset + "'");
        }
        build_dataset(ds_train, ds_val, ds_test, phantom_kind_from_string(ds_kind), spec,
                      ds_views, seed, ds_out);
        if (verbose) std::fprintf(stderr, "dataset written to %s\n", ds_out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const InvalidArgumentError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
