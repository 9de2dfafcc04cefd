#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "difct/difnet.hpp"
#include "difct/geometry.hpp"
#include "difct/projector.hpp"
#include "difct/volume.hpp"

namespace difct {

// ---- .difvol: "DIFVOL v1 H W D s_h s_w s_d dtype=f32\n" + raw f32 LE,
// z-fastest ----
void write_difvol(const std::filesystem::path& path, const Volume3D& vol);
Volume3D read_difvol(const std::filesystem::path& path);

// ---- .difproj: "DIFPROJ v1 K R C\n" + K angle lines + raw f32 images ----
void write_difproj(const std::filesystem::path& path, const ProjectionStack& stack);
// Loaded stacks carry no geometry fingerprint; bind_geometry() before
// reconstruction.
ProjectionStack read_difproj(const std::filesystem::path& path);

// ---- .difw: "DIFW" magic, u32 version, u32 tensor count, per tensor:
// u32 name length + name, u32 rank, u64 extents, raw f32 LE ----
using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;
void write_difw(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_difw(const std::filesystem::path& path);

// ---- geometry config (key-value text) ----
struct GeometrySpec {
    ScannerGeometry geom;
    Shape3 volume_shape{64, 64, 64};
    Vec3 voxel_spacing{3.2, 3.2, 3.2};
    int n_views = 10;
    double angle_range_deg = 180.0;

    // Geometry with k views spanning angle_range_deg (endpoint-exclusive).
    ScannerGeometry with_views(int k) const;
};

GeometrySpec parse_geometry(const std::filesystem::path& path);
void write_geometry(const std::filesystem::path& path, const GeometrySpec& spec);

// ---- dataset manifest ----
struct ManifestEntry {
    std::string split;  // train / val / test
    std::filesystem::path volume;
    std::filesystem::path projections;
};

struct DatasetManifest {
    std::filesystem::path geometry_path;
    double normalization_divisor = 1.0;
    float intensity_threshold = 1e-5f;
    uint64_t seed = 0;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(const std::string& tag) const;
};

DatasetManifest parse_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// Generates phantoms, projects them, writes volumes/stacks/manifest under
// out_dir. The normalization divisor is the 99.9th percentile of the train
// split's projection values.
DatasetManifest build_dataset(int n_train, int n_val, int n_test, PhantomKind kind,
                              const GeometrySpec& spec, int views, uint64_t seed,
                              const std::filesystem::path& out_dir);

// ---- model checkpoint: .difw weights + sidecar text manifest ----
void save_model(const std::filesystem::path& path, const DifModel& model);
DifModel load_model(const std::filesystem::path& path);

}  // namespace difct
