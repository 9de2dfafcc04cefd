#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "difct/projector.hpp"
#include "difct/tensor.hpp"
#include "difct/volume.hpp"

namespace difct {

enum class FusionMode { mlp, max_pool, avg_pool };

FusionMode fusion_from_string(const std::string& s);
std::string to_string(FusionMode m);

template <class T>
struct Conv2dLayer {
    Tensor<T> w, b;
    int stride = 1, pad = 1;
    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct LinearLayer {
    Tensor<T> w, b;
    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

// Compact U-Net: three resolution levels, two 3x3 conv+ReLU per level, 2x
// max-pool down, nearest-neighbor up with skip concatenation, final 1x1
// conv to out_channels. Spatial size is preserved; inputs must be divisible
// by 4.
template <class T>
struct UNet {
    int64_t in_channels = 1;
    int64_t base_width = 16;
    int64_t out_channels = 32;
    Conv2dLayer<T> enc0a, enc0b, enc1a, enc1b, enc2a, enc2b;
    Conv2dLayer<T> dec1a, dec1b, dec0a, dec0b;
    Conv2dLayer<T> out;  // 1x1

    Tensor<T> forward(const Tensor<T>& x) const;
    void named_params(std::vector<std::pair<std::string, Tensor<T>>>& dst,
                      const std::string& prefix) const;
};

// The intensity-field model: shared 2D encoder over K views, per-point
// feature querying through the projection geometry, cross-view fusion, and
// a 4-layer regression head (C -> 2C -> C/2 -> C/8 -> 1).
template <class T>
struct DifModelT {
    int64_t channels = 32;  // C
    FusionMode fusion = FusionMode::mlp;
    UNet<T> encoder;
    LinearLayer<T> fuse1, fuse2;                  // mlp fusion: K -> max(1,K/2) -> 1
    LinearLayer<T> head1, head2, head3, head4;
    ScannerGeometry geometry;                     // binding: K and the angle list
    double norm_divisor = 1.0;

    int64_t trained_k() const { return int64_t(geometry.angles.size()); }

    static DifModelT create(int64_t channels, int64_t base_width, FusionMode fusion,
                            const ScannerGeometry& geom, uint64_t seed);

    std::vector<Tensor<T>> parameters() const;
    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
};

using DifModel = DifModelT<float>;

// Feature maps [K,C,H,W] for a (raw) projection stack; the stack is divided
// by the model's normalization divisor internally.
template <class T>
Tensor<T> encode(const DifModelT<T>& model, const ProjectionStack& proj);

// Per-point view-specific features [K,N,C]: project each point into every
// view and sample the feature map bilinearly. View order = angle order.
template <class T>
Tensor<T> query_features(const DifModelT<T>& model, const Tensor<T>& features,
                         const ScannerGeometry& geom, const PointBatch& points);

template <class T>
Tensor<T> fuse(const DifModelT<T>& model, const Tensor<T>& feature_set);  // [K,N,C] -> [N,C]

template <class T>
Tensor<T> regress_intensity(const DifModelT<T>& model, const Tensor<T>& fused);  // [N,C] -> [N]

// Full forward pass to per-point intensities.
template <class T>
Tensor<T> predict_points(const DifModelT<T>& model, const ProjectionStack& proj,
                         const ScannerGeometry& geom, const PointBatch& points);

struct TrainSample {
    Volume3D volume;
    ProjectionStack proj;
};

// 0.001^(1/400) ~ 0.9829: the per-epoch factor that decays the rate by
// 1000x over 400 epochs.
double default_lr_decay();

struct TrainConfig {
    double lr0 = 0.01;
    double momentum = 0.98;
    int epochs = 400;
    int batch_volumes = 4;
    int64_t points_per_volume = 10000;
    double lr_decay_per_epoch = default_lr_decay();
    float intensity_threshold = 1e-5f;
    uint64_t seed = 0;
    int save_interval = 0;  // epochs between checkpoints; 0 = final only
    bool verbose = false;
    std::function<void(const DifModel&, int /*epoch*/)> on_checkpoint;

    void validate() const;
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-volume MSE
};

// Momentum-SGD training on balanced point batches (MSE objective). The
// batch is realized as independent per-volume graphs whose gradients
// accumulate before one optimizer step.
TrainResult train(DifModel& model, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg);

// Evaluates the field on a voxel-center lattice, chunk by chunk; output is
// clipped to [0,1]. Results are bit-identical for any chunk_size.
Volume3D dif_reconstruct(const DifModel& model, const ProjectionStack& proj,
                         const ScannerGeometry& geom, Shape3 out_shape,
                         int64_t chunk_size = 65536);

double train_lr_at_epoch(const TrainConfig& cfg, int epoch);

}  // namespace difct
