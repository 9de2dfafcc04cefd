#include "difct/difnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

namespace difct {

FusionMode fusion_from_string(const std::string& s) {
    if (s == "mlp") return FusionMode::mlp;
    if (s == "max" || s == "max_pool") return FusionMode::max_pool;
    if (s == "avg" || s == "avg_pool") return FusionMode::avg_pool;
    throw InvalidArgumentError("unknown fusion mode '" + s + "'");
}

std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::mlp: return "mlp";
        case FusionMode::max_pool: return "max_pool";
        case FusionMode::avg_pool: return "avg_pool";
    }
    return "?";
}

namespace {

template <class T>
Tensor<T> he_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / double(fan_in));
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<T> data(static_cast<size_t>(n));
    for (auto& v : data) v = T(rng.uniform(-limit, limit));
    return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

template <class T>
Conv2dLayer<T> make_conv(int64_t cin, int64_t cout, int k, int pad, Rng& rng) {
    Conv2dLayer<T> l;
    l.w = he_uniform<T>({cout, cin, k, k}, cin * k * k, rng);
    l.b = Tensor<T>::zeros({cout}, true);
    l.pad = pad;
    return l;
}

template <class T>
LinearLayer<T> make_linear(int64_t din, int64_t dout, Rng& rng) {
    LinearLayer<T> l;
    l.w = he_uniform<T>({dout, din}, din, rng);
    l.b = Tensor<T>::zeros({dout}, true);
    return l;
}

template <class T>
void push_layer(std::vector<std::pair<std::string, Tensor<T>>>& dst, const std::string& name,
                const Tensor<T>& w, const Tensor<T>& b) {
    dst.emplace_back(name + ".weight", w);
    dst.emplace_back(name + ".bias", b);
}

}  // namespace

template <class T>
Tensor<T> UNet<T>::forward(const Tensor<T>& x) const {
    if (x.dim() != 4 || x.size(1) != in_channels)
        throw InvalidArgumentError("unet: expected [B," + std::to_string(in_channels) +
                                   ",H,W], got " + shape_str(x.shape()));
    if (x.size(2) % 4 != 0 || x.size(3) % 4 != 0)
        throw InvalidArgumentError("unet: spatial resolution " + std::to_string(x.size(2)) + "x" +
                                   std::to_string(x.size(3)) +
                                   " not divisible by 4 (two pooling levels)");
    auto e0 = relu(enc0b(relu(enc0a(x))));
    auto e1 = relu(enc1b(relu(enc1a(max_pool2d(e0)))));
    auto e2 = relu(enc2b(relu(enc2a(max_pool2d(e1)))));
    auto d1 = relu(dec1b(relu(dec1a(concat_channels(upsample2x_nearest(e2), e1)))));
    auto d0 = relu(dec0b(relu(dec0a(concat_channels(upsample2x_nearest(d1), e0)))));
    return out(d0);
}

template <class T>
void UNet<T>::named_params(std::vector<std::pair<std::string, Tensor<T>>>& dst,
                           const std::string& prefix) const {
    push_layer(dst, prefix + ".enc0a", enc0a.w, enc0a.b);
    push_layer(dst, prefix + ".enc0b", enc0b.w, enc0b.b);
    push_layer(dst, prefix + ".enc1a", enc1a.w, enc1a.b);
    push_layer(dst, prefix + ".enc1b", enc1b.w, enc1b.b);
    push_layer(dst, prefix + ".enc2a", enc2a.w, enc2a.b);
    push_layer(dst, prefix + ".enc2b", enc2b.w, enc2b.b);
    push_layer(dst, prefix + ".dec1a", dec1a.w, dec1a.b);
    push_layer(dst, prefix + ".dec1b", dec1b.w, dec1b.b);
    push_layer(dst, prefix + ".dec0a", dec0a.w, dec0a.b);
    push_layer(dst, prefix + ".dec0b", dec0b.w, dec0b.b);
    push_layer(dst, prefix + ".out", out.w, out.b);
}

template <class T>
DifModelT<T> DifModelT<T>::create(int64_t channels, int64_t base_width, FusionMode fusion,
                                  const ScannerGeometry& geom, uint64_t seed) {
    if (channels < 8)
        throw InvalidArgumentError("dif model: need C >= 8 so the head widths C/2 and C/8 are "
                                   "nonzero, got " + std::to_string(channels));
    geom.validate();
    DifModelT<T> m;
    m.channels = channels;
    m.fusion = fusion;
    m.geometry = geom;
    Rng rng(seed);
    const int64_t w = base_width;
    auto& u = m.encoder;
    u.in_channels = 1;
    u.base_width = w;
    u.out_channels = channels;
    u.enc0a = make_conv<T>(1, w, 3, 1, rng);
    u.enc0b = make_conv<T>(w, w, 3, 1, rng);
    u.enc1a = make_conv<T>(w, 2 * w, 3, 1, rng);
    u.enc1b = make_conv<T>(2 * w, 2 * w, 3, 1, rng);
    u.enc2a = make_conv<T>(2 * w, 4 * w, 3, 1, rng);
    u.enc2b = make_conv<T>(4 * w, 4 * w, 3, 1, rng);
    u.dec1a = make_conv<T>(4 * w + 2 * w, 2 * w, 3, 1, rng);
    u.dec1b = make_conv<T>(2 * w, 2 * w, 3, 1, rng);
    u.dec0a = make_conv<T>(2 * w + w, w, 3, 1, rng);
    u.dec0b = make_conv<T>(w, w, 3, 1, rng);
    u.out = make_conv<T>(w, channels, 1, 0, rng);
    const int64_t k = int64_t(geom.angles.size());
    if (fusion == FusionMode::mlp) {
        const int64_t hidden = std::max<int64_t>(1, k / 2);
        m.fuse1 = make_linear<T>(k, hidden, rng);
        m.fuse2 = make_linear<T>(hidden, 1, rng);
    }
    m.head1 = make_linear<T>(channels, 2 * channels, rng);
    m.head2 = make_linear<T>(2 * channels, channels / 2, rng);
    m.head3 = make_linear<T>(channels / 2, channels / 8, rng);
    m.head4 = make_linear<T>(channels / 8, 1, rng);
    return m;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> DifModelT<T>::named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    encoder.named_params(out, "encoder");
    if (fusion == FusionMode::mlp) {
        push_layer(out, "fuse1", fuse1.w, fuse1.b);
        push_layer(out, "fuse2", fuse2.w, fuse2.b);
    }
    push_layer(out, "head1", head1.w, head1.b);
    push_layer(out, "head2", head2.w, head2.b);
    push_layer(out, "head3", head3.w, head3.b);
    push_layer(out, "head4", head4.w, head4.b);
    return out;
}

template <class T>
std::vector<Tensor<T>> DifModelT<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

template <class T>
Tensor<T> encode(const DifModelT<T>& model, const ProjectionStack& proj) {
    const int K = proj.n_views();
    if (K < 1) throw InvalidArgumentError("encode: empty projection stack");
    const int64_t R = proj.det_rows, C = proj.det_cols;
    std::vector<T> input(size_t(int64_t(K) * R * C));
    const T inv = T(1.0 / model.norm_divisor);
    for (size_t i = 0; i < input.size(); ++i) input[i] = T(proj.data[i]) * inv;
    auto x = Tensor<T>::from_data({K, 1, R, C}, std::move(input));
    return model.encoder.forward(x);
}

template <class T>
Tensor<T> query_features(const DifModelT<T>& model, const Tensor<T>& features,
                         const ScannerGeometry& geom, const PointBatch& points) {
    (void)model;
    if (features.dim() != 4)
        throw InvalidArgumentError("query_features: features must be [K,C,H,W]");
    const int K = int(features.size(0));
    if (K != geom.n_views())
        throw InvalidArgumentError("query_features: feature views " + std::to_string(K) +
                                   " != geometry views " + std::to_string(geom.n_views()));
    const int64_t N = points.size();
    std::vector<T> coords(size_t(int64_t(K) * N * 2));
    for (int k = 0; k < K; ++k) {
        const ViewTransform vt = ViewTransform::make(geom, k);
        for (int64_t n = 0; n < N; ++n) {
            double u, v;
            if (!vt.project(points.coords[size_t(n)], u, v))
                throw DegenerateProjectionError(
                    "query_features: point " + std::to_string(n) +
                        " projects degenerately in view " + std::to_string(k),
                    k);
            coords[size_t((int64_t(k) * N + n) * 2 + 0)] = T(u);
            coords[size_t((int64_t(k) * N + n) * 2 + 1)] = T(v);
        }
    }
    auto ct = Tensor<T>::from_data({K, N, 2}, std::move(coords));
    return grid_sample_bilinear(features, ct);
}

template <class T>
Tensor<T> fuse(const DifModelT<T>& model, const Tensor<T>& feature_set) {
    if (feature_set.dim() != 3)
        throw InvalidArgumentError("fuse: expected [K,N,C], got " + shape_str(feature_set.shape()));
    const int64_t K = feature_set.size(0), N = feature_set.size(1), C = feature_set.size(2);
    if (K < 1) throw InvalidArgumentError("fuse: need K >= 1 views");
    switch (model.fusion) {
        case FusionMode::max_pool:
            return reduce_max(feature_set, 0);
        case FusionMode::avg_pool:
            return reduce_mean(feature_set, 0);
        case FusionMode::mlp: {
            if (K != model.trained_k())
                throw InvalidArgumentError("fuse: mlp fusion was trained for K = " +
                                           std::to_string(model.trained_k()) + ", got K = " +
                                           std::to_string(K));
            // channels act as batch: [K,N,C] -> [N*C, K] -> MLP -> [N,C]
            auto x = reshape(permute(feature_set, {1, 2, 0}), {N * C, K});
            auto h = relu(model.fuse1(x));
            return reshape(model.fuse2(h), {N, C});
        }
    }
    throw InvalidArgumentError("fuse: unknown mode");
}

template <class T>
Tensor<T> regress_intensity(const DifModelT<T>& model, const Tensor<T>& fused) {
    if (fused.dim() != 2 || fused.size(1) != model.channels)
        throw InvalidArgumentError("regress: expected [N," + std::to_string(model.channels) +
                                   "], got " + shape_str(fused.shape()));
    const int64_t N = fused.size(0);
    auto h = relu(model.head1(fused));
    h = relu(model.head2(h));
    h = relu(model.head3(h));
    return reshape(model.head4(h), {N});
}

template <class T>
Tensor<T> predict_points(const DifModelT<T>& model, const ProjectionStack& proj,
                         const ScannerGeometry& geom, const PointBatch& points) {
    auto features = encode(model, proj);
    auto fs = query_features(model, features, geom, points);
    return regress_intensity(model, fuse(model, fs));
}

double default_lr_decay() { return std::pow(0.001, 1.0 / 400.0); }

void TrainConfig::validate() const {
    if (!(lr0 > 0.0)) throw InvalidArgumentError("train: lr0 must be positive");
    if (!(momentum >= 0.0) || !(momentum < 1.0))
        throw InvalidArgumentError("train: momentum must be in [0,1)");
    if (epochs < 1) throw InvalidArgumentError("train: epochs must be >= 1");
    if (batch_volumes < 1) throw InvalidArgumentError("train: batch_volumes must be >= 1");
    if (points_per_volume < 2 || points_per_volume % 2 != 0)
        throw InvalidArgumentError("train: points_per_volume must be even and >= 2");
    if (!(lr_decay_per_epoch > 0.0) || !(lr_decay_per_epoch < 1.0))
        throw InvalidArgumentError("train: lr decay must be in (0,1)");
}

double train_lr_at_epoch(const TrainConfig& cfg, int epoch) {
    return cfg.lr0 * std::pow(cfg.lr_decay_per_epoch, double(epoch));
}

TrainResult train(DifModel& model, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw InvalidArgumentError("train: empty dataset");
    const uint64_t geom_fp = model.geometry.fingerprint();
    for (const auto& s : dataset)
        if (s.proj.geometry_fingerprint != geom_fp)
            throw InvalidArgumentError("train: projection stack not bound to the model geometry");

    auto params = model.parameters();
    SgdMomentum<float> opt(float(cfg.momentum));
    TrainResult result;
    const int64_t n_vol = int64_t(dataset.size());
    // datasets smaller than the batch are cycled so each optimizer step
    // still accumulates batch_volumes independent point draws
    const int64_t epoch_len = std::max<int64_t>(n_vol, cfg.batch_volumes);
    std::vector<int64_t> order(static_cast<size_t>(epoch_len));
    for (int64_t i = 0; i < epoch_len; ++i) order[size_t(i)] = i % n_vol;
    uint64_t draw_counter = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = train_lr_at_epoch(cfg, epoch);
        Rng shuffle_rng(Rng::mix(cfg.seed, uint64_t(epoch) | (1ull << 63)));
        for (int64_t i = epoch_len - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(shuffle_rng.below(uint64_t(i + 1)))]);

        double loss_sum = 0.0;
        int64_t loss_count = 0;
        for (int64_t start = 0; start < epoch_len; start += cfg.batch_volumes) {
            const int64_t bsz = std::min<int64_t>(cfg.batch_volumes, epoch_len - start);
            for (auto& p : params) p.zero_grad();
            for (int64_t b = 0; b < bsz; ++b) {
                const auto& sample = dataset[size_t(order[size_t(start + b)])];
                auto pts = sample_balanced_points(
                    sample.volume, cfg.points_per_volume, cfg.intensity_threshold,
                    Rng::mix(cfg.seed, draw_counter++));
                auto target = Tensor<float>::from_data({pts.size()}, pts.values);
                auto pred = predict_points(model, sample.proj, model.geometry, pts);
                auto loss = mse_loss(pred, target);
                const double lv = double(loss.item());
                if (!std::isfinite(lv))
                    throw NumericalError("train: loss diverged at epoch " + std::to_string(epoch));
                loss_sum += lv;
                loss_count++;
                backward(scale(loss, 1.0f / float(bsz)));
            }
            opt.step(std::span<Tensor<float>>(params), float(lr));
        }
        result.epoch_loss.push_back(loss_sum / double(loss_count));
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d/%d lr %.3e loss %.6e\n", epoch + 1, cfg.epochs, lr,
                         result.epoch_loss.back());
        if (cfg.on_checkpoint) {
            const bool last = epoch + 1 == cfg.epochs;
            if (last || (cfg.save_interval > 0 && (epoch + 1) % cfg.save_interval == 0))
                cfg.on_checkpoint(model, epoch);
        }
    }
    return result;
}

Volume3D dif_reconstruct(const DifModel& model, const ProjectionStack& proj,
                         const ScannerGeometry& geom, Shape3 out_shape, int64_t chunk_size) {
    geom.validate();
    if (chunk_size < 1) throw InvalidArgumentError("reconstruct: chunk_size must be >= 1");
    if (proj.geometry_fingerprint != geom.fingerprint())
        throw InvalidArgumentError("reconstruct: projection stack is not bound to this geometry");
    if (model.fusion == FusionMode::mlp) {
        if (proj.n_views() != int(model.trained_k()))
            throw InvalidArgumentError("reconstruct: mlp fusion requires K = " +
                                       std::to_string(model.trained_k()) + ", stack has " +
                                       std::to_string(proj.n_views()));
        for (size_t i = 0; i < model.geometry.angles.size(); ++i)
            if (std::abs(model.geometry.angles[i] - geom.angles[i]) > 1e-9)
                throw InvalidArgumentError("reconstruct: view angles differ from the trained set");
    }

    NoGradGuard no_grad;
    auto features = encode(model, proj);

    const Vec3 ext = geom.volume_extent_mm;
    Volume3D vol = Volume3D::zeros(out_shape, {ext[0] / double(out_shape[0]),
                                               ext[1] / double(out_shape[1]),
                                               ext[2] / double(out_shape[2])});
    const int64_t total = vol.numel();
    const auto [H, W, D] = out_shape;
    for (int64_t start = 0; start < total; start += chunk_size) {
        const int64_t n = std::min(chunk_size, total - start);
        PointBatch chunk;
        chunk.coords.resize(static_cast<size_t>(n));
        for (int64_t t = 0; t < n; ++t) {
            const int64_t flat = start + t;
            const int64_t k = flat % D;
            const int64_t j = (flat / D) % W;
            const int64_t i = flat / (D * W);
            chunk.coords[size_t(t)] = {(double(i) + 0.5) * vol.spacing[0],
                                       (double(j) + 0.5) * vol.spacing[1],
                                       (double(k) + 0.5) * vol.spacing[2]};
        }
        auto fs = query_features(model, features, geom, chunk);
        auto pred = regress_intensity(model, fuse(model, fs));
        const float* pv = pred.data();
        for (int64_t t = 0; t < n; ++t)
            vol.data[size_t(start + t)] = std::clamp(pv[t], 0.0f, 1.0f);
    }
    return vol;
}

#define DIFCT_INSTANTIATE_MODEL(T)                                                              \
    template struct UNet<T>;                                                                    \
    template struct DifModelT<T>;                                                               \
    template Tensor<T> encode<T>(const DifModelT<T>&, const ProjectionStack&);                  \
    template Tensor<T> query_features<T>(const DifModelT<T>&, const Tensor<T>&,                 \
                                         const ScannerGeometry&, const PointBatch&);            \
    template Tensor<T> fuse<T>(const DifModelT<T>&, const Tensor<T>&);                          \
    template Tensor<T> regress_intensity<T>(const DifModelT<T>&, const Tensor<T>&);             \
    template Tensor<T> predict_points<T>(const DifModelT<T>&, const ProjectionStack&,           \
                                         const ScannerGeometry&, const PointBatch&);

DIFCT_INSTANTIATE_MODEL(float)
DIFCT_INSTANTIATE_MODEL(double)

#undef DIFCT_INSTANTIATE_MODEL

}  // namespace difct
