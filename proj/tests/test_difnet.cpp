#include <doctest.h>

#include <cmath>
#include <cstring>

#include "difct/difnet.hpp"
#include "support.hpp"

using namespace difct;
using difct::testing::make_test_geometry;
using difct::testing::make_toy_model;
using difct::testing::ToySetup;

TEST_CASE("encoder: weight sharing gives identical maps for identical views") {
    auto setup = ToySetup::make();
    auto model = make_toy_model<float>(setup.geom);
    ProjectionStack twin = setup.proj;
    // make view 1 a copy of view 0
    std::copy(twin.view(0), twin.view(0) + twin.view_stride(), twin.view(1));
    auto f = encode(model, twin);
    REQUIRE(f.shape() == std::vector<int64_t>{2, 8, 8, 8});
    CHECK(std::memcmp(f.data(), f.data() + f.numel() / 2,
                      size_t(f.numel() / 2) * sizeof(float)) == 0);
}

TEST_CASE("encoder: output spatial size equals input; C channels") {
    auto geom = make_test_geometry(3, 16, 25.6);
    auto model = DifModel::create(32, 8, FusionMode::max_pool, geom, 4);
    ProjectionStack stack;
    stack.det_rows = 16;
    stack.det_cols = 16;
    stack.angles = geom.angles;
    stack.data.assign(size_t(3) * 16 * 16, 0.25f);
    auto f = encode(model, stack);
    CHECK(f.shape() == std::vector<int64_t>{3, 32, 16, 16});
}

TEST_CASE("encoder rejects resolutions not divisible by the pooling factor") {
    auto geom = make_test_geometry(2, 8, 51.2);
    auto model = make_toy_model<float>(geom);
    ProjectionStack stack;
    stack.det_rows = 10;
    stack.det_cols = 10;
    stack.angles = geom.angles;
    stack.data.assign(size_t(2) * 10 * 10, 0.0f);
    CHECK_THROWS_AS(encode(model, stack), InvalidArgumentError);
}

TEST_CASE("query_features: constant maps give the constant everywhere") {
    auto setup = ToySetup::make();
    auto model = make_toy_model<float>(setup.geom);
    auto f = Tensor<float>::zeros({2, 8, 8, 8});
    for (int64_t c = 0; c < 8; ++c)
        for (int64_t i = 0; i < 64; ++i) {
            f.values()[size_t(c * 64 + i)] = float(c) * 0.1f;            // view 0
            f.values()[size_t(512 + c * 64 + i)] = float(c) * 0.1f;      // view 1
        }
    auto q = query_features(model, f, setup.geom, setup.points);
    REQUIRE(q.shape() == std::vector<int64_t>{2, setup.points.size(), 8});
    for (int64_t k = 0; k < 2; ++k)
        for (int64_t n = 0; n < setup.points.size(); ++n)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(q.values()[size_t((k * setup.points.size() + n) * 8 + c)] ==
                      doctest::Approx(float(c) * 0.1f));
}

TEST_CASE("query_features: points outside the panel give zero features") {
    // shrink the detector so corner points fall off it
    auto geom = make_test_geometry(1, 4, 12.8);  // 4x4 panel, 51.2mm wide
    auto model = make_toy_model<float>(geom);
    auto f = Tensor<float>::full({1, 8, 4, 4}, 1.0f);
    PointBatch corner;
    corner.coords.push_back({2.0, 2.0, 2.0});  // far corner of the volume
    auto q = query_features(model, f, geom, corner);
    for (int64_t c = 0; c < 8; ++c) CHECK(q.values()[size_t(c)] == 0.0f);
}

TEST_CASE("fuse: pooling modes are permutation invariant; K=1 is identity") {
    auto geom = make_test_geometry(3, 8, 51.2);
    auto model = DifModel::create(8, 4, FusionMode::max_pool, geom, 2);
    auto fs = difct::testing::random_tensor<float>({3, 5, 8}, 31);
    auto shuffled_data = fs.values();
    // swap views 0 and 2
    for (int64_t n = 0; n < 5; ++n)
        for (int64_t c = 0; c < 8; ++c)
            std::swap(shuffled_data[size_t((0 * 5 + n) * 8 + c)],
                      shuffled_data[size_t((2 * 5 + n) * 8 + c)]);
    auto shuffled = Tensor<float>::from_data({3, 5, 8}, shuffled_data);

    auto mx = fuse(model, fs);
    auto mx2 = fuse(model, shuffled);
    CHECK(std::memcmp(mx.data(), mx2.data(), size_t(mx.numel()) * sizeof(float)) == 0);

    model.fusion = FusionMode::avg_pool;
    auto av = fuse(model, fs);
    auto av2 = fuse(model, shuffled);
    for (int64_t i = 0; i < av.numel(); ++i)
        CHECK(av.values()[size_t(i)] == doctest::Approx(av2.values()[size_t(i)]));

    // K=1: max and avg return the single feature exactly
    auto geom1 = make_test_geometry(1, 8, 51.2);
    auto m1 = DifModel::create(8, 4, FusionMode::max_pool, geom1, 2);
    auto single = difct::testing::random_tensor<float>({1, 5, 8}, 32);
    auto got = fuse(m1, single);
    CHECK(std::memcmp(got.data(), single.data(), size_t(got.numel()) * sizeof(float)) == 0);
}

TEST_CASE("fuse: mlp widths follow K -> floor(K/2) -> 1") {
    auto geom = make_test_geometry(10, 8, 51.2);
    auto model = DifModel::create(8, 4, FusionMode::mlp, geom, 3);
    CHECK(model.fuse1.w.shape() == std::vector<int64_t>{5, 10});
    CHECK(model.fuse2.w.shape() == std::vector<int64_t>{1, 5});

    // trained-K binding: a 4-view feature set must be rejected
    auto fs = Tensor<float>::zeros({4, 3, 8});
    CHECK_THROWS_AS(fuse(model, fs), InvalidArgumentError);
}

TEST_CASE("regress head widths are C -> 2C -> C/2 -> C/8 -> 1") {
    auto geom = make_test_geometry(2, 8, 51.2);
    auto model = DifModel::create(128, 4, FusionMode::max_pool, geom, 1);
    CHECK(model.head1.w.shape() == std::vector<int64_t>{256, 128});
    CHECK(model.head2.w.shape() == std::vector<int64_t>{64, 256});
    CHECK(model.head3.w.shape() == std::vector<int64_t>{16, 64});
    CHECK(model.head4.w.shape() == std::vector<int64_t>{1, 16});
    CHECK_THROWS_AS(DifModel::create(4, 4, FusionMode::mlp, geom, 1), InvalidArgumentError);

    // zero weights with bias b in the last layer regress to b
    auto m8 = make_toy_model<float>(geom, FusionMode::max_pool);
    std::fill(m8.head4.w.values().begin(), m8.head4.w.values().end(), 0.0f);
    m8.head4.b.values()[0] = 0.625f;
    auto fused = difct::testing::random_tensor<float>({6, 8}, 9);
    auto out = regress_intensity(m8, fused);
    REQUIRE(out.shape() == std::vector<int64_t>{6});
    for (float v : out.values()) CHECK(v == doctest::Approx(0.625f));

    auto wrong = difct::testing::random_tensor<float>({6, 16}, 9);
    CHECK_THROWS_AS(regress_intensity(m8, wrong), InvalidArgumentError);
}


namespace {
// move parameters off symmetric init points (zero biases + zero background
// rays put ReLU inputs exactly at the kink, where finite differences and
// subgradients disagree)
template <class T>
void jitter_params(difct::DifModelT<T>& model, uint64_t seed) {
    difct::Rng rng(seed);
    for (auto& [name, t] : model.named_parameters())
        for (auto& v : t.values()) v += T(rng.uniform(-0.05, 0.05));
}
}  // namespace

TEST_CASE("end-to-end toy gradient check (64-bit)") {
    auto setup = ToySetup::make(7, 16);
    auto model = make_toy_model<double>(setup.geom, FusionMode::mlp);
    model.norm_divisor = 100.0;
    jitter_params(model, 1001);
    auto target_vals = std::vector<double>(setup.points.values.begin(), setup.points.values.end());
    auto target = Tensor<double>::from_data({setup.points.size()}, target_vals);

    auto named = model.named_parameters();
    std::vector<Tensor<double>> params;
    std::vector<std::string> names;
    for (auto& [n, t] : named) {
        params.push_back(t);
        names.push_back(n);
    }
    testing::GradCheck gc;
    gc.rtol = 1e-3;
    gc.samples_per_tensor = 6;
    const double v = gc.run(
        [&] {
            return mse_loss(predict_points(model, setup.proj, setup.geom, setup.points), target);
        },
        params, names);
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("toy gradient check with pooling fusion") {
    auto setup = ToySetup::make(9, 8);
    auto model = make_toy_model<double>(setup.geom, FusionMode::max_pool);
    model.norm_divisor = 100.0;
    jitter_params(model, 1002);
    auto target = Tensor<double>::from_data(
        {setup.points.size()},
        std::vector<double>(setup.points.values.begin(), setup.points.values.end()));
    auto named = model.named_parameters();
    std::vector<Tensor<double>> params;
    for (auto& [n, t] : named) params.push_back(t);
    testing::GradCheck gc;
    gc.rtol = 1e-3;
    gc.samples_per_tensor = 4;
    const double v = gc.run(
        [&] {
            return mse_loss(predict_points(model, setup.proj, setup.geom, setup.points), target);
        },
        params);
    INFO(gc.worst);
    CHECK(v < 1.0);
}

TEST_CASE("training: lr schedule hits 1e-5 at epoch 400; loss decreases on a toy") {
    TrainConfig cfg;
    CHECK(train_lr_at_epoch(cfg, 0) == doctest::Approx(0.01));
    CHECK(train_lr_at_epoch(cfg, 400) == doctest::Approx(1e-5).epsilon(1e-9));

    auto setup = ToySetup::make(3);
    DifModel model = make_toy_model<float>(setup.geom, FusionMode::mlp);
    model.norm_divisor = 100.0;
    std::vector<TrainSample> data;
    data.push_back({setup.volume, setup.proj});

    cfg.epochs = 12;
    cfg.batch_volumes = 1;
    cfg.points_per_volume = 128;
    cfg.lr0 = 0.005;
    cfg.momentum = 0.9;
    cfg.seed = 5;
    int checkpoints = 0;
    cfg.save_interval = 5;
    cfg.on_checkpoint = [&](const DifModel&, int) { checkpoints++; };
    const auto result = train(model, data, cfg);
    REQUIRE(result.epoch_loss.size() == 12);
    // first epochs start near the random-init loss; the tail should improve
    CHECK(result.epoch_loss.back() < result.epoch_loss.front());
    CHECK(checkpoints == 3);  // epochs 5, 10, and final
}

TEST_CASE("training: perfect predictor has zero loss") {
    auto setup = ToySetup::make(4);
    auto gt = Tensor<float>::from_data({setup.points.size()}, setup.points.values);
    CHECK(mse_loss(gt, gt).item() == 0.0f);
}

TEST_CASE("training rejects unbound stacks and bad configs") {
    auto setup = ToySetup::make(5);
    DifModel model = make_toy_model<float>(setup.geom);
    std::vector<TrainSample> data;
    auto other_geom = make_test_geometry(2, 8, 50.0);
    TrainSample s{setup.volume, forward_project(setup.volume, other_geom)};
    data.push_back(s);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.points_per_volume = 16;
    CHECK_THROWS_AS(train(model, data, cfg), InvalidArgumentError);

    TrainConfig bad;
    bad.points_per_volume = 15;  // odd
    CHECK_THROWS_AS(bad.validate(), InvalidArgumentError);
}

TEST_CASE("reconstruct: chunking is bit-identical and encode reuse deterministic") {
    auto setup = ToySetup::make(6);
    DifModel model = make_toy_model<float>(setup.geom, FusionMode::mlp);
    model.norm_divisor = 100.0;

    const auto a = dif_reconstruct(model, setup.proj, setup.geom, {16, 16, 16}, 1000);
    const auto b = dif_reconstruct(model, setup.proj, setup.geom, {16, 16, 16}, 65536);
    const auto c = dif_reconstruct(model, setup.proj, setup.geom, {16, 16, 16}, 17);
    CHECK(a.data == b.data);
    CHECK(a.data == c.data);

    const auto again = dif_reconstruct(model, setup.proj, setup.geom, {16, 16, 16}, 1000);
    CHECK(a.data == again.data);

    // scalable resolution from one model
    const auto lo = dif_reconstruct(model, setup.proj, setup.geom, {8, 8, 8});
    const auto hi = dif_reconstruct(model, setup.proj, setup.geom, {24, 24, 24});
    CHECK(lo.numel() == 512);
    CHECK(hi.numel() == 24 * 24 * 24);
    for (float v : hi.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("reconstruct: mlp fusion rejects mismatched view counts") {
    auto setup = ToySetup::make(8);
    DifModel model = make_toy_model<float>(setup.geom, FusionMode::mlp);
    auto geom3 = make_test_geometry(3, 8, 51.2);
    auto vol = setup.volume;
    auto proj3 = forward_project(vol, geom3);
    CHECK_THROWS_AS(dif_reconstruct(model, proj3, geom3, {8, 8, 8}), InvalidArgumentError);

    // pooling fusion accepts any K
    DifModel pool_model = make_toy_model<float>(setup.geom, FusionMode::max_pool);
    pool_model.norm_divisor = 100.0;
    CHECK_NOTHROW(dif_reconstruct(pool_model, proj3, geom3, {8, 8, 8}));
}
