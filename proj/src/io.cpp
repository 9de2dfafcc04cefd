#include "difct/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace difct {

namespace fs = std::filesystem;

namespace {

// shortest round-trip decimal form
std::string fmt(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

[[noreturn]] void fail(const fs::path& path, const std::string& msg) {
    throw FormatError(path.string() + ": " + msg);
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    return f;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    return f;
}

void read_exact(std::ifstream& f, void* dst, size_t n, const fs::path& path) {
    f.read(static_cast<char*>(dst), std::streamsize(n));
    if (size_t(f.gcount()) != n) fail(path, "truncated file");
}

template <class T>
T parse_num(const std::string& tok, const fs::path& path) {
    T v{};
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
        fail(path, "bad numeric field '" + tok + "'");
    return v;
}

}  // namespace

// ---- difvol -----------------------------------------------------------------

void write_difvol(const fs::path& path, const Volume3D& vol) {
    if (int64_t(vol.data.size()) != vol.numel())
        throw InvalidArgumentError("difvol: buffer does not match shape");
    auto f = open_out(path);
    f << "DIFVOL v1 " << vol.shape[0] << " " << vol.shape[1] << " " << vol.shape[2] << " "
      << fmt(vol.spacing[0]) << " " << fmt(vol.spacing[1]) << " " << fmt(vol.spacing[2])
      << " dtype=f32\n";
    f.write(reinterpret_cast<const char*>(vol.data.data()),
            std::streamsize(vol.data.size() * sizeof(float)));
    if (!f) throw DataError("short write to " + path.string());
}

Volume3D read_difvol(const fs::path& path) {
    auto f = open_in(path);
    std::string header;
    if (!std::getline(f, header)) fail(path, "missing header line");
    std::istringstream hs(header);
    std::string magic, version, dtype;
    Volume3D vol;
    hs >> magic >> version >> vol.shape[0] >> vol.shape[1] >> vol.shape[2] >> vol.spacing[0] >>
        vol.spacing[1] >> vol.spacing[2] >> dtype;
    if (magic != "DIFVOL") fail(path, "expected magic DIFVOL, found '" + magic + "'");
    if (version != "v1") fail(path, "unsupported version '" + version + "', reader supports v1");
    if (!hs || dtype != "dtype=f32") fail(path, "malformed DIFVOL header");
    if (vol.shape[0] <= 0 || vol.shape[1] <= 0 || vol.shape[2] <= 0)
        fail(path, "non-positive volume shape");
    vol.data.resize(size_t(vol.numel()));
    read_exact(f, vol.data.data(), vol.data.size() * sizeof(float), path);
    return vol;
}

// ---- difproj ----------------------------------------------------------------

void write_difproj(const fs::path& path, const ProjectionStack& stack) {
    auto f = open_out(path);
    f << "DIFPROJ v1 " << stack.n_views() << " " << stack.det_rows << " " << stack.det_cols
      << "\n";
    for (double a : stack.angles) f << fmt(a) << "\n";
    f.write(reinterpret_cast<const char*>(stack.data.data()),
            std::streamsize(stack.data.size() * sizeof(float)));
    if (!f) throw DataError("short write to " + path.string());
}

ProjectionStack read_difproj(const fs::path& path) {
    auto f = open_in(path);
    std::string header;
    if (!std::getline(f, header)) fail(path, "missing header line");
    std::istringstream hs(header);
    std::string magic, version;
    int k = 0;
    ProjectionStack stack;
    hs >> magic >> version >> k >> stack.det_rows >> stack.det_cols;
    if (magic != "DIFPROJ") fail(path, "expected magic DIFPROJ, found '" + magic + "'");
    if (version != "v1") fail(path, "unsupported version '" + version + "', reader supports v1");
    if (!hs || k <= 0 || stack.det_rows <= 0 || stack.det_cols <= 0)
        fail(path, "malformed DIFPROJ header");
    stack.angles.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        std::string line;
        if (!std::getline(f, line)) fail(path, "missing angle line " + std::to_string(i));
        stack.angles[size_t(i)] = parse_num<double>(line, path);
    }
    stack.data.resize(size_t(int64_t(k) * stack.det_rows * stack.det_cols));
    read_exact(f, stack.data.data(), stack.data.size() * sizeof(float), path);
    return stack;
}

// ---- difw -------------------------------------------------------------------

namespace {
constexpr uint32_t kDifwVersion = 1;

template <class T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& f, const fs::path& path) {
    T v{};
    read_exact(f, &v, sizeof v, path);
    return v;
}
}  // namespace

void write_difw(const fs::path& path, const NamedTensors& tensors) {
    auto f = open_out(path);
    f.write("DIFW", 4);
    put<uint32_t>(f, kDifwVersion);
    put<uint32_t>(f, uint32_t(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put<uint32_t>(f, uint32_t(name.size()));
        f.write(name.data(), std::streamsize(name.size()));
        put<uint32_t>(f, uint32_t(t.dim()));
        for (int64_t d : t.shape()) put<uint64_t>(f, uint64_t(d));
        f.write(reinterpret_cast<const char*>(t.data()),
                std::streamsize(size_t(t.numel()) * sizeof(float)));
    }
    if (!f) throw DataError("short write to " + path.string());
}

NamedTensors read_difw(const fs::path& path) {
    auto f = open_in(path);
    char magic[4];
    read_exact(f, magic, 4, path);
    if (std::memcmp(magic, "DIFW", 4) != 0) fail(path, "expected magic DIFW");
    const auto version = get<uint32_t>(f, path);
    if (version != kDifwVersion)
        fail(path, "unsupported version " + std::to_string(version) + ", reader supports " +
                       std::to_string(kDifwVersion));
    const auto count = get<uint32_t>(f, path);
    NamedTensors out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<uint32_t>(f, path);
        std::string name(name_len, '\0');
        read_exact(f, name.data(), name_len, path);
        const auto rank = get<uint32_t>(f, path);
        if (rank > 8) fail(path, "implausible tensor rank " + std::to_string(rank));
        std::vector<int64_t> shape(rank);
        int64_t n = 1;
        for (auto& d : shape) {
            d = int64_t(get<uint64_t>(f, path));
            n *= d;
        }
        std::vector<float> data(static_cast<size_t>(n));
        read_exact(f, data.data(), data.size() * sizeof(float), path);
        out.emplace_back(std::move(name), Tensor<float>::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

// ---- geometry config ----------------------------------------------------------

ScannerGeometry GeometrySpec::with_views(int k) const {
    ScannerGeometry g = geom;
    if (k < 1) throw InvalidArgumentError("geometry: need at least 1 view");
    const double range = angle_range_deg * std::numbers::pi / 180.0;
    g.angles.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) g.angles[size_t(i)] = double(i) * range / double(k);
    g.validate();
    return g;
}

GeometrySpec parse_geometry(const fs::path& path) {
    auto f = open_in(path);
    GeometrySpec spec;
    std::map<std::string, std::vector<std::string>> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (auto pos = line.find('#'); pos != std::string::npos) line.resize(pos);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        std::vector<std::string> vals;
        std::string tok;
        while (ls >> tok) vals.push_back(tok);
        if (vals.empty()) fail(path, "key '" + key + "' has no value");
        kv[key] = vals;
    }
    auto want1 = [&](const std::string& key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) fail(path, "missing key '" + key + "'");
        return it->second[0];
    };
    ScannerGeometry& g = spec.geom;
    g.dso_mm = parse_num<double>(want1("dso_mm"), path);
    g.dsd_mm = parse_num<double>(want1("dsd_mm"), path);
    g.det_rows = parse_num<int>(want1("det_rows"), path);
    g.det_cols = parse_num<int>(want1("det_cols"), path);
    g.det_spacing_u_mm = parse_num<double>(want1("det_spacing_u_mm"), path);
    g.det_spacing_v_mm = parse_num<double>(want1("det_spacing_v_mm"), path);
    spec.n_views = parse_num<int>(want1("n_views"), path);
    spec.angle_range_deg = parse_num<double>(want1("angle_range_deg"), path);
    auto shape_it = kv.find("volume_shape");
    if (shape_it == kv.end()) fail(path, "missing key 'volume_shape'");
    auto spacing_it = kv.find("voxel_spacing_mm");
    if (spacing_it == kv.end()) fail(path, "missing key 'voxel_spacing_mm'");
    auto triple = [&](const std::vector<std::string>& vals, auto& out) {
        if (vals.size() == 1) {
            auto v = parse_num<std::decay_t<decltype(out[0])>>(vals[0], path);
            out = {v, v, v};
        } else if (vals.size() == 3) {
            for (int a = 0; a < 3; ++a)
                out[size_t(a)] = parse_num<std::decay_t<decltype(out[0])>>(vals[size_t(a)], path);
        } else {
            fail(path, "expected 1 or 3 values");
        }
    };
    triple(shape_it->second, spec.volume_shape);
    triple(spacing_it->second, spec.voxel_spacing);
    for (int a = 0; a < 3; ++a)
        g.volume_extent_mm[size_t(a)] =
            double(spec.volume_shape[size_t(a)]) * spec.voxel_spacing[size_t(a)];
    g.angles = spec.with_views(spec.n_views).angles;
    g.validate();
    return spec;
}

void write_geometry(const fs::path& path, const GeometrySpec& spec) {
    auto f = open_out(path);
    const ScannerGeometry& g = spec.geom;
    f << "dso_mm " << fmt(g.dso_mm) << "\n";
    f << "dsd_mm " << fmt(g.dsd_mm) << "\n";
    f << "det_rows " << g.det_rows << "\n";
    f << "det_cols " << g.det_cols << "\n";
    f << "det_spacing_u_mm " << fmt(g.det_spacing_u_mm) << "\n";
    f << "det_spacing_v_mm " << fmt(g.det_spacing_v_mm) << "\n";
    f << "n_views " << spec.n_views << "\n";
    f << "angle_range_deg " << fmt(spec.angle_range_deg) << "\n";
    f << "volume_shape " << spec.volume_shape[0] << " " << spec.volume_shape[1] << " "
      << spec.volume_shape[2] << "\n";
    f << "voxel_spacing_mm " << fmt(spec.voxel_spacing[0]) << " " << fmt(spec.voxel_spacing[1])
      << " " << fmt(spec.voxel_spacing[2]) << "\n";
    if (!f) throw DataError("short write to " + path.string());
}

// ---- dataset manifest ----------------------------------------------------------

std::vector<ManifestEntry> DatasetManifest::split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
        if (e.split == tag) out.push_back(e);
    return out;
}

DatasetManifest parse_manifest(const fs::path& path) {
    auto f = open_in(path);
    std::string line;
    if (!std::getline(f, line) || line != "DIFMANIFEST v1")
        fail(path, "expected header 'DIFMANIFEST v1'");
    DatasetManifest m;
    const fs::path base = path.parent_path();
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        if (key == "geometry") {
            std::string p;
            ls >> p;
            m.geometry_path = base / p;
        } else if (key == "normalization_divisor") {
            std::string v;
            ls >> v;
            m.normalization_divisor = parse_num<double>(v, path);
        } else if (key == "intensity_threshold") {
            std::string v;
            ls >> v;
            m.intensity_threshold = std::stof(v);
        } else if (key == "seed") {
            std::string v;
            ls >> v;
            m.seed = parse_num<uint64_t>(v, path);
        } else if (key == "entry") {
            ManifestEntry e;
            std::string vol, proj;
            ls >> e.split >> vol >> proj;
            if (e.split.empty() || vol.empty() || proj.empty())
                fail(path, "malformed entry line '" + line + "'");
            e.volume = base / vol;
            e.projections = base / proj;
            m.entries.push_back(std::move(e));
        } else {
            fail(path, "unknown manifest key '" + key + "'");
        }
    }
    for (const auto& e : m.entries) {
        if (!fs::exists(e.volume)) throw DataError("manifest references missing " + e.volume.string());
        if (!fs::exists(e.projections))
            throw DataError("manifest references missing " + e.projections.string());
    }
    return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
    auto f = open_out(path);
    const fs::path base = path.parent_path();
    f << "DIFMANIFEST v1\n";
    f << "geometry " << fs::relative(m.geometry_path, base).string() << "\n";
    f << "normalization_divisor " << fmt(m.normalization_divisor) << "\n";
    f << "intensity_threshold " << fmt(double(m.intensity_threshold)) << "\n";
    f << "seed " << m.seed << "\n";
    for (const auto& e : m.entries)
        f << "entry " << e.split << " " << fs::relative(e.volume, base).string() << " "
          << fs::relative(e.projections, base).string() << "\n";
    if (!f) throw DataError("short write to " + path.string());
}

DatasetManifest build_dataset(int n_train, int n_val, int n_test, PhantomKind kind,
                              const GeometrySpec& spec, int views, uint64_t seed,
                              const fs::path& out_dir) {
    if (n_train < 0 || n_val < 0 || n_test < 0)
        throw InvalidArgumentError("build_dataset: negative split count");
    fs::create_directories(out_dir);
    GeometrySpec used = spec;
    used.n_views = views;
    const ScannerGeometry geom = used.with_views(views);
    const fs::path geom_path = out_dir / "geometry.cfg";
    write_geometry(geom_path, used);

    DatasetManifest m;
    m.geometry_path = geom_path;
    m.seed = seed;
    m.intensity_threshold = 1e-5f;

    std::vector<float> train_values;
    const int total = n_train + n_val + n_test;
    int index = 0;
    auto emit = [&](const std::string& split, int count) {
        for (int i = 0; i < count; ++i, ++index) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "case_%04d", index);
            const Volume3D vol =
                make_phantom(kind, used.volume_shape, used.voxel_spacing, Rng::mix(seed, uint64_t(index)));
            const ProjectionStack stack = forward_project(vol, geom);
            const fs::path vp = out_dir / (std::string(stem) + ".difvol");
            const fs::path pp = out_dir / (std::string(stem) + ".difproj");
            write_difvol(vp, vol);
            write_difproj(pp, stack);
            if (split == "train")
                train_values.insert(train_values.end(), stack.data.begin(), stack.data.end());
            m.entries.push_back({split, vp, pp});
        }
    };
    emit("train", n_train);
    emit("val", n_val);
    emit("test", n_test);
    (void)total;

    // 99.9th percentile of the training projections; falls back to 1 when
    // there is no train split
    if (!train_values.empty()) {
        const size_t idx = size_t(std::min<double>(double(train_values.size()) - 1.0,
                                                   0.999 * double(train_values.size())));
        std::nth_element(train_values.begin(), train_values.begin() + std::ptrdiff_t(idx),
                         train_values.end());
        const double p = double(train_values[idx]);
        m.normalization_divisor = p > 0.0 ? p : 1.0;
    }
    write_manifest(out_dir / "manifest.txt", m);
    return m;
}

// ---- model checkpoint -----------------------------------------------------------

void save_model(const fs::path& path, const DifModel& model) {
    NamedTensors tensors = model.named_parameters();
    write_difw(path, tensors);
    const fs::path mpath = path.string() + ".manifest";
    auto f = open_out(mpath);
    f << "DIFMODEL v1\n";
    f << "channels " << model.channels << "\n";
    f << "base_width " << model.encoder.base_width << "\n";
    f << "depth 3\n";
    f << "fusion " << to_string(model.fusion) << "\n";
    f << "k " << model.trained_k() << "\n";
    f << "angles";
    for (double a : model.geometry.angles) f << " " << fmt(a);
    f << "\n";
    f << "norm_divisor " << fmt(model.norm_divisor) << "\n";
    const ScannerGeometry& g = model.geometry;
    f << "geom.dso_mm " << fmt(g.dso_mm) << "\n";
    f << "geom.dsd_mm " << fmt(g.dsd_mm) << "\n";
    f << "geom.det_rows " << g.det_rows << "\n";
    f << "geom.det_cols " << g.det_cols << "\n";
    f << "geom.det_spacing_u_mm " << fmt(g.det_spacing_u_mm) << "\n";
    f << "geom.det_spacing_v_mm " << fmt(g.det_spacing_v_mm) << "\n";
    f << "geom.volume_extent_mm " << fmt(g.volume_extent_mm[0]) << " "
      << fmt(g.volume_extent_mm[1]) << " " << fmt(g.volume_extent_mm[2]) << "\n";
    if (!f) throw DataError("short write to " + mpath.string());
}

DifModel load_model(const fs::path& path) {
    const fs::path mpath = path.string() + ".manifest";
    auto f = open_in(mpath);
    std::string line;
    if (!std::getline(f, line) || line != "DIFMODEL v1")
        fail(mpath, "expected header 'DIFMODEL v1'");
    int64_t channels = 0, base_width = 0;
    FusionMode fusion = FusionMode::mlp;
    ScannerGeometry geom;
    geom.angles.clear();
    double norm_divisor = 1.0;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        if (key == "channels") ls >> channels;
        else if (key == "base_width") ls >> base_width;
        else if (key == "depth") { int d; ls >> d; }
        else if (key == "fusion") { std::string s; ls >> s; fusion = fusion_from_string(s); }
        else if (key == "k") { int64_t k; ls >> k; }
        else if (key == "angles") {
            double a;
            while (ls >> a) geom.angles.push_back(a);
        } else if (key == "norm_divisor") ls >> norm_divisor;
        else if (key == "geom.dso_mm") ls >> geom.dso_mm;
        else if (key == "geom.dsd_mm") ls >> geom.dsd_mm;
        else if (key == "geom.det_rows") ls >> geom.det_rows;
        else if (key == "geom.det_cols") ls >> geom.det_cols;
        else if (key == "geom.det_spacing_u_mm") ls >> geom.det_spacing_u_mm;
        else if (key == "geom.det_spacing_v_mm") ls >> geom.det_spacing_v_mm;
        else if (key == "geom.volume_extent_mm")
            ls >> geom.volume_extent_mm[0] >> geom.volume_extent_mm[1] >> geom.volume_extent_mm[2];
        else fail(mpath, "unknown model manifest key '" + key + "'");
    }
    if (channels == 0 || base_width == 0) fail(mpath, "incomplete model manifest");
    DifModel model = DifModel::create(channels, base_width, fusion, geom, 0);
    model.norm_divisor = norm_divisor;

    NamedTensors stored = read_difw(path);
    auto live = model.named_parameters();
    if (stored.size() != live.size())
        fail(path, "checkpoint holds " + std::to_string(stored.size()) + " tensors, model needs " +
                       std::to_string(live.size()));
    for (size_t i = 0; i < live.size(); ++i) {
        if (stored[i].first != live[i].first)
            fail(path, "tensor " + std::to_string(i) + " named '" + stored[i].first +
                           "', expected '" + live[i].first + "'");
        if (stored[i].second.shape() != live[i].second.shape())
            fail(path, "tensor '" + live[i].first + "' has shape " +
                           shape_str(stored[i].second.shape()) + ", expected " +
                           shape_str(live[i].second.shape()));
        std::copy(stored[i].second.values().begin(), stored[i].second.values().end(),
                  live[i].second.values().begin());
    }
    return model;
}

}  // namespace difct
