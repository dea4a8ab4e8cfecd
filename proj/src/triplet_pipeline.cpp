#include "gspt/triplet_pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "config_parse.hpp"
#include "gspt/errors.hpp"
#include "gspt/rng.hpp"

namespace gspt {

namespace {

constexpr std::array<std::string_view, kNumSynthClasses> kClassNames = {"sphere", "cube", "cylinder", "cone", "torus"};
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kNovelExclusionDeg = 10.0;

Vec3 sample_sphere(Rng& rng, std::size_t) {
    Vec3 v;
    do {
        v = {rng.normal(), rng.normal(), rng.normal()};
    } while (squared_norm(v) < 1e-20);
    return normalized(v);
}

// Faces have equal area, so they are assigned round-robin (stratified) and the
// position within the face is random.
Vec3 sample_cube(Rng& rng, std::size_t i) {
    const std::size_t face = i % 6;
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    const double s = face % 2 == 0 ? 1.0 : -1.0;
    switch (face / 2) {
    case 0: return {s, a, b};
    case 1: return {a, s, b};
    default: return {a, b, s};
    }
}

Vec3 sample_disk(Rng& rng, double y) {
    const double r = std::sqrt(rng.uniform()), t = kTwoPi * rng.uniform();
    return {r * std::cos(t), y, r * std::sin(t)};
}

Vec3 sample_cylinder(Rng& rng, std::size_t) {
    // lateral area 4 pi, caps 2 pi together
    const double u = rng.uniform() * 3.0;
    if (u < 2.0) {
        const double t = kTwoPi * rng.uniform();
        return {std::cos(t), rng.uniform(-1, 1), std::sin(t)};
    }
    return sample_disk(rng, u < 2.5 ? 1.0 : -1.0);
}

Vec3 sample_cone(Rng& rng, std::size_t) {
    // apex at y = 1, base radius 1 at y = -1; lateral area pi * sqrt(5), base pi
    const double slant = std::sqrt(5.0);
    if (rng.uniform() * (slant + 1.0) < slant) {
        const double s = std::sqrt(rng.uniform()); // fraction of the way from the apex
        const double t = kTwoPi * rng.uniform();
        return {s * std::cos(t), 1.0 - 2.0 * s, s * std::sin(t)};
    }
    return sample_disk(rng, -1.0);
}

Vec3 sample_torus(Rng& rng, std::size_t) {
    constexpr double R = 1.0, r = 0.4;
    for (;;) {
        const double theta = kTwoPi * rng.uniform(), phi = kTwoPi * rng.uniform();
        // area element is proportional to R + r cos(phi)
        if (rng.uniform() * (R + r) <= R + r * std::cos(phi)) {
            const double ring = R + r * std::cos(phi);
            return {ring * std::cos(theta), r * std::sin(phi), ring * std::sin(theta)};
        }
    }
}

Mat3 random_rotation(Rng& rng) {
    Quat q;
    double n = 0.0;
    do {
        q = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        n = q.norm();
    } while (n < 1e-12);
    return q.to_matrix();
}

double angular_gap(double a, double b) {
    const double d = std::fmod(std::abs(a - b), 360.0);
    return std::min(d, 360.0 - d);
}

} // namespace

std::string_view class_name(SynthClass c) {
    const int id = static_cast<int>(c);
    if (id < 0 || id >= kNumSynthClasses) throw InvalidArgument("unknown shape class id " + std::to_string(id));
    return kClassNames[static_cast<std::size_t>(id)];
}

SynthClass synth_class_from_id(int id) {
    if (id < 0 || id >= kNumSynthClasses) throw InvalidArgument("unknown shape class id " + std::to_string(id));
    return static_cast<SynthClass>(id);
}

SynthClass parse_synth_class(std::string_view name) {
    for (std::size_t i = 0; i < kClassNames.size(); ++i)
        if (kClassNames[i] == name) return static_cast<SynthClass>(i);
    int id = -1;
    const auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), id);
    if (ec == std::errc() && ptr == name.data() + name.size()) return synth_class_from_id(id);
    throw InvalidArgument("unknown shape class \"" + std::string(name) + "\"");
}

PointCloud synth_shape(SynthClass c, std::size_t n, std::uint64_t rng_seed) {
    if (n < 16) throw InvalidArgument("synth_shape: n must be at least 16");
    Vec3 (*sampler)(Rng&, std::size_t) = nullptr;
    switch (c) {
    case SynthClass::sphere: sampler = sample_sphere; break;
    case SynthClass::cube: sampler = sample_cube; break;
    case SynthClass::cylinder: sampler = sample_cylinder; break;
    case SynthClass::cone: sampler = sample_cone; break;
    case SynthClass::torus: sampler = sample_torus; break;
    default: throw InvalidArgument("unknown shape class id " + std::to_string(static_cast<int>(c)));
    }
    Rng rng(derive_seed(rng_seed, {static_cast<std::uint64_t>(c)}));
    PointCloud pc;
    pc.points.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pc.points.push_back(sampler(rng, i));
    return pc;
}

// ---------------------------------------------------------------------------
// Configuration

void validate(const PipelineConfig& cfg) {
    auto fail = [](const std::string& msg) { throw ConfigError("pipeline config: " + msg); };
    if (cfg.n_points < 16) fail("n_points must be at least 16");
    if (cfg.render_size < 8) fail("render_size must be at least 8");
    // each input view excludes a 20 degree window for the novel view
    if (cfg.n_views < 1 || cfg.n_views > 17) fail("n_views must be in [1, 17]");
    if (!(std::abs(cfg.elevation_deg) < 89.0)) fail("elevation_deg must lie in (-89, 89)");
    if (!(cfg.radius_factor > 1.0) || !std::isfinite(cfg.radius_factor)) fail("radius_factor must exceed 1");
    if (!(cfg.focal_factor > 0.0) || !std::isfinite(cfg.focal_factor)) fail("focal_factor must be positive");
    if (!(cfg.scale_factor > 0.0) || !std::isfinite(cfg.scale_factor)) fail("scale_factor must be positive");
    if (cfg.k_nn < 1 || cfg.k_nn >= cfg.n_points) fail("k_nn must be in [1, n_points)");
    if (cfg.refine_steps < 0) fail("refine_steps must be non-negative");
}

bool set_pipeline_key(PipelineConfig& cfg, const std::string& key, const std::string& value, const std::string& where) {
    using detail::parse_value;
    if (key == "n_points") cfg.n_points = parse_value<std::size_t>(value, where);
    else if (key == "render_size") cfg.render_size = parse_value<int>(value, where);
    else if (key == "n_views") cfg.n_views = parse_value<int>(value, where);
    else if (key == "elevation_deg") cfg.elevation_deg = parse_value<double>(value, where);
    else if (key == "radius_factor") cfg.radius_factor = parse_value<double>(value, where);
    else if (key == "focal_factor") cfg.focal_factor = parse_value<double>(value, where);
    else if (key == "jitter") cfg.jitter = detail::parse_flag(value, where);
    else if (key == "scale_factor") cfg.scale_factor = parse_value<double>(value, where);
    else if (key == "k_nn") cfg.k_nn = parse_value<std::size_t>(value, where);
    else if (key == "seed") cfg.seed = parse_value<std::uint64_t>(value, where);
    else if (key == "refine_steps") cfg.refine_steps = parse_value<int>(value, where);
    else return false;
    return true;
}

PipelineConfig parse_pipeline_config(std::istream& in, const std::string& source) {
    PipelineConfig cfg;
    detail::for_each_entry(in, source, [&](const std::string& key, const std::string& value, const std::string& where) {
        if (!set_pipeline_key(cfg, key, value, where)) throw ConfigError(where + ": unknown key \"" + key + "\"");
    });
    validate(cfg);
    return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    return parse_pipeline_config(in, path.string());
}

std::string to_config_string(const PipelineConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "n_points=" << cfg.n_points << "\nrender_size=" << cfg.render_size << "\nn_views=" << cfg.n_views
       << "\nelevation_deg=" << cfg.elevation_deg << "\nradius_factor=" << cfg.radius_factor
       << "\nfocal_factor=" << cfg.focal_factor << "\njitter=" << (cfg.jitter ? 1 : 0)
       << "\nscale_factor=" << cfg.scale_factor << "\nk_nn=" << cfg.k_nn << "\nseed=" << cfg.seed
       << "\nrefine_steps=" << cfg.refine_steps << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Triplets

std::vector<Camera> input_cameras(const PipelineConfig& cfg) {
    return orbit_cameras({0, 0, 0}, cfg.radius_factor, cfg.n_views, cfg.elevation_deg,
                         cfg.focal_factor * cfg.render_size, cfg.render_size, cfg.render_size);
}

Camera novel_camera(const PipelineConfig& cfg, double azimuth_deg) {
    return orbit_camera({0, 0, 0}, cfg.radius_factor, azimuth_deg, cfg.elevation_deg,
                        cfg.focal_factor * cfg.render_size, cfg.render_size, cfg.render_size);
}

double draw_novel_azimuth(int n_views, std::uint64_t rng_seed) {
    if (n_views < 1 || n_views > 17) throw InvalidArgument("draw_novel_azimuth: n_views must be in [1, 17]");
    Rng rng(rng_seed);
    for (;;) {
        const double az = rng.uniform(0.0, 360.0);
        bool ok = true;
        for (int i = 0; i < n_views && ok; ++i) ok = angular_gap(az, 360.0 * i / n_views) >= kNovelExclusionDeg;
        if (ok) return az;
    }
}

Triplet build_triplet(const PointCloud& pc, const PipelineConfig& cfg, std::uint64_t rng_seed) {
    validate(cfg);
    if (pc.size() < cfg.n_points)
        throw InvalidArgument("build_triplet: cloud has " + std::to_string(pc.size()) + " points, need " +
                              std::to_string(cfg.n_points));

    const PointCloud normalized = normalize_unit_sphere(pc);
    // An FPS prefix is itself an FPS sample, so the denser source surface and P_i
    // come from one ordering.
    const std::size_t n_source = std::min(pc.size(), 2 * cfg.n_points);
    const IndexSet order = fps(normalized, n_source);
    const PointCloud source = select(normalized, order);

    Triplet t;
    t.point_cloud = select(normalized, std::span(order).first(cfg.n_points));

    const auto cams = input_cameras(cfg);
    const GaussianSet surface = gaussians_from_points(source, std::min(cfg.k_nn, source.size() - 1), cfg.scale_factor);
    for (const auto& cam : cams) t.input_views.push_back(render(surface, cam).rgb);

    GaussianSet fitted = gaussians_from_points(t.point_cloud, cfg.k_nn, cfg.scale_factor);
    if (cfg.refine_steps > 0) refine_colors(fitted, cams, t.input_views, cfg.refine_steps);

    t.gs_points = sample_point_cloud(fitted, cfg.jitter, derive_seed(rng_seed, {1}));

    t.novel_azimuth_deg = draw_novel_azimuth(cfg.n_views, derive_seed(rng_seed, {2}));
    t.novel_view = render(fitted, novel_camera(cfg, t.novel_azimuth_deg)).rgb;

    Rng pick(derive_seed(rng_seed, {3}));
    t.depth_view = pick.uniform_index(cams.size());
    auto depth = render(fitted, cams[t.depth_view]);
    t.depth_map = std::move(depth.depth);
    t.depth_alpha = std::move(depth.alpha);
    return t;
}

PointCloud load_pointcloud(const std::filesystem::path& path) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw InvalidInput("cannot open " + path.string());
    if (size == 0) throw InvalidInput(path.string() + ": empty file");
    if (size >= 8) {
        std::ifstream in(path, std::ios::binary);
        unsigned char header[8];
        in.read(reinterpret_cast<char*>(header), 8);
        std::uint64_t count = 0;
        for (int i = 7; i >= 0; --i) count = (count << 8) | header[i];
        if (count > 0 && count <= (size - 8) / 12 && 8 + 12 * count == size) return read_pointcloud_binary(path);
    }
    return read_pointcloud_text(path);
}

std::vector<LabeledCloud> make_dataset(const PipelineConfig& cfg, std::size_t n_per_class, std::uint64_t rng_seed,
                                       int n_classes) {
    if (n_per_class < 1) throw InvalidArgument("make_dataset: n_per_class must be at least 1");
    if (n_classes < 1 || n_classes > kNumSynthClasses)
        throw InvalidArgument("make_dataset: n_classes must be in [1, " + std::to_string(kNumSynthClasses) + "]");
    std::vector<LabeledCloud> out;
    out.reserve(n_per_class * static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < n_per_class; ++i) {
        for (int c = 0; c < n_classes; ++c) {
            const std::size_t index = out.size();
            Rng rng(derive_seed(rng_seed, {index, 0}));
            const Mat3 rot = random_rotation(rng);
            const Mat3 scale = Mat3::diagonal({rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3)});
            const PointCloud shape = synth_shape(static_cast<SynthClass>(c), 2 * cfg.n_points, derive_seed(rng_seed, {index, 1}));
            out.push_back({transformed(shape, rot * scale), c});
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledCloud>& shapes) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "labels.txt");
    if (!index) throw InvalidInput("cannot write " + (dir / "labels.txt").string());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "shape_%05zu.bin", i);
        write_pointcloud_binary(dir / name, shapes[i].cloud);
        index << name << ' ' << shapes[i].label << '\n';
    }
    if (!index) throw InvalidInput("write failed for " + (dir / "labels.txt").string());
}

std::vector<LabeledCloud> read_dataset(const std::filesystem::path& dir) {
    const auto index_path = dir / "labels.txt";
    std::ifstream index(index_path);
    if (!index) throw InvalidInput("cannot open dataset index " + index_path.string());
    std::vector<LabeledCloud> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(index, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        std::string file;
        int label = 0;
        std::string rest;
        if (!(ls >> file >> label) || (ls >> rest) || label < 0)
            throw FormatError(index_path.string() + ":" + std::to_string(line_no) + ": expected \"<file> <label>\"",
                              line_no);
        out.push_back({load_pointcloud(dir / file), label});
    }
    if (out.empty()) throw InvalidInput(index_path.string() + ": dataset is empty");
    return out;
}

} // namespace gspt
