#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gspt/geometry.hpp"
#include "gspt/splat_renderer.hpp"

namespace gspt {

enum class SynthClass : int { sphere = 0, cube = 1, cylinder = 2, cone = 3, torus = 4 };
inline constexpr int kNumSynthClasses = 5;

std::string_view class_name(SynthClass c);
/// Accepts a class name or its integer id. Throws InvalidArgument otherwise.
SynthClass parse_synth_class(std::string_view name);
/// Throws InvalidArgument for ids outside [0, kNumSynthClasses).
SynthClass synth_class_from_id(int id);

/// n area-uniform surface samples of a primitive: unit sphere, cube of side 2,
/// cylinder r=1 h=2, cone base radius 1 height 2, torus R=1 r=0.4.
PointCloud synth_shape(SynthClass c, std::size_t n, std::uint64_t rng_seed);

struct PipelineConfig {
    std::size_t n_points = 512;
    int render_size = 64;
    int n_views = 4;
    double elevation_deg = 20.0;
    double radius_factor = 2.2; ///< camera distance in bounding radii
    double focal_factor = 1.2;  ///< focal length in image widths
    bool jitter = true;
    double scale_factor = 0.5;
    std::size_t k_nn = 8;
    std::uint64_t seed = 0;
    int refine_steps = 0; ///< photometric color refinement against the input views
};

/// Throws ConfigError naming the offending field.
void validate(const PipelineConfig& cfg);

/// key=value lines; blank lines and lines starting with '#' are ignored. Unknown
/// keys, malformed lines and invalid values throw ConfigError.
PipelineConfig parse_pipeline_config(std::istream& in, const std::string& source = "<config>");
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
/// Applies one entry; returns false for keys that are not pipeline keys.
bool set_pipeline_key(PipelineConfig& cfg, const std::string& key, const std::string& value, const std::string& where);
std::string to_config_string(const PipelineConfig& cfg);

struct Triplet {
    PointCloud point_cloud;         ///< normalized, FPS-downsampled to n_points
    Image novel_view;               ///< RGB
    Image depth_map;                ///< camera-space depth, 0 where uncovered
    Image depth_alpha;              ///< coverage of depth_map
    std::vector<Image> input_views; ///< RGB renders at the orbit azimuths
    PointCloud gs_points;           ///< sampled from the fitted Gaussians
    std::optional<int> label;

    double novel_azimuth_deg = 0.0;
    std::size_t depth_view = 0; ///< index of the input camera used for depth_map
};

/// Input-view cameras for a normalized cloud (centered, bounding radius 1).
std::vector<Camera> input_cameras(const PipelineConfig& cfg);
Camera novel_camera(const PipelineConfig& cfg, double azimuth_deg);

/// Uniform over [0, 360) minus the +-10 degree windows around the input azimuths.
double draw_novel_azimuth(int n_views, std::uint64_t rng_seed);

/// Normalizes `pc`, downsamples it by FPS, renders the input views from the source
/// surface, fits Gaussians to the downsampled cloud, samples gs_points and renders
/// the novel view and the depth map. Pure function of its arguments.
Triplet build_triplet(const PointCloud& pc, const PipelineConfig& cfg, std::uint64_t rng_seed);

/// Reads the binary format when the header count matches the file size, text otherwise.
PointCloud load_pointcloud(const std::filesystem::path& path);

struct LabeledCloud {
    PointCloud cloud;
    int label = 0;
};

/// Seed offset that yields a split disjoint from the one generated with `seed`.
inline constexpr std::uint64_t kTestSplitSeedOffset = 0x5eed0000000dULL;

/// n_classes * n_per_class shapes of the first n_classes classes in
/// class-interleaved order, each randomly rotated and scaled per axis by a factor
/// in [0.7, 1.3]. Source clouds hold 2 * cfg.n_points samples.
std::vector<LabeledCloud> make_dataset(const PipelineConfig& cfg, std::size_t n_per_class, std::uint64_t rng_seed,
                                       int n_classes = kNumSynthClasses);

/// Dataset directory: labels.txt lists "<file> <label>" per shape, the clouds are
/// binary point-cloud files next to it.
void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledCloud>& shapes);
/// Throws InvalidInput for a missing index or cloud, FormatError for a bad line.
std::vector<LabeledCloud> read_dataset(const std::filesystem::path& dir);

} // namespace gspt
