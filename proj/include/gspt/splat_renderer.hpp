#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gspt/geometry.hpp"

namespace gspt {

struct Quat {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    double norm() const;
    Mat3 to_matrix() const;
    static Quat from_matrix(const Mat3& r);
    Quat operator*(const Quat& o) const;
    bool operator==(const Quat&) const = default;
};

struct Gaussian3D {
    Vec3 mean;
    Vec3 scale{0.01, 0.01, 0.01}; ///< standard deviations along the local axes
    Quat rotation;
    double opacity = 0.8;
    Vec3 color{1.0, 1.0, 1.0};

    /// R diag(scale^2) R^T
    Mat3 covariance() const;
};

using GaussianSet = std::vector<Gaussian3D>;

/// Throws InvalidArgument unless the quaternion is unit (1e-6), scales are positive
/// and opacity lies in (0, 1].
void validate(const Gaussian3D& g);

/// Pinhole camera with the principal point at the image center. Camera space has
/// +z along the view direction, +x to the right and +y down the image.
struct Camera {
    Vec3 position{0.0, 0.0, -3.0};
    Vec3 look_at{0.0, 0.0, 0.0};
    Vec3 up{0.0, 1.0, 0.0};
    double focal = 64.0; ///< pixels
    int width = 64;
    int height = 64;
    double near = 0.01;

    Vec3 forward() const;
    /// World-to-camera rotation; rows are the camera's right, down and forward axes.
    Mat3 world_to_camera() const;
    Vec3 to_camera(const Vec3& world) const;
};

void validate(const Camera& cam);

/// Row-major image with interleaved channels; (0, 0) is the top-left pixel.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0);

    double& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c = 0) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    bool operator==(const Image&) const = default;
};

struct RenderOutput {
    Image rgb;   ///< 3 channels in [0, 1]
    Image depth; ///< camera-space z; 0 where alpha <= 1e-4
    Image alpha; ///< accumulated opacity
};

struct Projection {
    double u = 0.0; ///< pixel coordinates of the projected mean
    double v = 0.0;
    double cov[2][2] = {{0, 0}, {0, 0}}; ///< image-space covariance incl. dilation
    double depth = 0.0;                  ///< camera-space z
};

/// Image-space covariance floor added to the diagonal, in px^2.
inline constexpr double kCovarianceDilation = 0.3;
inline constexpr double kMaxAlpha = 0.99;

/// EWA projection of one Gaussian. Empty when the mean is closer than `near`.
std::optional<Projection> project_gaussian(const Gaussian3D& g, const Camera& cam);

/// Front-to-back alpha compositing of all Gaussians sorted by camera depth. Equal
/// depths are ordered by the Gaussian parameters, so the result does not depend on
/// the order of `gs`.
RenderOutput render(std::span<const Gaussian3D> gs, const Camera& cam, const Vec3& background = {1.0, 1.0, 1.0});

/// Per-pixel compositing weights of a render: pixel p receives
/// sum_i weight(p, i) * color_i + transmittance[p] * background.
struct SplatWeights {
    std::vector<std::size_t> row_ptr; ///< per pixel (row-major), size pixels + 1
    std::vector<std::size_t> gaussian;
    std::vector<double> weight;
    std::vector<double> transmittance;
};
SplatWeights splat_weights(std::span<const Gaussian3D> gs, const Camera& cam);

/// Isotropic Gaussian per point: scale = scale_factor * mean distance to the
/// k_nn nearest other points, identity rotation, opacity 0.8, height colormap.
GaussianSet gaussians_from_points(const PointCloud& pc, std::size_t k_nn, double scale_factor);

/// Hue ramp from red (lowest y) to blue (highest y).
Vec3 height_color(double y, double y_min, double y_max);

/// Means, or one draw per Gaussian from N(mean, covariance) when `jitter` is set.
PointCloud sample_point_cloud(std::span<const Gaussian3D> gs, bool jitter, std::uint64_t rng_seed);

/// Cameras on a circle of the given elevation, azimuth 360 * i / count degrees,
/// all looking at `center` with world up (0, 1, 0).
std::vector<Camera> orbit_cameras(const Vec3& center, double radius, int count, double elevation_deg, double focal,
                                  int width, int height);

Camera orbit_camera(const Vec3& center, double radius, double azimuth_deg, double elevation_deg, double focal, int width,
                    int height);

/// Optimizes Gaussian colors by Adam on the mean squared error between renders and
/// `targets`; geometry and opacity are held fixed. Returns the final loss.
double refine_colors(GaussianSet& gs, std::span<const Camera> cams, std::span<const Image> targets, int steps,
                     double lr = 0.05, const Vec3& background = {1.0, 1.0, 1.0});

// Image files: binary PPM (P6, maxval 255) for RGB and 16-bit PGM (P5, maxval
// 65535, big-endian samples) for depth. Depth is quantized linearly over
// [min, max] of the finite covered depths; the range is written to `sidecar`.
void write_ppm(const std::filesystem::path& path, const Image& rgb);
Image read_ppm(const std::filesystem::path& path);
void write_depth_pgm(const std::filesystem::path& path, const std::filesystem::path& sidecar, const Image& depth,
                     const Image& alpha);

// GaussianSet binary: little-endian uint64 count, then per Gaussian 14 float32:
// mean(3) scale(3) quat wxyz(4) opacity(1) color(3).
void write_gaussians(const std::filesystem::path& path, std::span<const Gaussian3D> gs);
GaussianSet read_gaussians(const std::filesystem::path& path);

} // namespace gspt
