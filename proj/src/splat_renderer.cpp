#include "gspt/splat_renderer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <tuple>

#include "binary_io.hpp"
#include "gspt/autodiff.hpp"
#include "gspt/errors.hpp"
#include "gspt/rng.hpp"

namespace gspt {

// ---------------------------------------------------------------------------
// Quaternions and Gaussians

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Mat3 Quat::to_matrix() const {
    const double n = norm();
    const double qw = w / n, qx = x / n, qy = y / n, qz = z / n;
    Mat3 r;
    r.m[0][0] = 1 - 2 * (qy * qy + qz * qz);
    r.m[0][1] = 2 * (qx * qy - qz * qw);
    r.m[0][2] = 2 * (qx * qz + qy * qw);
    r.m[1][0] = 2 * (qx * qy + qz * qw);
    r.m[1][1] = 1 - 2 * (qx * qx + qz * qz);
    r.m[1][2] = 2 * (qy * qz - qx * qw);
    r.m[2][0] = 2 * (qx * qz - qy * qw);
    r.m[2][1] = 2 * (qy * qz + qx * qw);
    r.m[2][2] = 1 - 2 * (qx * qx + qy * qy);
    return r;
}

Quat Quat::from_matrix(const Mat3& r) {
    const auto& m = r.m;
    const double trace = m[0][0] + m[1][1] + m[2][2];
    Quat q;
    if (trace > 0) {
        const double s = 0.5 / std::sqrt(trace + 1.0);
        q = {0.25 / s, (m[2][1] - m[1][2]) * s, (m[0][2] - m[2][0]) * s, (m[1][0] - m[0][1]) * s};
    } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
        const double s = 2.0 * std::sqrt(1.0 + m[0][0] - m[1][1] - m[2][2]);
        q = {(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s};
    } else if (m[1][1] > m[2][2]) {
        const double s = 2.0 * std::sqrt(1.0 + m[1][1] - m[0][0] - m[2][2]);
        q = {(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s};
    } else {
        const double s = 2.0 * std::sqrt(1.0 + m[2][2] - m[0][0] - m[1][1]);
        q = {(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s};
    }
    const double n = q.norm();
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

Quat Quat::operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z, w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x, w * o.z + x * o.y - y * o.x + z * o.w};
}

Mat3 Gaussian3D::covariance() const {
    const Mat3 r = rotation.to_matrix();
    return r * Mat3::diagonal({scale.x * scale.x, scale.y * scale.y, scale.z * scale.z}) * r.transposed();
}

void validate(const Gaussian3D& g) {
    if (std::abs(g.rotation.norm() - 1.0) > 1e-6) throw InvalidArgument("gaussian: rotation is not a unit quaternion");
    if (!(g.scale.x > 0 && g.scale.y > 0 && g.scale.z > 0)) throw InvalidArgument("gaussian: scales must be positive");
    if (!(g.opacity > 0 && g.opacity <= 1)) throw InvalidArgument("gaussian: opacity must lie in (0, 1]");
    if (!is_finite(g.mean)) throw InvalidArgument("gaussian: non-finite mean");
}

// ---------------------------------------------------------------------------
// Camera

Vec3 Camera::forward() const { return normalized(look_at - position); }

Mat3 Camera::world_to_camera() const {
    const Vec3 f = forward();
    const Vec3 right = normalized(cross(f, up));
    const Vec3 cam_up = cross(right, f);
    Mat3 r;
    const Vec3 rows[3] = {right, -cam_up, f};
    for (int i = 0; i < 3; ++i) {
        r.m[i][0] = rows[i].x;
        r.m[i][1] = rows[i].y;
        r.m[i][2] = rows[i].z;
    }
    return r;
}

Vec3 Camera::to_camera(const Vec3& world) const { return world_to_camera() * (world - position); }

void validate(const Camera& cam) {
    if (!(cam.focal > 0)) throw InvalidArgument("camera: focal must be positive");
    if (cam.width <= 0 || cam.height <= 0) throw InvalidArgument("camera: image size must be positive");
    if (!(cam.near > 0)) throw InvalidArgument("camera: near must be positive");
    const Vec3 d = cam.look_at - cam.position;
    if (squared_norm(d) == 0.0) throw InvalidArgument("camera: position equals look_at");
    if (norm(cross(normalized(d), cam.up)) < 1e-9 * std::max(1.0, norm(cam.up)))
        throw InvalidArgument("camera: up is parallel to the view direction");
}

Image::Image(int w, int h, int c, double fill)
    : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

// ---------------------------------------------------------------------------
// Projection and compositing

namespace {

std::optional<Projection> project_with(const Gaussian3D& g, const Camera& cam, const Mat3& w2c) {
    const Vec3 pc = w2c * (g.mean - cam.position);
    if (pc.z < cam.near) return std::nullopt;

    const Mat3 sigma_c = w2c * g.covariance() * w2c.transposed();
    const double f = cam.focal, z = pc.z;
    const double j[2][3] = {{f / z, 0.0, -f * pc.x / (z * z)}, {0.0, f / z, -f * pc.y / (z * z)}};

    Projection p;
    p.u = f * pc.x / z + 0.5 * cam.width;
    p.v = f * pc.y / z + 0.5 * cam.height;
    p.depth = z;
    double js[2][3] = {};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < 3; ++k) js[r][c] += j[r][k] * sigma_c.m[k][c];
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += js[r][k] * j[c][k];
            p.cov[r][c] = s;
        }
    const double off = 0.5 * (p.cov[0][1] + p.cov[1][0]);
    p.cov[0][1] = p.cov[1][0] = off;
    p.cov[0][0] += kCovarianceDilation;
    p.cov[1][1] += kCovarianceDilation;
    return p;
}

// Total order used for front-to-back sorting; content tie-break keeps the result
// independent of input order.
bool render_before(const Projection& pa, const Gaussian3D& a, const Projection& pb, const Gaussian3D& b) {
    auto key = [](const Projection& p, const Gaussian3D& g) {
        return std::make_tuple(p.depth, g.mean.x, g.mean.y, g.mean.z, g.scale.x, g.scale.y, g.scale.z, g.rotation.w,
                               g.rotation.x, g.rotation.y, g.rotation.z, g.opacity, g.color.x, g.color.y, g.color.z);
    };
    return key(pa, a) < key(pb, b);
}

// Calls visit(pixel, gaussian, weight) for every contribution in front-to-back
// order; `transmittance` holds the remaining per-pixel transmittance afterwards.
template <typename Visit>
void composite(std::span<const Gaussian3D> gs, const Camera& cam, std::vector<double>& transmittance, Visit visit) {
    validate(cam);
    const Mat3 w2c = cam.world_to_camera();

    std::vector<std::pair<Projection, std::size_t>> projected;
    projected.reserve(gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
        if (auto p = project_with(gs[i], cam, w2c)) projected.emplace_back(*p, i);
    }
    std::sort(projected.begin(), projected.end(), [&](const auto& a, const auto& b) {
        return render_before(a.first, gs[a.second], b.first, gs[b.second]);
    });

    transmittance.assign(static_cast<std::size_t>(cam.width) * cam.height, 1.0);
    for (const auto& [p, gi] : projected) {
        const double a = p.cov[0][0], b = p.cov[0][1], c = p.cov[1][1];
        const double det = a * c - b * b;
        if (!(det > 0.0)) continue;
        const double inv_a = c / det, inv_b = -b / det, inv_c = a / det;
        const double mid = 0.5 * (a + c);
        const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
        const double radius = 3.0 * std::sqrt(lambda_max);

        const int x0 = std::max(0, static_cast<int>(std::ceil(p.u - radius - 0.5)));
        const int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.u + radius - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(p.v - radius - 0.5)));
        const int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.v + radius - 0.5)));
        const double opacity = gs[gi].opacity;
        for (int y = y0; y <= y1; ++y) {
            const double dy = y + 0.5 - p.v;
            for (int x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - p.u;
                const double power = -0.5 * (inv_a * dx * dx + 2.0 * inv_b * dx * dy + inv_c * dy * dy);
                const double alpha = std::min(kMaxAlpha, opacity * std::exp(power));
                if (alpha <= 0.0) continue;
                const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
                const double w = alpha * transmittance[pix];
                visit(pix, gi, w, p.depth);
                transmittance[pix] *= 1.0 - alpha;
            }
        }
    }
}

} // namespace

std::optional<Projection> project_gaussian(const Gaussian3D& g, const Camera& cam) {
    validate(cam);
    return project_with(g, cam, cam.world_to_camera());
}

RenderOutput render(std::span<const Gaussian3D> gs, const Camera& cam, const Vec3& background) {
    RenderOutput out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1), Image(cam.width, cam.height, 1)};
    std::vector<double> depth_acc(static_cast<std::size_t>(cam.width) * cam.height, 0.0);
    std::vector<double> transmittance;
    composite(gs, cam, transmittance, [&](std::size_t pix, std::size_t gi, double w, double depth) {
        const Vec3& c = gs[gi].color;
        out.rgb.data[3 * pix + 0] += w * c.x;
        out.rgb.data[3 * pix + 1] += w * c.y;
        out.rgb.data[3 * pix + 2] += w * c.z;
        out.alpha.data[pix] += w;
        depth_acc[pix] += w * depth;
    });
    for (std::size_t pix = 0; pix < transmittance.size(); ++pix) {
        const double t = transmittance[pix];
        out.rgb.data[3 * pix + 0] += t * background.x;
        out.rgb.data[3 * pix + 1] += t * background.y;
        out.rgb.data[3 * pix + 2] += t * background.z;
        const double a = out.alpha.data[pix];
        out.depth.data[pix] = a > 1e-4 ? depth_acc[pix] / a : 0.0;
    }
    return out;
}

SplatWeights splat_weights(std::span<const Gaussian3D> gs, const Camera& cam) {
    const std::size_t pixels = static_cast<std::size_t>(cam.width) * cam.height;
    std::vector<std::vector<std::pair<std::size_t, double>>> per_pixel(pixels);
    SplatWeights sw;
    composite(gs, cam, sw.transmittance,
              [&](std::size_t pix, std::size_t gi, double w, double) { per_pixel[pix].emplace_back(gi, w); });
    sw.row_ptr.reserve(pixels + 1);
    sw.row_ptr.push_back(0);
    for (const auto& entries : per_pixel) {
        for (const auto& [gi, w] : entries) {
            sw.gaussian.push_back(gi);
            sw.weight.push_back(w);
        }
        sw.row_ptr.push_back(sw.gaussian.size());
    }
    return sw;
}

// ---------------------------------------------------------------------------
// Construction and sampling

Vec3 height_color(double y, double y_min, double y_max) {
    const double t = y_max > y_min ? std::clamp((y - y_min) / (y_max - y_min), 0.0, 1.0) : 0.0;
    const double hue = t * 4.0; // sextants 0..4 of the HSV wheel: red -> blue
    const int sextant = std::min(3, static_cast<int>(hue));
    const double frac = hue - sextant;
    switch (sextant) {
    case 0: return {1.0, frac, 0.0};
    case 1: return {1.0 - frac, 1.0, 0.0};
    case 2: return {0.0, 1.0, frac};
    default: return {0.0, 1.0 - frac, 1.0};
    }
}

GaussianSet gaussians_from_points(const PointCloud& pc, std::size_t k_nn, double scale_factor) {
    if (pc.size() < 2) throw InvalidArgument("gaussians_from_points: need at least 2 points");
    if (k_nn < 1 || k_nn > pc.size() - 1)
        throw InvalidArgument("gaussians_from_points: k_nn must be in [1, " + std::to_string(pc.size() - 1) + "]");
    if (!(scale_factor > 0)) throw InvalidArgument("gaussians_from_points: scale_factor must be positive");

    double y_min = pc[0].y, y_max = pc[0].y;
    for (const auto& p : pc.points) {
        y_min = std::min(y_min, p.y);
        y_max = std::max(y_max, p.y);
    }

    GaussianSet gs;
    gs.reserve(pc.size());
    std::vector<double> dist;
    dist.reserve(pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
        dist.clear();
        for (std::size_t j = 0; j < pc.size(); ++j)
            if (j != i) dist.push_back(squared_distance(pc[i], pc[j]));
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_nn), dist.end());
        double mean_dist = 0.0;
        for (std::size_t k = 0; k < k_nn; ++k) mean_dist += std::sqrt(dist[k]);
        mean_dist /= static_cast<double>(k_nn);
        const double s = std::max(scale_factor * mean_dist, 1e-8);

        Gaussian3D g;
        g.mean = pc[i];
        g.scale = {s, s, s};
        g.color = height_color(pc[i].y, y_min, y_max);
        gs.push_back(g);
    }
    return gs;
}

PointCloud sample_point_cloud(std::span<const Gaussian3D> gs, bool jitter, std::uint64_t rng_seed) {
    if (gs.empty()) throw InvalidArgument("sample_point_cloud: empty Gaussian set");
    PointCloud pc;
    pc.points.reserve(gs.size());
    Rng rng(rng_seed);
    for (const auto& g : gs) {
        if (!jitter) {
            pc.points.push_back(g.mean);
            continue;
        }
        const double n0 = rng.normal(), n1 = rng.normal(), n2 = rng.normal();
        const Vec3 local{g.scale.x * n0, g.scale.y * n1, g.scale.z * n2};
        pc.points.push_back(g.mean + g.rotation.to_matrix() * local);
    }
    return pc;
}

Camera orbit_camera(const Vec3& center, double radius, double azimuth_deg, double elevation_deg, double focal, int width,
                    int height) {
    const double a = azimuth_deg * std::numbers::pi / 180.0;
    const double e = elevation_deg * std::numbers::pi / 180.0;
    Camera cam;
    cam.position = center + radius * Vec3{std::cos(e) * std::cos(a), std::sin(e), std::cos(e) * std::sin(a)};
    cam.look_at = center;
    cam.up = {0.0, 1.0, 0.0};
    cam.focal = focal;
    cam.width = width;
    cam.height = height;
    return cam;
}

std::vector<Camera> orbit_cameras(const Vec3& center, double radius, int count, double elevation_deg, double focal,
                                  int width, int height) {
    if (!(radius > 0)) throw InvalidArgument("orbit_cameras: radius must be positive");
    if (count < 1) throw InvalidArgument("orbit_cameras: count must be at least 1");
    std::vector<Camera> cams;
    cams.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        cams.push_back(orbit_camera(center, radius, 360.0 * i / count, elevation_deg, focal, width, height));
    return cams;
}

// ---------------------------------------------------------------------------
// Photometric color refinement

double refine_colors(GaussianSet& gs, std::span<const Camera> cams, std::span<const Image> targets, int steps, double lr,
                     const Vec3& background) {
    if (cams.size() != targets.size()) throw InvalidArgument("refine_colors: one target image per camera required");
    if (gs.empty() || steps <= 0) return 0.0;

    struct View {
        std::shared_ptr<ad::SparseMatrix> weights;
        ad::Tensor offset; // background seen through the remaining transmittance, minus the target
    };
    std::vector<View> views;
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto& t = targets[v];
        if (t.width != cams[v].width || t.height != cams[v].height || t.channels != 3)
            throw InvalidArgument("refine_colors: target size does not match camera");
        const SplatWeights sw = splat_weights(gs, cams[v]);
        auto m = std::make_shared<ad::SparseMatrix>();
        m->rows = sw.transmittance.size();
        m->cols = gs.size();
        m->row_ptr = sw.row_ptr;
        m->col = sw.gaussian;
        m->val = sw.weight;
        std::vector<double> off(m->rows * 3);
        for (std::size_t p = 0; p < m->rows; ++p) {
            off[3 * p + 0] = sw.transmittance[p] * background.x - t.data[3 * p + 0];
            off[3 * p + 1] = sw.transmittance[p] * background.y - t.data[3 * p + 1];
            off[3 * p + 2] = sw.transmittance[p] * background.z - t.data[3 * p + 2];
        }
        const std::size_t rows = m->rows;
        views.push_back({std::move(m), ad::Tensor::constant({rows, 3}, std::move(off))});
    }

    std::vector<double> init(gs.size() * 3);
    for (std::size_t i = 0; i < gs.size(); ++i) {
        init[3 * i + 0] = gs[i].color.x;
        init[3 * i + 1] = gs[i].color.y;
        init[3 * i + 2] = gs[i].color.z;
    }
    ad::Tensor colors = ad::Tensor::parameter({gs.size(), 3}, std::move(init));

    auto loss_fn = [&] {
        ad::Tensor total = ad::Tensor::scalar(0.0);
        for (const auto& v : views) {
            const ad::Tensor residual = ad::add(ad::sparse_matmul(v.weights, colors), v.offset);
            total = ad::add(total, ad::mean(ad::mul(residual, residual)));
        }
        return ad::scale(total, 1.0 / static_cast<double>(views.size()));
    };

    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m1(colors.numel(), 0.0), m2(colors.numel(), 0.0);
    for (int step = 1; step <= steps; ++step) {
        colors.zero_grad();
        ad::backward(loss_fn());
        auto val = colors.mutable_data();
        const auto g = colors.grad();
        const double c1 = 1.0 - std::pow(beta1, step), c2 = 1.0 - std::pow(beta2, step);
        for (std::size_t i = 0; i < val.size(); ++i) {
            m1[i] = beta1 * m1[i] + (1 - beta1) * g[i];
            m2[i] = beta2 * m2[i] + (1 - beta2) * g[i] * g[i];
            val[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
            val[i] = std::clamp(val[i], 0.0, 1.0);
        }
    }
    const double final_loss = loss_fn().item();
    const auto val = colors.data();
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i].color = {val[3 * i], val[3 * i + 1], val[3 * i + 2]};
    return final_loss;
}

// ---------------------------------------------------------------------------
// Files

void write_ppm(const std::filesystem::path& path, const Image& rgb) {
    if (rgb.channels != 3) throw InvalidArgument("write_ppm: expected a 3-channel image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out << "P6\n" << rgb.width << ' ' << rgb.height << "\n255\n";
    for (double v : rgb.data) {
        const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        out.put(static_cast<char>(b));
    }
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + ": unsupported PPM header", 1);
    in.get();
    Image img(w, h, 3);
    for (auto& v : img.data) {
        const int c = in.get();
        if (c == EOF) throw FormatError(path.string() + ": truncated PPM data", 0, static_cast<std::size_t>(in.tellg()));
        v = c / 255.0;
    }
    return img;
}

void write_depth_pgm(const std::filesystem::path& path, const std::filesystem::path& sidecar, const Image& depth,
                     const Image& alpha) {
    if (depth.channels != 1 || alpha.channels != 1 || depth.width != alpha.width || depth.height != alpha.height)
        throw InvalidArgument("write_depth_pgm: depth and alpha must be matching 1-channel images");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        if (alpha.data[i] > 1e-4) {
            lo = std::min(lo, depth.data[i]);
            hi = std::max(hi, depth.data[i]);
        }
    }
    if (!(lo <= hi)) lo = hi = 0.0;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out << "P5\n" << depth.width << ' ' << depth.height << "\n65535\n";
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        std::uint16_t q = 0;
        if (alpha.data[i] > 1e-4) {
            const double t = hi > lo ? (depth.data[i] - lo) / (hi - lo) : 0.0;
            q = static_cast<std::uint16_t>(1 + std::lround(std::clamp(t, 0.0, 1.0) * 65534.0));
        }
        out.put(static_cast<char>(q >> 8));
        out.put(static_cast<char>(q & 0xff));
    }

    std::ofstream side(sidecar);
    if (!side) throw InvalidInput("cannot write " + sidecar.string());
    side.precision(17);
    side << "min " << lo << "\nmax " << hi << "\n"
         << "# depth = min + (q - 1) / 65534 * (max - min); q = 0 marks pixels with alpha <= 1e-4\n";
}

void write_gaussians(const std::filesystem::path& path, std::span<const Gaussian3D> gs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path.string());
    detail::write_le<std::uint64_t>(out, gs.size());
    for (const auto& g : gs) {
        const double fields[14] = {g.mean.x,       g.mean.y,       g.mean.z,       g.scale.x, g.scale.y,
                                   g.scale.z,      g.rotation.w,   g.rotation.x,   g.rotation.y,
                                   g.rotation.z,   g.opacity,      g.color.x,      g.color.y, g.color.z};
        for (double f : fields) detail::write_le(out, static_cast<float>(f));
    }
}

GaussianSet read_gaussians(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path.string());
    std::uint64_t count = 0;
    if (!detail::read_le(in, count)) throw InvalidInput(path.string() + ": missing count header");
    GaussianSet gs;
    for (std::uint64_t i = 0; i < count; ++i) {
        float f[14];
        for (float& v : f)
            if (!detail::read_le(in, v))
                throw FormatError(path.string() + ": truncated at Gaussian " + std::to_string(i), 0, 8 + 56 * i);
        Gaussian3D g;
        g.mean = {f[0], f[1], f[2]};
        g.scale = {f[3], f[4], f[5]};
        g.rotation = {f[6], f[7], f[8], f[9]};
        g.opacity = f[10];
        g.color = {f[11], f[12], f[13]};
        gs.push_back(g);
    }
    return gs;
}

} // namespace gspt
