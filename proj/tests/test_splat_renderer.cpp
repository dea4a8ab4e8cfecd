#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gspt/errors.hpp"
#include "gspt/rng.hpp"
#include "gspt/splat_renderer.hpp"

using namespace gspt;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("gspt_render_" + name);
}

Quat random_rotation(Rng& rng) {
    Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const double n = q.norm();
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

GaussianSet random_scene(Rng& rng, std::size_t n) {
    GaussianSet gs;
    for (std::size_t i = 0; i < n; ++i) {
        Gaussian3D g;
        g.mean = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
        g.scale = {rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3)};
        g.rotation = random_rotation(rng);
        g.opacity = rng.uniform(0.05, 1.0);
        g.color = {rng.uniform(), rng.uniform(), rng.uniform()};
        gs.push_back(g);
    }
    return gs;
}

Mat3 axis_rotation(Vec3 axis, double angle) {
    axis = normalized(axis);
    const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
    Mat3 r;
    r.m[0][0] = c + axis.x * axis.x * t;
    r.m[0][1] = axis.x * axis.y * t - axis.z * s;
    r.m[0][2] = axis.x * axis.z * t + axis.y * s;
    r.m[1][0] = axis.y * axis.x * t + axis.z * s;
    r.m[1][1] = c + axis.y * axis.y * t;
    r.m[1][2] = axis.y * axis.z * t - axis.x * s;
    r.m[2][0] = axis.z * axis.x * t - axis.y * s;
    r.m[2][1] = axis.z * axis.y * t + axis.x * s;
    r.m[2][2] = c + axis.z * axis.z * t;
    return r;
}

double max_abs_diff(const Image& a, const Image& b) {
    REQUIRE(a.data.size() == b.data.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// Pinhole projection of a world point, used for a finite-difference Jacobian.
std::pair<double, double> pinhole(const Camera& cam, const Vec3& p) {
    const Vec3 c = cam.to_camera(p);
    return {cam.focal * c.x / c.z + 0.5 * cam.width, cam.focal * c.y / c.z + 0.5 * cam.height};
}

} // namespace

TEST_CASE("quaternion matrix round trip") {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const Quat q = random_rotation(rng);
        const Mat3 r = q.to_matrix();
        const Mat3 rrt = r * r.transposed();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(rrt.m[i][j] == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
        const Mat3 back = Quat::from_matrix(r).to_matrix();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(back.m[i][j] == doctest::Approx(r.m[i][j]).epsilon(1e-12));
    }
}

TEST_CASE("camera basis") {
    const Camera cam; // at (0, 0, -3) looking at the origin
    const Vec3 c = cam.to_camera({0, 0, 0});
    CHECK(c.x == doctest::Approx(0.0));
    CHECK(c.y == doctest::Approx(0.0));
    CHECK(c.z == doctest::Approx(3.0));
    // world up maps to image up, which is -y in camera space
    CHECK(cam.to_camera({0, 1, 0}).y < 0.0);

    Camera bad = cam;
    bad.up = {0, 0, 1};
    CHECK_THROWS_AS(validate(bad), InvalidArgument);
    bad = cam;
    bad.look_at = bad.position;
    CHECK_THROWS_AS(validate(bad), InvalidArgument);
    bad = cam;
    bad.focal = 0;
    CHECK_THROWS_AS(validate(bad), InvalidArgument);
}

TEST_CASE("projection of an on-axis isotropic Gaussian") {
    const Camera cam;
    Gaussian3D g;
    g.scale = {0.1, 0.1, 0.1};
    const auto p = project_gaussian(g, cam);
    REQUIRE(p);
    const double expected = std::pow(cam.focal * 0.1 / 3.0, 2) + 0.3;
    CHECK(p->u == doctest::Approx(32.0));
    CHECK(p->v == doctest::Approx(32.0));
    CHECK(p->depth == doctest::Approx(3.0));
    CHECK(p->cov[0][0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(p->cov[1][1] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(p->cov[0][1]) < 1e-12);
}

TEST_CASE("projection matches a finite-difference Jacobian off axis") {
    Rng rng(11);
    Camera cam;
    cam.position = {1.0, 0.7, -2.5};
    cam.look_at = {0.1, -0.2, 0.3};
    for (int t = 0; t < 20; ++t) {
        Gaussian3D g;
        g.mean = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
        g.scale = {rng.uniform(0.01, 0.2), rng.uniform(0.01, 0.2), rng.uniform(0.01, 0.2)};
        g.rotation = random_rotation(rng);
        const auto p = project_gaussian(g, cam);
        REQUIRE(p);

        const double h = 1e-6;
        double jac[2][3];
        for (int k = 0; k < 3; ++k) {
            Vec3 a = g.mean, b = g.mean;
            a[k] += h;
            b[k] -= h;
            const auto pa = pinhole(cam, a), pb = pinhole(cam, b);
            jac[0][k] = (pa.first - pb.first) / (2 * h);
            jac[1][k] = (pa.second - pb.second) / (2 * h);
        }
        const Mat3 sigma = g.covariance();
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) {
                double s = 0.0;
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) s += jac[r][i] * sigma.m[i][j] * jac[c][j];
                if (r == c) s += 0.3;
                CHECK(p->cov[r][c] == doctest::Approx(s).epsilon(1e-5));
            }
        const auto [u, v] = pinhole(cam, g.mean);
        CHECK(p->u == doctest::Approx(u));
        CHECK(p->v == doctest::Approx(v));
    }
}

TEST_CASE("Gaussians behind the camera are culled") {
    const Camera cam;
    Gaussian3D g;
    g.mean = {0, 0, -5};
    CHECK_FALSE(project_gaussian(g, cam).has_value());
    const GaussianSet gs{g};
    const auto out = render(gs, cam);
    for (double a : out.alpha.data) CHECK(a == 0.0);
    for (double d : out.depth.data) CHECK(d == 0.0);
    for (double c : out.rgb.data) CHECK(c == 1.0);
}

TEST_CASE("single on-axis Gaussian renders its depth") {
    const Camera cam;
    Gaussian3D g;
    g.scale = {0.1, 0.1, 0.1};
    g.color = {0.2, 0.4, 0.6};
    const GaussianSet gs{g};
    const auto out = render(gs, cam);
    CHECK(out.depth.at(32, 32) == doctest::Approx(3.0).epsilon(1e-3));
    CHECK(out.alpha.at(32, 32) > 0.7);
    // blended with the white background
    const double a = out.alpha.at(32, 32);
    CHECK(out.rgb.at(32, 32, 0) == doctest::Approx(a * 0.2 + (1 - a)));
    CHECK(out.depth.at(0, 0) == 0.0);
    CHECK(out.rgb.at(0, 0, 1) == 1.0);
}

TEST_CASE("front Gaussian dominates and order flips with depth") {
    const Camera cam;
    Gaussian3D red, blue;
    red.scale = blue.scale = {0.2, 0.2, 0.2};
    red.opacity = blue.opacity = 0.95;
    red.color = {1, 0, 0};
    blue.color = {0, 0, 1};
    red.mean = {0, 0, -0.5};
    blue.mean = {0, 0, 0.5};
    GaussianSet gs{red, blue};
    auto out = render(gs, cam);
    CHECK(out.rgb.at(32, 32, 0) > out.rgb.at(32, 32, 2));
    CHECK(out.depth.at(32, 32) < 3.0);

    std::swap(gs[0].mean, gs[1].mean);
    out = render(gs, cam);
    CHECK(out.rgb.at(32, 32, 2) > out.rgb.at(32, 32, 0));
}

TEST_CASE("alpha stays bounded over random scenes") {
    Rng rng(5);
    for (int scene = 0; scene < 20; ++scene) {
        const auto gs = random_scene(rng, 40);
        const auto cam = orbit_camera({0, 0, 0}, 3.0, rng.uniform(0, 360), rng.uniform(-60, 60), 40.0, 32, 32);
        const auto out = render(gs, cam);
        for (double a : out.alpha.data) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0 + 1e-6);
        }
        for (double c : out.rgb.data) {
            CHECK(c >= -1e-12);
            CHECK(c <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("render is independent of Gaussian order") {
    Rng rng(9);
    auto gs = random_scene(rng, 30);
    gs.push_back(gs[3]); // exact duplicate
    gs.push_back(gs[4]);
    gs.back().color = {0.1, 0.9, 0.1}; // same depth, different color
    const Camera cam;
    const auto a = render(gs, cam);
    rng.shuffle(gs);
    const auto b = render(gs, cam);
    CHECK(a.rgb == b.rgb);
    CHECK(a.depth == b.depth);
    CHECK(a.alpha == b.alpha);
}

TEST_CASE("joint rotation of scene and camera leaves the image unchanged") {
    Rng rng(21);
    const auto gs = random_scene(rng, 25);
    const Camera cam = orbit_camera({0, 0, 0}, 3.0, 30.0, 20.0, 48.0, 48, 48);
    const auto base = render(gs, cam);
    for (int t = 0; t < 3; ++t) {
        const Mat3 r = axis_rotation({rng.normal(), rng.normal(), rng.normal()}, rng.uniform(0, 2 * std::numbers::pi));
        const Quat qr = Quat::from_matrix(r);
        GaussianSet rotated = gs;
        for (auto& g : rotated) {
            g.mean = r * g.mean;
            g.rotation = qr * g.rotation;
        }
        Camera rc = cam;
        rc.position = r * cam.position;
        rc.look_at = r * cam.look_at;
        rc.up = r * cam.up;
        const auto out = render(rotated, rc);
        CHECK(max_abs_diff(base.rgb, out.rgb) < 1e-5);
        CHECK(max_abs_diff(base.depth, out.depth) < 1e-5);
    }
}

TEST_CASE("splat weights reproduce the render") {
    Rng rng(2);
    const auto gs = random_scene(rng, 20);
    const Camera cam;
    const auto out = render(gs, cam);
    const auto sw = splat_weights(gs, cam);
    REQUIRE(sw.row_ptr.size() == static_cast<std::size_t>(cam.width * cam.height + 1));
    for (std::size_t p = 0; p + 1 < sw.row_ptr.size(); ++p) {
        Vec3 c = sw.transmittance[p] * Vec3{1, 1, 1};
        for (std::size_t e = sw.row_ptr[p]; e < sw.row_ptr[p + 1]; ++e) c = c + sw.weight[e] * gs[sw.gaussian[e]].color;
        CHECK(c.x == doctest::Approx(out.rgb.data[3 * p]).epsilon(1e-12));
        CHECK(c.z == doctest::Approx(out.rgb.data[3 * p + 2]).epsilon(1e-12));
    }
}

TEST_CASE("gaussians_from_points") {
    PointCloud pc;
    for (int i = 0; i < 5; ++i) pc.points.push_back({0.1 * i, 0.25 * i, 0.0});
    SUBCASE("scale from neighbour distances") {
        const auto gs = gaussians_from_points(pc, 1, 0.5);
        const double spacing = std::sqrt(0.1 * 0.1 + 0.25 * 0.25);
        REQUIRE(gs.size() == 5);
        for (const auto& g : gs) {
            CHECK(g.scale.x == doctest::Approx(0.5 * spacing));
            CHECK(g.scale.y == g.scale.x);
            CHECK(g.opacity == 0.8);
            CHECK(g.rotation == Quat{});
            CHECK_NOTHROW(validate(g));
        }
        // end points have neighbours at spacing and 2 * spacing
        const auto gs2 = gaussians_from_points(pc, 2, 1.0);
        CHECK(gs2[0].scale.x == doctest::Approx(1.5 * spacing));
        CHECK(gs2[2].scale.x == doctest::Approx(spacing));
    }
    SUBCASE("height colormap runs red to blue") {
        const auto gs = gaussians_from_points(pc, 1, 0.5);
        CHECK(gs.front().color == Vec3{1, 0, 0});
        CHECK(gs.back().color == Vec3{0, 0, 1});
    }
    SUBCASE("invalid arguments") {
        CHECK_THROWS_AS(gaussians_from_points(pc, 0, 0.5), InvalidArgument);
        CHECK_THROWS_AS(gaussians_from_points(pc, 5, 0.5), InvalidArgument);
        CHECK_THROWS_AS(gaussians_from_points(PointCloud({{0, 0, 0}}), 1, 0.5), InvalidArgument);
    }
}

TEST_CASE("sample_point_cloud") {
    Gaussian3D g;
    g.mean = {0.3, -0.2, 0.1};
    g.scale = {0.3, 0.1, 0.05};
    Rng rng(4);
    g.rotation = random_rotation(rng);
    SUBCASE("without jitter the means are returned") {
        const GaussianSet gs{g, g};
        const auto pc = sample_point_cloud(gs, false, 1);
        CHECK(pc == PointCloud({g.mean, g.mean}));
    }
    SUBCASE("jitter matches the Gaussian covariance") {
        const GaussianSet gs(40000, g);
        const auto pc = sample_point_cloud(gs, true, 17);
        Vec3 mean{};
        for (const auto& p : pc.points) mean = mean + p;
        mean = (1.0 / pc.size()) * mean;
        double emp[3][3] = {};
        for (const auto& p : pc.points)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) emp[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]);
        const Mat3 sigma = g.covariance();
        double diff = 0.0, ref = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const double e = emp[i][j] / pc.size();
                diff += (e - sigma.m[i][j]) * (e - sigma.m[i][j]);
                ref += sigma.m[i][j] * sigma.m[i][j];
            }
        CHECK(std::sqrt(diff / ref) < 0.1);
        CHECK(norm(mean - g.mean) < 0.01);
        // same seed, same draw
        CHECK(sample_point_cloud(gs, true, 17) == pc);
    }
    SUBCASE("empty set") { CHECK_THROWS_AS(sample_point_cloud(GaussianSet{}, true, 0), InvalidArgument); }
}

TEST_CASE("orbit cameras") {
    const Vec3 center{0.5, 0.0, -0.5};
    const auto cams = orbit_cameras(center, 2.0, 4, 20.0, 80.0, 64, 48);
    REQUIRE(cams.size() == 4);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const auto& c = cams[i];
        CHECK(norm(c.position - center) == doctest::Approx(2.0));
        CHECK(c.position.y - center.y == doctest::Approx(2.0 * std::sin(20.0 * std::numbers::pi / 180)));
        CHECK(c.look_at == center);
        CHECK(c.up == Vec3{0, 1, 0});
        CHECK(c.width == 64);
        CHECK(c.height == 48);
        const double az = std::atan2(c.position.z - center.z, c.position.x - center.x) * 180 / std::numbers::pi;
        const double expected = 90.0 * static_cast<double>(i);
        CHECK(std::remainder(az - expected, 360.0) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK_NOTHROW(validate(c));
    }
    CHECK_THROWS_AS(orbit_cameras(center, 0.0, 4, 20, 80, 64, 64), InvalidArgument);
}

TEST_CASE("refine_colors recovers colors from renders") {
    Rng rng(8);
    auto truth = random_scene(rng, 15);
    for (auto& g : truth) g.opacity = 0.9;
    const auto cams = orbit_cameras({0, 0, 0}, 3.0, 4, 20.0, 40.0, 32, 32);
    std::vector<Image> targets;
    for (const auto& c : cams) targets.push_back(render(truth, c).rgb);

    GaussianSet gs = truth;
    for (auto& g : gs) g.color = {0.5, 0.5, 0.5};
    std::vector<Image> before;
    double initial = 0.0;
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto img = render(gs, cams[v]).rgb;
        for (std::size_t i = 0; i < img.data.size(); ++i) initial += std::pow(img.data[i] - targets[v].data[i], 2);
    }
    initial /= static_cast<double>(cams.size() * targets[0].data.size());

    const double final_loss = refine_colors(gs, cams, targets, 150, 0.05);
    CHECK(final_loss < 0.1 * initial);
    for (std::size_t i = 0; i < gs.size(); ++i) {
        CHECK(gs[i].mean == truth[i].mean);
        CHECK(gs[i].scale == truth[i].scale);
    }
    CHECK(refine_colors(gs, cams, targets, 0) == 0.0);
}

TEST_CASE("image and Gaussian files") {
    Image rgb(3, 2, 3);
    for (std::size_t i = 0; i < rgb.data.size(); ++i) rgb.data[i] = static_cast<double>(i) / 17.0;
    SUBCASE("PPM round trip") {
        const auto path = temp_file("rt.ppm");
        write_ppm(path, rgb);
        const auto back = read_ppm(path);
        CHECK(back.width == 3);
        CHECK(back.height == 2);
        CHECK(max_abs_diff(back, rgb) <= 0.5 / 255 + 1e-12);
        std::filesystem::remove(path);
    }
    SUBCASE("depth PGM with sidecar") {
        Image depth(2, 2, 1), alpha(2, 2, 1);
        depth.data = {2.0, 3.0, 0.0, 2.5};
        alpha.data = {1.0, 0.5, 0.0, 0.9};
        const auto path = temp_file("d.pgm"), side = temp_file("d.txt");
        write_depth_pgm(path, side, depth, alpha);

        std::ifstream in(path, std::ios::binary);
        std::string magic;
        int w, h, maxval;
        in >> magic >> w >> h >> maxval;
        in.get();
        CHECK(magic == "P5");
        CHECK(maxval == 65535);
        std::vector<int> q;
        for (int i = 0; i < 4; ++i) {
            const int hi = in.get(), lo = in.get();
            q.push_back(hi * 256 + lo);
        }
        CHECK(q == std::vector<int>{1, 65535, 0, 32768});

        std::ifstream s(side);
        std::string key;
        double mn, mx;
        s >> key >> mn;
        CHECK(key == "min");
        s >> key >> mx;
        CHECK(key == "max");
        CHECK(mn == 2.0);
        CHECK(mx == 3.0);
        std::filesystem::remove(path);
        std::filesystem::remove(side);
    }
    SUBCASE("Gaussian set round trip") {
        Rng rng(1);
        const auto gs = random_scene(rng, 7);
        const auto path = temp_file("g.bin");
        write_gaussians(path, gs);
        CHECK(std::filesystem::file_size(path) == 8 + 7 * 14 * 4);
        const auto back = read_gaussians(path);
        REQUIRE(back.size() == gs.size());
        for (std::size_t i = 0; i < gs.size(); ++i) {
            CHECK(back[i].mean.x == doctest::Approx(gs[i].mean.x).epsilon(1e-6));
            CHECK(back[i].rotation.z == doctest::Approx(gs[i].rotation.z).epsilon(1e-6));
            CHECK(back[i].color.y == doctest::Approx(gs[i].color.y).epsilon(1e-6));
        }
        std::filesystem::resize_file(path, 8 + 14 * 4 + 3);
        CHECK_THROWS_AS(read_gaussians(path), FormatError);
        std::filesystem::remove(path);
    }
}

TEST_CASE("rotating an isotropic Gaussian leaves its projection unchanged") {
    Rng rng(12);
    Camera cam;
    cam.position = {0.4, 1.0, -2.0};
    Gaussian3D g;
    g.mean = {0.2, -0.1, 0.3};
    g.scale = {0.07, 0.07, 0.07};
    const auto base = project_gaussian(g, cam);
    REQUIRE(base);
    for (int t = 0; t < 10; ++t) {
        g.rotation = random_rotation(rng);
        const auto p = project_gaussian(g, cam);
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) CHECK(std::abs(p->cov[r][c] - base->cov[r][c]) < 1e-9);
    }
}

TEST_CASE("projected covariance eigenvalues respect the dilation floor") {
    Rng rng(13);
    const auto gs = random_scene(rng, 200);
    const auto cam = orbit_camera({0, 0, 0}, 3.0, 45.0, 30.0, 64.0, 64, 64);
    for (const auto& g : gs) {
        const auto p = project_gaussian(g, cam);
        REQUIRE(p);
        const double a = p->cov[0][0], b = p->cov[0][1], c = p->cov[1][1];
        const double mid = 0.5 * (a + c);
        const double lambda_min = mid - std::sqrt(mid * mid - (a * c - b * b));
        CHECK(lambda_min >= 0.3 - 1e-9);
        CHECK(p->cov[0][1] == p->cov[1][0]);
    }
}

TEST_CASE("empty scene and single opaque Gaussian") {
    const Camera cam;
    const auto empty = render(GaussianSet{}, cam, {0.2, 0.3, 0.4});
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            CHECK(empty.rgb.at(x, y, 0) == 0.2);
            CHECK(empty.rgb.at(x, y, 2) == 0.4);
            CHECK(empty.alpha.at(x, y) == 0.0);
        }

    Gaussian3D g;
    g.scale = {0.5, 0.5, 0.5};
    g.opacity = 0.99;
    g.color = {0.1, 0.6, 0.3};
    const GaussianSet gs{g};
    const auto out = render(gs, cam);
    for (int c = 0; c < 3; ++c) {
        const double expected = g.color[static_cast<std::size_t>(c)] * 0.99 + 1.0 * 0.01;
        CHECK(std::abs(out.rgb.at(32, 32, c) - expected) < 1e-2);
    }
    for (std::size_t i = 0; i < out.alpha.data.size(); ++i)
        if (out.alpha.data[i] > 0.5) CHECK(std::abs(out.depth.data[i] - 3.0) < 3e-3);
}

TEST_CASE("Gaussians fitted to a sphere sample have small scales") {
    Rng rng(14);
    PointCloud pc;
    for (int i = 0; i < 128; ++i) pc.points.push_back(normalized(Vec3{rng.normal(), rng.normal(), rng.normal()}));
    const auto gs = gaussians_from_points(pc, 4, 1.0);
    REQUIRE(gs.size() == pc.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
        CHECK(gs[i].mean == pc[i]);
        CHECK(gs[i].scale.x > 0.0);
        CHECK(gs[i].scale.x < 1.0);
    }
}

TEST_CASE("orbit camera forward vectors and single view") {
    const auto cams = orbit_cameras({0, 0, 0}, 2.2, 4, 0.0, 76.8, 64, 64);
    for (const auto& c : cams) CHECK(norm(normalized(c.look_at - c.position) - c.forward()) < 1e-9);
    CHECK(cams[1].position.z == doctest::Approx(2.2));
    CHECK(std::abs(cams[1].position.x) < 1e-12);
    const auto one = orbit_cameras({0, 0, 0}, 2.2, 1, 20.0, 76.8, 64, 64);
    REQUIRE(one.size() == 1);
    CHECK(one[0].position.z == doctest::Approx(0.0));
    CHECK(one[0].position.x > 0.0);
}
