// Criteria 1-5: formula, gradient, renderer and geometry oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "gspt/autodiff.hpp"
#include "gspt/geometry.hpp"
#include "gspt/losses.hpp"
#include "gspt/rng.hpp"
#include "gspt/splat_renderer.hpp"
#include "gspt/trainer_eval.hpp"
#include "harness.hpp"
#include "oracles.hpp"

namespace acceptance {

namespace {

using gspt::Matrix;
using gspt::Rng;
using gspt::ad::Tensor;

Matrix random_matrix(Rng& rng, std::size_t n, std::size_t d) {
    Matrix m(n, std::vector<double>(d));
    for (auto& row : m)
        for (auto& v : row) v = rng.normal();
    return m;
}

gspt::PointCloud random_cloud(Rng& rng, std::size_t n) {
    gspt::PointCloud pc;
    for (std::size_t i = 0; i < n; ++i) pc.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    return pc;
}

gspt::Quat random_unit_quat(Rng& rng) {
    gspt::Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const double n = q.norm();
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

gspt::GaussianSet random_scene(Rng& rng, std::size_t n) {
    gspt::GaussianSet gs;
    for (std::size_t i = 0; i < n; ++i) {
        gspt::Gaussian3D g;
        g.mean = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
        g.scale = {rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3)};
        g.rotation = random_unit_quat(rng);
        g.opacity = rng.uniform(0.05, 1.0);
        g.color = {rng.uniform(), rng.uniform(), rng.uniform()};
        gs.push_back(g);
    }
    return gs;
}

double max_abs_diff(const gspt::Image& a, const gspt::Image& b) {
    if (a.data.size() != b.data.size()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

Tensor random_param(Rng& rng, gspt::ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(gspt::ad::numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(t.numel());
    for (auto& x : w) x = rng.uniform(-1, 1);
    return gspt::ad::sum(gspt::ad::mul(t, Tensor::constant(t.shape(), w)));
}

// ---------------------------------------------------------------------------

void loss_oracles(Report& r, const std::filesystem::path&) {
    Rng rng(2024);
    double worst_intra = 0.0, worst_cross = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.uniform_index(8), d = 1 + rng.uniform_index(16);
        const double tau = rng.uniform(0.05, 1.0);
        const auto z1 = random_matrix(rng, n, d), z2 = random_matrix(rng, n, d);
        worst_intra = std::max(worst_intra,
                               std::abs(gspt::intra_modal_loss(z1, z2, tau) - oracle::intra_modal_double_loop(z1, z2, tau)));
        worst_cross = std::max(worst_cross,
                               std::abs(gspt::cross_modal_loss(z1, z2, tau) - oracle::cross_modal_double_loop(z1, z2, tau)));
    }
    r.check(worst_intra < 1e-10, fmt("intra-modal vs double loop, 100 batches: max |diff| %.2e", worst_intra));
    r.check(worst_cross < 1e-10, fmt("cross-modal vs double loop, 100 batches: max |diff| %.2e", worst_cross));

    const Matrix basis{{1, 0, 0}, {0, 1, 0}};
    const double intra = gspt::intra_modal_loss(basis, basis, 1.0);
    const double cross = gspt::cross_modal_loss(basis, basis, 1.0);
    r.check(std::abs(intra - 0.551444) < 1e-6, fmt("orthogonal N=2 intra-modal, tau=1: %.6f", intra));
    r.check(std::abs(cross - 0.313262) < 1e-6, fmt("orthogonal N=2 cross-modal, tau=1: %.6f", cross));
}

void trivial_zeros(Report& r, const std::filesystem::path&) {
    Rng rng(7);
    bool zero = true;
    for (int t = 0; t < 10; ++t) {
        const auto a = random_matrix(rng, 1, 1 + rng.uniform_index(16)), b = random_matrix(rng, 1, a.front().size());
        zero = zero && gspt::intra_modal_loss(a, b, 0.1) == 0.0 && gspt::cross_modal_loss(a, b, 0.1) == 0.0;
    }
    r.check(zero, "N=1 intra-modal and cross-modal losses are exactly 0");
    const auto p = random_cloud(rng, 64);
    r.check(gspt::chamfer_l2(p, p) == 0.0, "chamfer_l2(P, P) = 0");
    const double total = gspt::total_loss(1, 1, 1, 1, gspt::LossConfig{});
    r.check(std::abs(total - 1.003) < 1e-12, fmt("total loss with default coefficients on unit components: %.15f", total));
}

void gradient_suite(Report& r, const std::filesystem::path&) {
    namespace ad = gspt::ad;
    constexpr double tol = 1e-4;
    Rng rng(42);
    Tensor a = random_param(rng, {4, 3});
    Tensor b = random_param(rng, {4, 3});
    Tensor row = random_param(rng, {3});
    Tensor sq = random_param(rng, {3, 5});
    Tensor c = random_param(rng, {5, 3});
    Tensor pos = random_param(rng, {4, 3}, 0.5, 2.0);
    const std::vector<std::size_t> idx{3, 0, 0, 2};
    const std::vector<std::size_t> targets{0, 2, 1, 1};
    std::vector<std::uint8_t> excl(12, 0);
    excl[1] = excl[11] = 1;
    auto sm = std::make_shared<ad::SparseMatrix>();
    sm->rows = 2;
    sm->cols = 4;
    sm->row_ptr = {0, 2, 3};
    sm->col = {0, 3, 1};
    sm->val = {0.5, -1.0, 2.0};

    struct Case {
        const char* name;
        std::vector<Tensor> params;
        std::function<Tensor()> f;
    };
    const std::vector<Case> cases{
        {"add", {a, b}, [&] { return weighted_sum(ad::add(a, b), 1); }},
        {"add (row broadcast)", {a, row}, [&] { return weighted_sum(ad::add(a, row), 2); }},
        {"sub", {a, b}, [&] { return weighted_sum(ad::sub(a, b), 3); }},
        {"mul", {a, row}, [&] { return weighted_sum(ad::mul(a, row), 4); }},
        {"scale", {a}, [&] { return weighted_sum(ad::scale(a, -2.5), 5); }},
        {"relu", {a}, [&] { return weighted_sum(ad::relu(a), 6); }},
        {"exp", {a}, [&] { return weighted_sum(ad::exp(a), 7); }},
        {"log", {pos}, [&] { return weighted_sum(ad::log(pos), 8); }},
        {"hinge", {a}, [&] { return weighted_sum(ad::hinge(a, 0.3), 9); }},
        {"matmul", {a, sq}, [&] { return weighted_sum(ad::matmul(a, sq), 10); }},
        {"transpose", {a}, [&] { return weighted_sum(ad::transpose(a), 11); }},
        {"reshape", {a}, [&] { return weighted_sum(ad::reshape(a, {2, 6}), 12); }},
        {"sum", {a}, [&] { return ad::sum(ad::mul(a, a)); }},
        {"mean", {a}, [&] { return ad::mean(ad::mul(a, a)); }},
        {"sum over axis", {a}, [&] { return weighted_sum(ad::sum(a, 0), 13); }},
        {"mean over axis", {a}, [&] { return weighted_sum(ad::mean(a, 1), 14); }},
        {"max over axis", {a}, [&] { return weighted_sum(ad::max(a, 0), 15); }},
        {"concat", {a, b}, [&] { return weighted_sum(ad::concat({a, b}, 1), 16); }},
        {"gather", {a}, [&] { return weighted_sum(ad::gather(a, idx), 17); }},
        {"broadcast_rows", {row}, [&] { return weighted_sum(ad::broadcast_rows(row, 5), 18); }},
        {"l2_normalize", {a}, [&] { return weighted_sum(ad::l2_normalize(a), 19); }},
        {"softmax_cross_entropy", {a}, [&] { return ad::softmax_cross_entropy(a, targets); }},
        {"softmax_cross_entropy (masked)", {a}, [&] { return ad::softmax_cross_entropy(a, targets, excl); }},
        {"pairwise_sq_dist", {a, c}, [&] { return weighted_sum(ad::pairwise_sq_dist(a, c), 20); }},
        {"sparse_matmul", {a}, [&] { return weighted_sum(ad::sparse_matmul(sm, a), 21); }},
        {"intra_modal_loss", {a, b}, [&] { return gspt::intra_modal_loss(a, b, 0.3); }},
        {"cross_modal_loss", {a, b}, [&] { return gspt::cross_modal_loss(gspt::mean_embedding(a, b), b, 0.3); }},
    };
    double worst = 0.0;
    std::string worst_name;
    bool all_checked = true;
    for (const auto& cs : cases) {
        auto params = cs.params;
        const auto res = ad::gradcheck(cs.f, params);
        all_checked = all_checked && res.checked > 0;
        if (res.max_rel_error >= worst) {
            worst = res.max_rel_error;
            worst_name = cs.name;
        }
    }
    r.check(worst < tol && all_checked, std::to_string(cases.size()) + " primitives: max relative error " +
                                            fmt("%.2e", worst) + " (" + worst_name + ")");

    gspt::TrainConfig cfg;
    cfg.pipeline.n_points = 64;
    cfg.pipeline.render_size = 16;
    cfg.pipeline.seed = 3;
    cfg.encoder.d = 16;
    cfg.encoder.hidden = 16;
    cfg.encoder.patch = 8;
    cfg.encoder.groups = 4;
    cfg.encoder.group_size = 16;
    const auto res = gspt::gradcheck_objective(cfg);
    r.check(res.max_rel_error < tol && res.checked > 1000,
            "full objective, 2-triplet batch, d=16: max relative error " + fmt("%.2e", res.max_rel_error) + " over " +
                std::to_string(res.checked) + " coordinates, " + std::to_string(res.masked) + " masked at kinks");
}

void renderer_oracles(Report& r, const std::filesystem::path&) {
    using namespace gspt;
    const Camera cam;
    Gaussian3D g;
    g.scale = {0.1, 0.1, 0.1};
    const auto single = render(GaussianSet{g}, cam);
    const double distance = norm(cam.position - g.mean);
    const double depth = single.depth.at(cam.width / 2, cam.height / 2);
    r.check(std::abs(depth - distance) / distance < 1e-3,
            fmt("on-axis Gaussian center depth %.6f", depth) + fmt(" vs camera distance %.6f", distance));

    Rng rng(21);
    const auto scene = random_scene(rng, 25);
    const Camera orbit = orbit_camera({0, 0, 0}, 3.0, 30.0, 20.0, 64.0, 64, 64);
    const auto base = render(scene, orbit);
    double worst_rot = 0.0;
    for (int t = 0; t < 3; ++t) {
        const Quat q = random_unit_quat(rng);
        const Mat3 rot = q.to_matrix();
        GaussianSet rotated = scene;
        for (auto& s : rotated) {
            s.mean = rot * s.mean;
            s.rotation = q * s.rotation;
        }
        Camera rc = orbit;
        rc.position = rot * orbit.position;
        rc.look_at = rot * orbit.look_at;
        rc.up = rot * orbit.up;
        const auto out = render(rotated, rc);
        worst_rot = std::max({worst_rot, max_abs_diff(base.rgb, out.rgb), max_abs_diff(base.depth, out.depth)});
    }
    r.check(worst_rot < 1e-5, fmt("joint rotation of scene and camera: max pixel change %.2e", worst_rot));

    double max_alpha = 0.0;
    for (int s = 0; s < 50; ++s) {
        const auto gs = random_scene(rng, 40);
        const Camera c = orbit_camera({0, 0, 0}, 3.0, rng.uniform(0, 360), rng.uniform(-60, 60), 64.0, 64, 64);
        for (double a : render(gs, c).alpha.data) max_alpha = std::max(max_alpha, a);
    }
    r.check(max_alpha <= 1.0 + 1e-6, fmt("50 random scenes at 64x64: max accumulated alpha %.9f", max_alpha));

    Gaussian3D red, blue;
    red.scale = blue.scale = {0.2, 0.2, 0.2};
    red.opacity = blue.opacity = 0.95;
    red.color = {1, 0, 0};
    blue.color = {0, 0, 1};
    red.mean = {0, 0, -0.5};
    blue.mean = {0, 0, 0.5};
    GaussianSet pair{red, blue};
    const auto front_red = render(pair, cam);
    std::swap(pair[0].mean, pair[1].mean);
    const auto front_blue = render(pair, cam);
    const int cx = cam.width / 2, cy = cam.height / 2;
    const bool flip = front_red.rgb.at(cx, cy, 0) > front_red.rgb.at(cx, cy, 2) &&
                      front_blue.rgb.at(cx, cy, 2) > front_blue.rgb.at(cx, cy, 0);
    r.check(flip, "depth ordering: the nearer Gaussian dominates and swapping depths flips the color");
}

void geometry_oracles(Report& r, const std::filesystem::path&) {
    using namespace gspt;
    Rng rng(99);
    std::size_t fps_mismatch = 0, knn_mismatch = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + rng.uniform_index(255);
        const auto pc = random_cloud(rng, n);
        const std::size_t k = 1 + rng.uniform_index(std::min<std::size_t>(n, 32));
        const std::size_t start = rng.uniform_index(n);
        fps_mismatch += fps(pc, k, start) != oracle::fps_exhaustive(pc, k, start);
        const auto queries = random_cloud(rng, 1 + rng.uniform_index(16));
        knn_mismatch += knn(pc, queries, k) != oracle::knn_brute_force(pc, queries, k);
    }
    r.check(fps_mismatch == 0, "fps equals the exhaustive oracle on 200 instances, n <= 256 (" +
                                   std::to_string(fps_mismatch) + " mismatches)");
    r.check(knn_mismatch == 0, "knn equals the brute-force oracle on 200 instances, n <= 256 (" +
                                   std::to_string(knn_mismatch) + " mismatches)");

    double worst_sym = 0.0, worst_rigid = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto p = random_cloud(rng, 1 + rng.uniform_index(200));
        const auto q = random_cloud(rng, 1 + rng.uniform_index(200));
        const double d = chamfer_l2(p, q);
        worst_sym = std::max(worst_sym, std::abs(d - chamfer_l2(q, p)));
        const Mat3 rot = random_unit_quat(rng).to_matrix();
        const Vec3 shift{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
        worst_rigid = std::max(worst_rigid, std::abs(d - chamfer_l2(transformed(p, rot, shift), transformed(q, rot, shift))));
    }
    r.check(worst_sym < 1e-9, fmt("chamfer symmetry: max |d(P,Q) - d(Q,P)| %.2e", worst_sym));
    r.check(worst_rigid < 1e-9, fmt("chamfer under a shared rigid motion: max change %.2e", worst_rigid));
}

} // namespace

std::vector<Criterion> oracle_criteria() {
    return {
        {1, "loss formulas match double-loop oracles and closed forms", 5.0, loss_oracles},
        {2, "trivial zero cases and the unit total", 1.0, trivial_zeros},
        {3, "gradients of every primitive and the full objective", 60.0, gradient_suite},
        {4, "renderer depth, rotation, alpha and ordering oracles", 30.0, renderer_oracles},
        {5, "fps, knn and chamfer oracles", 10.0, geometry_oracles},
    };
}

} // namespace acceptance
