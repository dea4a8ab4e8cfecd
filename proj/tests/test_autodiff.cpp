#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <functional>
#include <vector>

#include "gspt/autodiff.hpp"
#include "gspt/checkpoint.hpp"
#include "gspt/errors.hpp"
#include "gspt/rng.hpp"

using namespace gspt;
using ad::Tensor;

namespace {

Tensor random_param(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::parameter(std::move(shape), std::move(v));
}

// Reduces any tensor to a scalar through fixed random weights so every output
// coordinate contributes to the checked gradient.
Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(t.numel());
    for (auto& x : w) x = rng.uniform(-1, 1);
    return ad::sum(ad::mul(t, Tensor::constant(t.shape(), w)));
}

double check(std::vector<Tensor> params, const std::function<Tensor()>& f) {
    const auto res = ad::gradcheck(f, params);
    CHECK(res.checked > 0);
    return res.max_rel_error;
}

} // namespace

TEST_CASE("forward values match scalar loops") {
    Rng rng(1);
    const Tensor a = random_param(rng, {3, 4});
    const Tensor b = random_param(rng, {4, 2});
    const Tensor c = ad::matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
            CHECK(std::abs(c[i * 2 + j] - s) < 1e-12);
        }

    SUBCASE("identity padded matmul") {
        const Tensor m = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
        const Tensor id = Tensor::constant({3, 2}, {1, 0, 0, 1, 0, 0});
        const Tensor p = ad::matmul(m, id);
        CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, 2, 4, 5});
    }
    SUBCASE("relu") {
        const Tensor r = ad::relu(Tensor::constant({2}, {-1, 2}));
        CHECK(r[0] == 0.0);
        CHECK(r[1] == 2.0);
    }
    SUBCASE("l2_normalize gives unit rows") {
        const Tensor x = random_param(rng, {5, 7}, -3, 3);
        const Tensor y = ad::l2_normalize(x);
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 7; ++j) s += y[i * 7 + j] * y[i * 7 + j];
            CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
        }
    }
    SUBCASE("reductions over a middle axis") {
        const Tensor x = Tensor::constant({2, 3, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
        const Tensor s = ad::sum(x, 1);
        CHECK(s.shape() == ad::Shape{2, 2});
        CHECK(std::vector<double>(s.data().begin(), s.data().end()) == std::vector<double>{9, 12, 27, 30});
        const Tensor m = ad::max(x, 1);
        CHECK(std::vector<double>(m.data().begin(), m.data().end()) == std::vector<double>{5, 6, 11, 12});
    }
    SUBCASE("concat along both axes") {
        const Tensor a2 = Tensor::constant({2, 1}, {1, 2});
        const Tensor b2 = Tensor::constant({2, 2}, {3, 4, 5, 6});
        const Tensor h = ad::concat({a2, b2}, 1);
        CHECK(std::vector<double>(h.data().begin(), h.data().end()) == std::vector<double>{1, 3, 4, 2, 5, 6});
        const Tensor v = ad::concat({b2, Tensor::constant({1, 2}, {7, 8})}, 0);
        CHECK(v.shape() == ad::Shape{3, 2});
        CHECK(v[4] == 7.0);
    }
    SUBCASE("softmax cross entropy against direct formula") {
        const Tensor logits = random_param(rng, {3, 4}, -2, 2);
        const std::vector<std::size_t> t{1, 0, 3};
        double expect = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            double z = 0;
            for (std::size_t j = 0; j < 4; ++j) z += std::exp(logits[i * 4 + j]);
            expect += -std::log(std::exp(logits[i * 4 + t[i]]) / z);
        }
        CHECK(std::abs(ad::softmax_cross_entropy(logits, t).item() - expect / 3) < 1e-12);
    }
}

TEST_CASE("shape errors name both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 2});
    try {
        ad::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[2, 2]") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::add(a, b), ShapeError);
    CHECK_NOTHROW(ad::add(a, Tensor::zeros({3})));
    CHECK_NOTHROW(ad::add(a, Tensor::zeros({1, 3})));
}

TEST_CASE("backward basics") {
    SUBCASE("sum of squares") {
        Tensor x = Tensor::parameter({3}, {1, 2, 3});
        ad::backward(ad::sum(ad::mul(x, x)));
        CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});
    }
    SUBCASE("relu kink sides") {
        Tensor neg = Tensor::parameter({1}, {-1});
        ad::backward(ad::sum(ad::relu(neg)));
        CHECK(neg.grad()[0] == 0.0);
        Tensor pos = Tensor::parameter({1}, {1});
        ad::backward(ad::sum(ad::relu(pos)));
        CHECK(pos.grad()[0] == 1.0);
    }
    SUBCASE("fan-out accumulates and repeated backward doubles") {
        Tensor x = Tensor::parameter({2}, {1, -2});
        const Tensor loss = ad::sum(ad::add(ad::mul(x, x), x));
        ad::backward(loss);
        CHECK(x.grad()[0] == 3.0);
        CHECK(x.grad()[1] == -3.0);
        ad::backward(loss);
        CHECK(x.grad()[0] == 6.0);
        x.zero_grad();
        ad::backward(loss);
        CHECK(x.grad()[0] == 3.0);
    }
    SUBCASE("non-scalar loss") {
        Tensor x = Tensor::parameter({2}, {1, 2});
        CHECK_THROWS_AS(ad::backward(ad::mul(x, x)), InvalidArgument);
    }
    SUBCASE("forward is deterministic") {
        Rng r1(4), r2(4);
        const Tensor a = random_param(r1, {4, 4});
        const Tensor b = random_param(r2, {4, 4});
        const auto ya = ad::l2_normalize(ad::matmul(a, a));
        const auto yb = ad::l2_normalize(ad::matmul(b, b));
        CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
    }
}

TEST_CASE("gradcheck on quadratic") {
    Rng rng(2);
    Tensor theta = random_param(rng, {10});
    const auto res = ad::gradcheck([&] { return ad::sum(ad::mul(theta, theta)); }, std::span<Tensor>(&theta, 1));
    CHECK(res.max_rel_error < 1e-9);
    CHECK(res.masked == 0);
}

TEST_CASE("primitive gradients match central differences") {
    Rng rng(42);
    constexpr double tol = 1e-6;

    Tensor a = random_param(rng, {4, 3});
    Tensor b = random_param(rng, {4, 3});
    Tensor row = random_param(rng, {3});
    Tensor sq = random_param(rng, {3, 5});
    Tensor pos = random_param(rng, {4, 3}, 0.5, 2.0);

    CHECK(check({a, b}, [&] { return weighted_sum(ad::add(a, b), 1); }) < tol);
    CHECK(check({a, row}, [&] { return weighted_sum(ad::add(a, row), 2); }) < tol);
    CHECK(check({a, b}, [&] { return weighted_sum(ad::sub(a, b), 3); }) < tol);
    CHECK(check({a, row}, [&] { return weighted_sum(ad::mul(a, row), 4); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::scale(a, -2.5), 5); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::exp(a), 6); }) < tol);
    CHECK(check({pos}, [&] { return weighted_sum(ad::log(pos), 7); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::relu(a), 8); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::hinge(a, 0.3), 9); }) < tol);
    CHECK(check({a, sq}, [&] { return weighted_sum(ad::matmul(a, sq), 10); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::transpose(a), 11); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::reshape(a, {2, 6}), 12); }) < tol);
    CHECK(check({a}, [&] { return ad::mean(ad::mul(a, a)); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::sum(a, 0), 13); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::mean(a, 1), 14); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::max(a, 0), 15); }) < tol);
    CHECK(check({a, b}, [&] { return weighted_sum(ad::concat({a, b}, 1), 16); }) < tol);
    CHECK(check({a, b}, [&] { return weighted_sum(ad::concat({a, b}, 0), 17); }) < tol);
    const std::vector<std::size_t> idx{3, 0, 0, 2};
    CHECK(check({a}, [&] { return weighted_sum(ad::gather(a, idx), 18); }) < tol);
    CHECK(check({row}, [&] { return weighted_sum(ad::broadcast_rows(row, 5), 19); }) < tol);
    CHECK(check({a}, [&] { return weighted_sum(ad::l2_normalize(a), 20); }) < tol);
    const std::vector<std::size_t> targets{0, 2, 1, 1};
    std::vector<std::uint8_t> excl(12, 0);
    excl[1] = 1;
    excl[11] = 1;
    CHECK(check({a}, [&] { return ad::softmax_cross_entropy(a, targets); }) < tol);
    CHECK(check({a}, [&] { return ad::softmax_cross_entropy(a, targets, excl); }) < tol);
    Tensor c = random_param(rng, {5, 3});
    CHECK(check({a, c}, [&] { return weighted_sum(ad::pairwise_sq_dist(a, c), 21); }) < tol);

    auto sm = std::make_shared<ad::SparseMatrix>();
    sm->rows = 2;
    sm->cols = 4;
    sm->row_ptr = {0, 2, 3};
    sm->col = {0, 3, 1};
    sm->val = {0.5, -1.0, 2.0};
    CHECK(check({a}, [&] { return weighted_sum(ad::sparse_matmul(sm, a), 22); }) < tol);
}

TEST_CASE("gradcheck masks coordinates that cross a kink") {
    Tensor x = Tensor::parameter({2}, {1e-7, 1.0});
    const auto res = ad::gradcheck([&] { return ad::sum(ad::relu(x)); }, std::span<Tensor>(&x, 1));
    CHECK(res.masked == 1);
    CHECK(res.checked == 1);
    CHECK(res.max_rel_error < 1e-9);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(8);
    std::vector<NamedTensor> tensors{{"f_theta_P.w", random_param(rng, {3, 4})}, {"mae.token", random_param(rng, {5})}};
    const auto path = std::filesystem::temp_directory_path() / "gspt_ckpt_test.manifest";
    write_checkpoint(path, tensors, {{"step", "12"}});

    std::vector<NamedTensor> fresh{{"f_theta_P.w", Tensor::parameter({3, 4}, std::vector<double>(12, 0.0))},
                                   {"mae.token", Tensor::parameter({5}, std::vector<double>(5, 0.0))}};
    const auto ckpt = read_checkpoint(path);
    CHECK(ckpt.meta.at("step") == "12");
    load_into(ckpt, fresh);
    for (std::size_t i = 0; i < tensors.size(); ++i)
        CHECK(std::equal(tensors[i].tensor.data().begin(), tensors[i].tensor.data().end(), fresh[i].tensor.data().begin()));

    std::vector<NamedTensor> wrong{{"f_theta_P.w", Tensor::parameter({4, 3}, std::vector<double>(12, 0.0))}};
    CHECK_THROWS_AS(load_into(ckpt, wrong), CheckpointError);
    std::vector<NamedTensor> missing{{"f_theta_I.w", Tensor::parameter({1}, {0.0})}};
    CHECK_THROWS_AS(load_into(ckpt, missing), CheckpointError);
}
