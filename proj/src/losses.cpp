#include "gspt/losses.hpp"

#include <cmath>
#include <string>

#include "gspt/errors.hpp"

namespace gspt {

namespace {

void check_batch(const ad::Tensor& a, const ad::Tensor& b, const char* what) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": expected two [N, d] batches of equal shape, got " +
                         ad::shape_string(a.shape()) + " and " + ad::shape_string(b.shape()));
    if (a.dim(0) == 0) throw InvalidArgument(std::string(what) + ": empty batch");
}

void check_tau(double tau, const char* what) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument(std::string(what) + ": tau must be positive");
}

ad::Tensor to_tensor(const Matrix& m, const char* what) {
    if (m.empty()) throw InvalidArgument(std::string(what) + ": empty batch");
    const std::size_t d = m.front().size();
    std::vector<double> flat;
    flat.reserve(m.size() * d);
    for (const auto& row : m) {
        if (row.size() != d) throw ShapeError(std::string(what) + ": ragged embedding rows");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    return ad::Tensor::constant({m.size(), d}, std::move(flat));
}

} // namespace

void validate(const LossConfig& cfg) {
    if (!(cfg.tau > 0.0) || !std::isfinite(cfg.tau)) throw ConfigError("loss config: tau must be positive");
    for (double c : {cfg.alpha, cfg.beta, cfg.gamma, cfg.delta})
        if (!(c >= 0.0) || !std::isfinite(c)) throw ConfigError("loss config: coefficients must be finite and >= 0");
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("cosine_sim: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na <= 1e-12 || nb <= 1e-12) throw NumericError("cosine_sim: near-zero vector");
    return ab / (na * nb);
}

ad::Tensor intra_modal_loss(const ad::Tensor& z1, const ad::Tensor& z2, double tau) {
    check_batch(z1, z2, "intra_modal_loss");
    check_tau(tau, "intra_modal_loss");
    const std::size_t n = z1.dim(0);
    const ad::Tensor z = ad::l2_normalize(ad::concat({z1, z2}, 0));
    const ad::Tensor logits = ad::scale(ad::matmul(z, ad::transpose(z)), 1.0 / tau);

    std::vector<std::size_t> targets(2 * n);
    std::vector<std::uint8_t> self(4 * n * n, 0);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        targets[i] = (i + n) % (2 * n);
        self[i * 2 * n + i] = 1;
    }
    return ad::softmax_cross_entropy(logits, targets, self);
}

ad::Tensor cross_modal_loss(const ad::Tensor& zbar, const ad::Tensor& h, double tau) {
    check_batch(zbar, h, "cross_modal_loss");
    check_tau(tau, "cross_modal_loss");
    const std::size_t n = zbar.dim(0);
    const ad::Tensor a = ad::l2_normalize(zbar);
    const ad::Tensor b = ad::l2_normalize(h);
    const ad::Tensor logits = ad::scale(ad::matmul(a, ad::transpose(b)), 1.0 / tau);

    std::vector<std::size_t> targets(n);
    for (std::size_t i = 0; i < n; ++i) targets[i] = i;
    const ad::Tensor forward = ad::softmax_cross_entropy(logits, targets);
    const ad::Tensor backward = ad::softmax_cross_entropy(ad::transpose(logits), targets);
    return ad::scale(ad::add(forward, backward), 0.5);
}

ad::Tensor mean_embedding(const ad::Tensor& z1, const ad::Tensor& z2) {
    check_batch(z1, z2, "mean_embedding");
    return ad::l2_normalize(ad::scale(ad::add(ad::l2_normalize(z1), ad::l2_normalize(z2)), 0.5));
}

double intra_modal_loss(const Matrix& z1, const Matrix& z2, double tau) {
    return intra_modal_loss(to_tensor(z1, "intra_modal_loss"), to_tensor(z2, "intra_modal_loss"), tau).item();
}

double cross_modal_loss(const Matrix& zbar, const Matrix& h, double tau) {
    return cross_modal_loss(to_tensor(zbar, "cross_modal_loss"), to_tensor(h, "cross_modal_loss"), tau).item();
}

double total_loss(double l_im, double l_cm_pi, double l_cm_pd, double l_cd, const LossConfig& cfg) {
    for (double v : {l_im, l_cm_pi, l_cm_pd, l_cd})
        if (!std::isfinite(v)) throw NumericError("total_loss: non-finite loss component");
    return cfg.alpha * l_im + cfg.beta * l_cm_pi + cfg.gamma * l_cm_pd + cfg.delta * l_cd;
}

ad::Tensor total_loss(const ad::Tensor& l_im, const ad::Tensor& l_cm_pi, const ad::Tensor& l_cm_pd,
                      const ad::Tensor& l_cd, const LossConfig& cfg) {
    for (const auto* t : {&l_im, &l_cm_pi, &l_cm_pd, &l_cd})
        if (!std::isfinite(t->item())) throw NumericError("total_loss: non-finite loss component");
    return ad::add(ad::add(ad::scale(l_im, cfg.alpha), ad::scale(l_cm_pi, cfg.beta)),
                   ad::add(ad::scale(l_cm_pd, cfg.gamma), ad::scale(l_cd, cfg.delta)));
}

} // namespace gspt
