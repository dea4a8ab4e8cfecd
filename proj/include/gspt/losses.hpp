#pragma once

#include <span>
#include <vector>

#include "gspt/autodiff.hpp"

namespace gspt {

struct LossConfig {
    double tau = 0.1;
    double alpha = 1e-3; ///< intra-modal
    double beta = 1e-3;  ///< point-image cross-modal
    double gamma = 1e-3; ///< point-depth cross-modal
    double delta = 1.0;  ///< reconstruction
};

/// Throws ConfigError unless tau > 0 and all coefficients are finite and >= 0.
void validate(const LossConfig& cfg);

/// a.b / (|a| |b|). Throws NumericError when either norm is <= 1e-12.
double cosine_sim(std::span<const double> a, std::span<const double> b);

// The contrastive losses take [N, d] embedding batches and l2-normalize rows
// internally; similarities are cosine similarities divided by tau.

/// Two-view NT-Xent over [z1; z2]: row i's positive is row i + N (and vice versa),
/// the denominator runs over every other row, averaged over all 2N anchors.
ad::Tensor intra_modal_loss(const ad::Tensor& z1, const ad::Tensor& z2, double tau);

/// Symmetric InfoNCE between matched rows of `zbar` and `h`; each denominator runs
/// over all N candidates including the positive.
ad::Tensor cross_modal_loss(const ad::Tensor& zbar, const ad::Tensor& h, double tau);

/// Unit-normalized mean of the unit-normalized rows of z1 and z2.
ad::Tensor mean_embedding(const ad::Tensor& z1, const ad::Tensor& z2);

using Matrix = std::vector<std::vector<double>>;
double intra_modal_loss(const Matrix& z1, const Matrix& z2, double tau);
double cross_modal_loss(const Matrix& zbar, const Matrix& h, double tau);

/// alpha * l_im + beta * l_cm_pi + gamma * l_cm_pd + delta * l_cd. Throws
/// NumericError on non-finite components.
double total_loss(double l_im, double l_cm_pi, double l_cm_pd, double l_cd, const LossConfig& cfg);
ad::Tensor total_loss(const ad::Tensor& l_im, const ad::Tensor& l_cm_pi, const ad::Tensor& l_cm_pd,
                      const ad::Tensor& l_cd, const LossConfig& cfg);

} // namespace gspt
