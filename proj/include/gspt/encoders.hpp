#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gspt/autodiff.hpp"
#include "gspt/checkpoint.hpp"
#include "gspt/geometry.hpp"
#include "gspt/rng.hpp"
#include "gspt/splat_renderer.hpp"

namespace gspt {

struct EncoderConfig {
    std::size_t d = 64;          ///< shared embedding dimension
    std::size_t hidden = 64;     ///< width of every hidden layer
    std::size_t k = 8;           ///< point-encoder neighbours (including the point itself)
    std::size_t patch = 8;       ///< image patch side
    std::size_t groups = 16;     ///< MAE groups G
    std::size_t group_size = 32; ///< MAE points per group M
    double mask_ratio = 0.6;
};

/// Throws ConfigError on zero sizes or a ratio outside [0, 1].
void validate(const EncoderConfig& cfg);

/// y = x W + b, initialized uniform in [-1/sqrt(in), 1/sqrt(in)].
struct Dense {
    ad::Tensor w; ///< [in, out]
    ad::Tensor b; ///< [out]

    Dense() = default;
    Dense(std::size_t in, std::size_t out, Rng& rng);
    ad::Tensor operator()(const ad::Tensor& x) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Points as a constant [n, 3] tensor.
ad::Tensor coordinates(const PointCloud& pc);
/// Values of an [n, 3] tensor as points.
PointCloud to_point_cloud(const ad::Tensor& coords);

/// Edge-conv encoder: two layers h_i = relu(x_i U + max_{j in knn(i)} x_j V + b)
/// over a k-nearest-neighbour graph of the input coordinates, then max + mean
/// pooling over points and a dense map to d.
class PointEncoder {
public:
    PointEncoder() = default;
    PointEncoder(const EncoderConfig& cfg, Rng& rng);

    /// `clouds` are [n, 3] tensors of equal n >= k; returns [B, d].
    ad::Tensor forward(std::span<const ad::Tensor> clouds) const;
    /// `stacked` holds `batch` clouds of equal size as [batch * n, 3].
    ad::Tensor forward(const ad::Tensor& stacked, std::size_t batch) const;
    ad::Tensor forward(const PointCloud& pc) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

private:
    struct EdgeLayer {
        Dense self;
        ad::Tensor neighbour; ///< [in, out], no bias
    };
    EdgeLayer make_layer(std::size_t in, std::size_t out, Rng& rng) const;
    static ad::Tensor apply(const EdgeLayer& layer, const ad::Tensor& x, std::span<const std::size_t> nbr,
                            std::size_t rows, std::size_t k);

    std::size_t k_ = 0;
    std::size_t hidden_ = 0;
    EdgeLayer edge1_, edge2_;
    Dense head_;
};

/// Patch encoder for RGB or depth images: flattened p x p patches, a dense patch
/// embedding, two dense+relu blocks, mean pooling over patches and a dense map to d.
class ImageEncoder {
public:
    ImageEncoder() = default;
    ImageEncoder(const EncoderConfig& cfg, std::size_t channels, Rng& rng);

    /// Images must share their size, have `channels` channels and sides divisible
    /// by the patch size (ShapeError otherwise). Returns [B, d].
    ad::Tensor forward(std::span<const Image> images) const;
    ad::Tensor forward(const Image& image) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

private:
    std::size_t channels_ = 0;
    std::size_t patch_ = 0;
    std::size_t hidden_ = 0;
    Dense embed_, block1_, block2_, head_;
};

/// Farthest-point centers, their knn member lists and the masked-group flags.
struct Grouping {
    IndexSet centers;
    std::vector<IndexSet> members; ///< G lists of M indices, nearest first
    std::vector<bool> masked;

    std::size_t masked_count() const;
};

/// Number of masked groups: round-half-up(ratio * G), clamped to [1, G - 1] when
/// 0 < ratio < 1.
std::size_t masked_group_count(std::size_t groups, double ratio);

Grouping mask_groups(const PointCloud& pc, std::size_t groups, std::size_t group_size, double ratio,
                     std::uint64_t rng_seed);

struct MaeOutput {
    /// [B * G * M, 3]: per sample and group in order, the original members of
    /// visible groups and center + predicted offsets for masked groups. A sample
    /// without masked groups passes its input cloud through unchanged instead.
    ad::Tensor reconstruction;
    std::size_t points_per_sample = 0;
    /// Mean over masked groups of the Chamfer distance in group-local coordinates;
    /// 0 when nothing is masked.
    ad::Tensor loss_cd;
};

/// Single-scale masked autoencoder over point groups. Tokens are a dense embedding
/// of group-local coordinates plus a dense embedding of the group center. Visible
/// tokens pass two dense+relu blocks, each seeing the max-pooled visible context;
/// masked groups start from a learned mask token and are decoded to M offsets.
class MaskedAutoencoder {
public:
    MaskedAutoencoder() = default;
    MaskedAutoencoder(const EncoderConfig& cfg, Rng& rng);

    /// All groupings must have the configured G, M and the same masked count.
    MaeOutput forward(std::span<const PointCloud> clouds, std::span<const Grouping> groupings) const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

    std::size_t groups() const { return groups_; }
    std::size_t group_size() const { return group_size_; }

private:
    std::size_t groups_ = 0;
    std::size_t group_size_ = 0;
    std::size_t hidden_ = 0;
    Dense group_embed_, center_embed_, block1_, block2_, decoder1_, decoder2_;
    ad::Tensor mask_token_; ///< [hidden]
};

/// Single-cloud convenience wrapper: returns the reconstruction as [G * M, 3].
MaeOutput mae_forward(const MaskedAutoencoder& mae, const Grouping& g, const PointCloud& pc);

/// Mean over groups of the symmetric l2 Chamfer distance between matching
/// [M, 3] blocks of `pred` and `truth` (both [groups * M, 3]).
ad::Tensor grouped_chamfer(const ad::Tensor& pred, const ad::Tensor& truth, std::size_t groups);

} // namespace gspt
