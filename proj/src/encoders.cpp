#include "gspt/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gspt/errors.hpp"

namespace gspt {

namespace {

ad::Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return ad::Tensor::parameter(std::move(shape), std::move(v));
}

} // namespace

void validate(const EncoderConfig& cfg) {
    if (cfg.d == 0 || cfg.hidden == 0 || cfg.k == 0 || cfg.patch == 0 || cfg.groups == 0 || cfg.group_size == 0)
        throw ConfigError("encoder config: sizes must be positive");
    if (!(cfg.mask_ratio >= 0.0 && cfg.mask_ratio <= 1.0)) throw ConfigError("encoder config: mask_ratio must be in [0, 1]");
}

// ---------------------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = uniform_tensor({in, out}, bound, rng);
    b = uniform_tensor({out}, bound, rng);
}

ad::Tensor Dense::operator()(const ad::Tensor& x) const { return ad::add(ad::matmul(x, w), b); }

void Dense::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

ad::Tensor coordinates(const PointCloud& pc) {
    std::vector<double> v;
    v.reserve(pc.size() * 3);
    for (const auto& p : pc.points) v.insert(v.end(), {p.x, p.y, p.z});
    return ad::Tensor::constant({pc.size(), 3}, std::move(v));
}

PointCloud to_point_cloud(const ad::Tensor& coords) {
    if (coords.rank() != 2 || coords.dim(1) != 3)
        throw ShapeError("to_point_cloud: expected [n, 3], got " + ad::shape_string(coords.shape()));
    const auto v = coords.data();
    PointCloud pc;
    pc.points.reserve(coords.dim(0));
    for (std::size_t i = 0; i < coords.dim(0); ++i) pc.points.push_back({v[3 * i], v[3 * i + 1], v[3 * i + 2]});
    return pc;
}

// ---------------------------------------------------------------------------
// Point encoder

PointEncoder::PointEncoder(const EncoderConfig& cfg, Rng& rng) : k_(cfg.k), hidden_(cfg.hidden) {
    validate(cfg);
    edge1_ = make_layer(3, cfg.hidden, rng);
    edge2_ = make_layer(cfg.hidden, cfg.hidden, rng);
    head_ = Dense(cfg.hidden, cfg.d, rng);
}

PointEncoder::EdgeLayer PointEncoder::make_layer(std::size_t in, std::size_t out, Rng& rng) const {
    // fan-in of the edge feature [x_i, x_j]
    const double bound = 1.0 / std::sqrt(static_cast<double>(2 * in));
    EdgeLayer layer;
    layer.self.w = uniform_tensor({in, out}, bound, rng);
    layer.self.b = uniform_tensor({out}, bound, rng);
    layer.neighbour = uniform_tensor({in, out}, bound, rng);
    return layer;
}

// relu is monotone and x_i U + b is constant over j, so pooling the neighbour
// term before the activation equals max-pooling the activated edge features.
ad::Tensor PointEncoder::apply(const EdgeLayer& layer, const ad::Tensor& x, std::span<const std::size_t> nbr,
                               std::size_t rows, std::size_t k) {
    const ad::Tensor gathered = ad::gather(ad::matmul(x, layer.neighbour), nbr);
    const ad::Tensor pooled = ad::max(ad::reshape(gathered, {rows, k, gathered.dim(1)}), 1);
    return ad::relu(ad::add(layer.self(x), pooled));
}

ad::Tensor PointEncoder::forward(const ad::Tensor& stacked, std::size_t batch) const {
    if (batch == 0) throw InvalidArgument("PointEncoder: empty batch");
    if (stacked.rank() != 2 || stacked.dim(1) != 3 || stacked.dim(0) % batch != 0)
        throw ShapeError("PointEncoder: expected [B * n, 3] for B = " + std::to_string(batch) + ", got " +
                         ad::shape_string(stacked.shape()));
    const std::size_t n = stacked.dim(0) / batch;
    if (n < k_) throw InvalidArgument("PointEncoder: cloud has " + std::to_string(n) + " points, k is " + std::to_string(k_));

    // The neighbour graph is built on coordinate values and is not differentiated.
    std::vector<std::size_t> nbr;
    nbr.reserve(batch * n * k_);
    const PointCloud all = to_point_cloud(stacked);
    for (std::size_t b = 0; b < batch; ++b) {
        PointCloud pc;
        pc.points.assign(all.points.begin() + static_cast<std::ptrdiff_t>(b * n),
                         all.points.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
        for (const auto& row : knn(pc, pc, k_))
            for (auto j : row) nbr.push_back(b * n + j);
    }

    const std::size_t rows = batch * n;
    const ad::Tensor h1 = apply(edge1_, stacked, nbr, rows, k_);
    const ad::Tensor h2 = apply(edge2_, h1, nbr, rows, k_);
    const ad::Tensor per_cloud = ad::reshape(h2, {batch, n, hidden_});
    return head_(ad::add(ad::max(per_cloud, 1), ad::mean(per_cloud, 1)));
}

ad::Tensor PointEncoder::forward(std::span<const ad::Tensor> clouds) const {
    if (clouds.empty()) throw InvalidArgument("PointEncoder: empty batch");
    for (const auto& c : clouds)
        if (c.rank() != 2 || c.dim(1) != 3 || c.dim(0) != clouds.front().dim(0))
            throw ShapeError("PointEncoder: expected [" + std::to_string(clouds.front().dim(0)) + ", 3], got " +
                             ad::shape_string(c.shape()));
    return forward(clouds.size() == 1 ? clouds.front() : ad::concat(clouds, 0), clouds.size());
}

ad::Tensor PointEncoder::forward(const PointCloud& pc) const {
    const ad::Tensor c = coordinates(pc);
    return forward(std::span(&c, 1));
}

void PointEncoder::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    edge1_.self.collect(prefix + ".edge1.self", out);
    out.push_back({prefix + ".edge1.neighbour", edge1_.neighbour});
    edge2_.self.collect(prefix + ".edge2.self", out);
    out.push_back({prefix + ".edge2.neighbour", edge2_.neighbour});
    head_.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------------------
// Image encoder

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, std::size_t channels, Rng& rng)
    : channels_(channels), patch_(cfg.patch), hidden_(cfg.hidden) {
    validate(cfg);
    if (channels == 0) throw InvalidArgument("ImageEncoder: channels must be positive");
    embed_ = Dense(cfg.patch * cfg.patch * channels, cfg.hidden, rng);
    block1_ = Dense(cfg.hidden, cfg.hidden, rng);
    block2_ = Dense(cfg.hidden, cfg.hidden, rng);
    head_ = Dense(cfg.hidden, cfg.d, rng);
}

ad::Tensor ImageEncoder::forward(std::span<const Image> images) const {
    if (images.empty()) throw InvalidArgument("ImageEncoder: empty batch");
    const int w = images.front().width, h = images.front().height;
    const std::size_t p = patch_;
    if (w <= 0 || h <= 0 || w % static_cast<int>(p) != 0 || h % static_cast<int>(p) != 0)
        throw ShapeError("ImageEncoder: image " + std::to_string(w) + "x" + std::to_string(h) +
                         " is not divisible into " + std::to_string(p) + "x" + std::to_string(p) + " patches");
    const std::size_t px = static_cast<std::size_t>(w) / p, py = static_cast<std::size_t>(h) / p;
    const std::size_t patches = px * py, feat = p * p * channels_;

    std::vector<double> flat;
    flat.reserve(images.size() * patches * feat);
    for (const auto& img : images) {
        if (img.width != w || img.height != h || img.channels != static_cast<int>(channels_))
            throw ShapeError("ImageEncoder: expected " + std::to_string(w) + "x" + std::to_string(h) + "x" +
                             std::to_string(channels_) + ", got " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + "x" + std::to_string(img.channels));
        for (std::size_t gy = 0; gy < py; ++gy)
            for (std::size_t gx = 0; gx < px; ++gx)
                for (std::size_t y = 0; y < p; ++y) {
                    const auto row = img.data.begin() +
                                     static_cast<std::ptrdiff_t>(((gy * p + y) * static_cast<std::size_t>(w) + gx * p) * channels_);
                    flat.insert(flat.end(), row, row + static_cast<std::ptrdiff_t>(p * channels_));
                }
    }
    const ad::Tensor x = ad::Tensor::constant({images.size() * patches, feat}, std::move(flat));
    ad::Tensor t = embed_(x);
    t = ad::relu(block1_(t));
    t = ad::relu(block2_(t));
    return head_(ad::mean(ad::reshape(t, {images.size(), patches, hidden_}), 1));
}

ad::Tensor ImageEncoder::forward(const Image& image) const { return forward(std::span(&image, 1)); }

void ImageEncoder::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    embed_.collect(prefix + ".embed", out);
    block1_.collect(prefix + ".block1", out);
    block2_.collect(prefix + ".block2", out);
    head_.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------------------
// Grouping

std::size_t Grouping::masked_count() const {
    return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true));
}

std::size_t masked_group_count(std::size_t groups, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw InvalidArgument("mask ratio must be in [0, 1]");
    auto m = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(groups) + 0.5));
    if (ratio > 0.0 && ratio < 1.0 && groups >= 2) m = std::clamp<std::size_t>(m, 1, groups - 1);
    return std::min(m, groups);
}

Grouping mask_groups(const PointCloud& pc, std::size_t groups, std::size_t group_size, double ratio,
                     std::uint64_t rng_seed) {
    if (groups == 0 || groups > pc.size())
        throw InvalidArgument("mask_groups: need 1 <= G <= " + std::to_string(pc.size()) + ", got " + std::to_string(groups));
    if (group_size == 0 || group_size > pc.size())
        throw InvalidArgument("mask_groups: need 1 <= M <= " + std::to_string(pc.size()) + ", got " +
                              std::to_string(group_size));
    Grouping g;
    g.centers = fps(pc, groups);
    g.members = knn(pc, select(pc, g.centers), group_size);

    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(rng_seed);
    rng.shuffle(order);
    g.masked.assign(groups, false);
    const std::size_t m = masked_group_count(groups, ratio);
    for (std::size_t i = 0; i < m; ++i) g.masked[order[i]] = true;
    return g;
}

// ---------------------------------------------------------------------------
// Masked autoencoder

MaskedAutoencoder::MaskedAutoencoder(const EncoderConfig& cfg, Rng& rng)
    : groups_(cfg.groups), group_size_(cfg.group_size), hidden_(cfg.hidden) {
    validate(cfg);
    const std::size_t h = cfg.hidden;
    group_embed_ = Dense(3 * cfg.group_size, h, rng);
    center_embed_ = Dense(3, h, rng);
    block1_ = Dense(2 * h, h, rng);
    block2_ = Dense(2 * h, h, rng);
    decoder1_ = Dense(2 * h, h, rng);
    decoder2_ = Dense(h, 3 * cfg.group_size, rng);
    mask_token_ = uniform_tensor({h}, 1.0 / std::sqrt(static_cast<double>(h)), rng);
}

ad::Tensor grouped_chamfer(const ad::Tensor& pred, const ad::Tensor& truth, std::size_t groups) {
    if (pred.shape() != truth.shape() || pred.rank() != 2 || pred.dim(1) != 3 || groups == 0 ||
        pred.dim(0) % groups != 0)
        throw ShapeError("grouped_chamfer: incompatible shapes " + ad::shape_string(pred.shape()) + " and " +
                         ad::shape_string(truth.shape()) + " for " + std::to_string(groups) + " groups");
    const std::size_t m = pred.dim(0) / groups;
    std::vector<ad::Tensor> terms;
    terms.reserve(groups);
    std::vector<std::size_t> idx(m);
    for (std::size_t g = 0; g < groups; ++g) {
        std::iota(idx.begin(), idx.end(), g * m);
        const ad::Tensor d = ad::pairwise_sq_dist(ad::gather(pred, idx), ad::gather(truth, idx));
        const ad::Tensor neg = ad::scale(d, -1.0);
        // min = -max(-d); both directed means
        terms.push_back(ad::reshape(ad::add(ad::mean(ad::max(neg, 1)), ad::mean(ad::max(neg, 0))), {1}));
    }
    return ad::scale(ad::mean(ad::concat(terms, 0)), -1.0);
}

MaeOutput MaskedAutoencoder::forward(std::span<const PointCloud> clouds, std::span<const Grouping> groupings) const {
    if (clouds.empty() || clouds.size() != groupings.size())
        throw InvalidArgument("MaskedAutoencoder: need one grouping per cloud");
    const std::size_t batch = clouds.size(), G = groups_, M = group_size_;
    const std::size_t n_masked = groupings.front().masked_count();
    for (const auto& g : groupings) {
        if (g.centers.size() != G || g.members.size() != G || g.masked.size() != G)
            throw ShapeError("MaskedAutoencoder: grouping does not have " + std::to_string(G) + " groups");
        for (const auto& m : g.members)
            if (m.size() != M) throw ShapeError("MaskedAutoencoder: group size differs from " + std::to_string(M));
        if (g.masked_count() != n_masked) throw InvalidArgument("MaskedAutoencoder: masked counts differ in the batch");
    }

    MaeOutput out;
    if (n_masked == 0) {
        std::vector<ad::Tensor> parts;
        for (const auto& pc : clouds) parts.push_back(coordinates(pc));
        for (const auto& pc : clouds)
            if (pc.size() != clouds.front().size()) throw ShapeError("MaskedAutoencoder: cloud sizes differ in the batch");
        out.reconstruction = parts.size() == 1 ? parts.front() : ad::concat(parts, 0);
        out.points_per_sample = clouds.front().size();
        out.loss_cd = ad::Tensor::scalar(0.0);
        return out;
    }
    const std::size_t n_visible = G - n_masked;
    if (n_visible == 0) throw InvalidArgument("MaskedAutoencoder: every group is masked");

    // Constant inputs gathered per group, in batch-major group order.
    std::vector<double> centers(batch * G * 3), members(batch * G * M * 3), local_visible, local_masked,
        center_rep_masked;
    std::vector<std::size_t> visible_rows, masked_rows, visible_sample, masked_sample;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& pc = clouds[b];
        const auto& g = groupings[b];
        for (std::size_t gi = 0; gi < G; ++gi) {
            const std::size_t row = b * G + gi;
            const Vec3 c = pc[g.centers[gi]];
            centers[3 * row] = c.x;
            centers[3 * row + 1] = c.y;
            centers[3 * row + 2] = c.z;
            auto& local = g.masked[gi] ? local_masked : local_visible;
            for (std::size_t j = 0; j < M; ++j) {
                const Vec3 p = pc[g.members[gi][j]];
                const std::size_t mrow = row * M + j;
                members[3 * mrow] = p.x;
                members[3 * mrow + 1] = p.y;
                members[3 * mrow + 2] = p.z;
                local.insert(local.end(), {p.x - c.x, p.y - c.y, p.z - c.z});
                if (g.masked[gi]) center_rep_masked.insert(center_rep_masked.end(), {c.x, c.y, c.z});
            }
            if (g.masked[gi]) {
                masked_rows.push_back(row);
                masked_sample.push_back(b);
            } else {
                visible_rows.push_back(row);
                visible_sample.push_back(b);
            }
        }
    }

    const std::size_t h = hidden_;
    const ad::Tensor center_tokens = center_embed_(ad::Tensor::constant({batch * G, 3}, std::move(centers)));
    const ad::Tensor local_vis = ad::Tensor::constant({batch * n_visible, 3 * M}, std::move(local_visible));

    auto context = [&](const ad::Tensor& tokens, std::span<const std::size_t> sample_of_row) {
        const ad::Tensor pooled = ad::max(ad::reshape(tokens, {batch, n_visible, h}), 1);
        return ad::gather(pooled, sample_of_row);
    };

    ad::Tensor vis = ad::add(group_embed_(local_vis), ad::gather(center_tokens, visible_rows));
    vis = ad::relu(block1_(ad::concat({vis, context(vis, visible_sample)}, 1)));
    vis = ad::relu(block2_(ad::concat({vis, context(vis, visible_sample)}, 1)));

    const ad::Tensor masked_tokens = ad::add(ad::gather(center_tokens, masked_rows), mask_token_);
    const ad::Tensor decoded =
        ad::relu(decoder1_(ad::concat({masked_tokens, context(vis, masked_sample)}, 1)));
    const std::size_t n_pred = batch * n_masked * M;
    const ad::Tensor offsets = ad::reshape(decoder2_(decoded), {n_pred, 3});

    const ad::Tensor truth = ad::Tensor::constant({n_pred, 3}, std::move(local_masked));
    out.loss_cd = grouped_chamfer(offsets, truth, batch * n_masked);

    const ad::Tensor predicted = ad::add(offsets, ad::Tensor::constant({n_pred, 3}, std::move(center_rep_masked)));
    const ad::Tensor source = ad::concat({ad::Tensor::constant({batch * G * M, 3}, std::move(members)), predicted}, 0);
    std::vector<std::size_t> pick(batch * G * M);
    std::size_t next_pred = 0;
    for (std::size_t row = 0; row < batch * G; ++row) {
        const bool is_masked = groupings[row / G].masked[row % G];
        for (std::size_t j = 0; j < M; ++j)
            pick[row * M + j] = is_masked ? batch * G * M + (next_pred++) : row * M + j;
    }
    out.reconstruction = ad::gather(source, pick);
    out.points_per_sample = G * M;
    return out;
}

void MaskedAutoencoder::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    group_embed_.collect(prefix + ".group_embed", out);
    center_embed_.collect(prefix + ".center_embed", out);
    block1_.collect(prefix + ".block1", out);
    block2_.collect(prefix + ".block2", out);
    decoder1_.collect(prefix + ".decoder1", out);
    decoder2_.collect(prefix + ".decoder2", out);
    out.push_back({prefix + ".mask_token", mask_token_});
}

MaeOutput mae_forward(const MaskedAutoencoder& mae, const Grouping& g, const PointCloud& pc) {
    return mae.forward(std::span(&pc, 1), std::span(&g, 1));
}

} // namespace gspt
