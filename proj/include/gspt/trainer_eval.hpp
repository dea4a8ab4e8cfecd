#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gspt/autodiff.hpp"
#include "gspt/checkpoint.hpp"
#include "gspt/encoders.hpp"
#include "gspt/losses.hpp"
#include "gspt/triplet_pipeline.hpp"

namespace gspt {

// ---------------------------------------------------------------------------
// Optimization

struct AdamWState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m; ///< one per parameter, created on the first step
    std::vector<std::vector<double>> v;
};

/// One AdamW update: m <- b1 m + (1 - b1) g, v <- b2 v + (1 - b2) g^2,
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta). Throws ShapeError
/// when params, grads and stored moments disagree in count or length.
void adamw_step(AdamWState& state, std::span<const std::span<double>> params,
                std::span<const std::span<const double>> grads, double lr, double weight_decay);
/// Same update from the accumulated grads of parameter tensors (missing grads
/// count as zero).
void adamw_step(AdamWState& state, std::span<ad::Tensor> params, double lr, double weight_decay);

/// lr0 * (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double lr0);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t steps = 0; ///< overrides epochs when non-zero
    std::size_t batch_size = 8;
    double lr0 = 1e-4;
    double weight_decay = 0.05;
    std::size_t per_class = 40; ///< synthetic shapes per class
    int classes = kNumSynthClasses;
    bool deterministic = true;
    LossConfig loss;
    PipelineConfig pipeline; ///< pipeline.seed seeds the whole run
    EncoderConfig encoder;

    std::uint64_t seed() const { return pipeline.seed; }
};

/// Throws ConfigError.
void validate(const TrainConfig& cfg);

/// key=value file accepting the pipeline keys plus epochs, steps, batch_size, lr,
/// weight_decay, per_class, classes, deterministic, tau, alpha, beta, gamma, delta, d,
/// hidden, k, patch, groups, group_size, mask_ratio.
TrainConfig parse_train_config(std::istream& in, const std::string& source = "<config>");
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_config_string(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Model and loss

/// The four trained networks with checkpoint prefixes f_theta_P, f_theta_I,
/// f_theta_D and mae.
struct Model {
    EncoderConfig config;
    PointEncoder point;
    ImageEncoder rgb;
    ImageEncoder depth;
    MaskedAutoencoder mae;

    Model() = default;
    Model(const EncoderConfig& cfg, std::uint64_t seed);
    std::vector<NamedTensor> parameters() const;
};

struct LossTerms {
    ad::Tensor l_im;
    ad::Tensor l_cm_pi;
    ad::Tensor l_cm_pd;
    ad::Tensor l_cd;
    ad::Tensor total;
};

/// Forward pass of the full objective on a batch of triplets. MAE masks are drawn
/// from `mask_seed`. Throws NumericError naming the first non-finite component.
LossTerms batch_loss(const Model& model, std::span<const Triplet* const> batch, const LossConfig& loss,
                     std::uint64_t mask_seed);

/// Triplets for every shape, seeded per shape index; labels are copied.
std::vector<Triplet> build_triplets(std::span<const LabeledCloud> shapes, const PipelineConfig& cfg, std::uint64_t seed);

/// Central-difference check of the full objective's gradient with respect to every
/// model parameter, on a batch of two triplets (first two classes) built from cfg.
/// With small loss coefficients some gradients are ~1e-9, where a step of 1e-5
/// leaves only rounding noise in the difference quotient; hence the larger default.
ad::GradcheckResult gradcheck_objective(const TrainConfig& cfg, double eps = 1e-4);

// ---------------------------------------------------------------------------
// Training

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    double l_im = 0.0;
    double l_cm_pi = 0.0;
    double l_cm_pd = 0.0;
    double l_cd = 0.0;
    double total = 0.0;

    /// One-line JSON object {step, lr, l_im, l_cm_pi, l_cm_pd, l_cd, total}.
    std::string to_json() const;
};

/// Step-indexed training loop. Batches and masks depend only on (seed, step), so a
/// run restored from a checkpoint continues exactly as an uninterrupted one.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);
    /// Reuses prebuilt triplets (they must come from the same pipeline config).
    Trainer(const TrainConfig& cfg, std::shared_ptr<const std::vector<Triplet>> data);

    std::size_t steps_per_epoch() const;
    std::size_t total_steps() const { return total_steps_; }
    std::size_t step() const { return adam_.step; }
    bool done() const { return step() >= total_steps_; }

    StepMetrics train_step();

    /// Parameters, AdamW moments, step and configuration.
    void save_checkpoint(const std::filesystem::path& path) const;
    /// Restores a checkpoint written by save_checkpoint for the same model shape.
    void load_checkpoint(const std::filesystem::path& path);

    const Model& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<Triplet>& data() const { return *data_; }

private:
    std::vector<std::size_t> batch_indices(std::size_t step) const;

    TrainConfig cfg_;
    std::shared_ptr<const std::vector<Triplet>> data_;
    Model model_;
    std::vector<NamedTensor> named_;
    std::vector<ad::Tensor> params_;
    AdamWState adam_;
    std::size_t total_steps_ = 0;
};

/// Runs the configured training into `out_dir`: metrics.jsonl (one record per
/// step), checkpoint.txt after every epoch and at the end. With `resume`, an
/// existing checkpoint in out_dir is restored first and the log is appended.
std::vector<StepMetrics> pretrain(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool resume = false);

struct Pretrained {
    Model model;
    TrainConfig config;
};

/// Loads the networks and configuration of a checkpoint written by Trainer.
/// Throws CheckpointError for missing or mismatched tensors.
Pretrained load_pretrained(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Evaluation

/// Row-wise l2-normalized point-encoder embeddings of the normalized,
/// FPS-downsampled clouds.
Matrix embed(const Model& model, std::span<const LabeledCloud> shapes, const PipelineConfig& cfg);

struct ProbeOptions {
    double lambda = 1e-3;
    std::size_t steps = 500;
    double lr = 0.1;
};

/// One-vs-rest linear classifier, squared hinge with L2 penalty, full-batch GD.
struct LinearClassifier {
    std::size_t classes = 0;
    std::size_t dim = 0;
    std::vector<int> labels; ///< class label of each output, ascending
    std::vector<double> w;   ///< [classes, dim]
    std::vector<double> b; ///< [classes]

    int predict(std::span<const double> x) const;
};

LinearClassifier train_linear_classifier(const Matrix& x, std::span<const int> labels, const ProbeOptions& opt = {});
double accuracy(const LinearClassifier& clf, const Matrix& x, std::span<const int> labels);

/// Stratified deterministic 70/30 split, classifier on the 70, accuracy on the 30.
double linear_probe(const Matrix& x, std::span<const int> labels, std::uint64_t seed, const ProbeOptions& opt = {});

struct FewShotConfig {
    std::size_t ways = 5;
    std::size_t shots = 10;
    std::size_t queries = 20;
    std::size_t runs = 10;
    /// When set every run uses this seed (identical runs).
    std::optional<std::uint64_t> fixed_run_seed;
};

struct FewShotResult {
    double mean = 0.0;
    double stddev = 0.0; ///< population standard deviation
    std::vector<double> accuracies;
};

FewShotResult fewshot_eval(const Matrix& x, std::span<const int> labels, const FewShotConfig& fs, std::uint64_t seed,
                           const ProbeOptions& opt = {});

// Embedding files: one line per sample, "label v1 v2 ... vd".
void write_embeddings(const std::filesystem::path& path, const Matrix& x, std::span<const int> labels);
std::pair<Matrix, std::vector<int>> read_embeddings(const std::filesystem::path& path);

} // namespace gspt
