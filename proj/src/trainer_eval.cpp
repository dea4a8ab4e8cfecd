#include "gspt/trainer_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "config_parse.hpp"
#include "gspt/errors.hpp"
#include "gspt/rng.hpp"

namespace gspt {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kEpochStream = 0x65706f6368ULL;
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;
constexpr std::uint64_t kTripletStream = 0x747269ULL;

void check_finite(const char* name, const ad::Tensor& t) {
    const double v = t.item();
    if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "non-finite loss component " << name << " = " << v;
        throw NumericError(os.str());
    }
}

bool set_train_key(TrainConfig& cfg, const std::string& key, const std::string& value, const std::string& where) {
    using detail::parse_value;
    if (key == "epochs") cfg.epochs = parse_value<std::size_t>(value, where);
    else if (key == "steps") cfg.steps = parse_value<std::size_t>(value, where);
    else if (key == "batch_size") cfg.batch_size = parse_value<std::size_t>(value, where);
    else if (key == "lr") cfg.lr0 = parse_value<double>(value, where);
    else if (key == "weight_decay") cfg.weight_decay = parse_value<double>(value, where);
    else if (key == "per_class") cfg.per_class = parse_value<std::size_t>(value, where);
    else if (key == "classes") cfg.classes = parse_value<int>(value, where);
    else if (key == "deterministic") cfg.deterministic = detail::parse_flag(value, where);
    else if (key == "tau") cfg.loss.tau = parse_value<double>(value, where);
    else if (key == "alpha") cfg.loss.alpha = parse_value<double>(value, where);
    else if (key == "beta") cfg.loss.beta = parse_value<double>(value, where);
    else if (key == "gamma") cfg.loss.gamma = parse_value<double>(value, where);
    else if (key == "delta") cfg.loss.delta = parse_value<double>(value, where);
    else if (key == "d") cfg.encoder.d = parse_value<std::size_t>(value, where);
    else if (key == "hidden") cfg.encoder.hidden = parse_value<std::size_t>(value, where);
    else if (key == "k") cfg.encoder.k = parse_value<std::size_t>(value, where);
    else if (key == "patch") cfg.encoder.patch = parse_value<std::size_t>(value, where);
    else if (key == "groups") cfg.encoder.groups = parse_value<std::size_t>(value, where);
    else if (key == "group_size") cfg.encoder.group_size = parse_value<std::size_t>(value, where);
    else if (key == "mask_ratio") cfg.encoder.mask_ratio = parse_value<double>(value, where);
    else return set_pipeline_key(cfg.pipeline, key, value, where);
    return true;
}

void apply_entries(TrainConfig& cfg, std::istream& in, const std::string& source) {
    detail::for_each_entry(in, source, [&](const std::string& key, const std::string& value, const std::string& where) {
        if (!set_train_key(cfg, key, value, where)) throw ConfigError(where + ": unknown key \"" + key + "\"");
    });
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(to_config_string(cfg));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

Matrix to_matrix(const ad::Tensor& t) {
    Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
    const auto data = t.data();
    for (std::size_t i = 0; i < m.size(); ++i)
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(i * t.dim(1)), t.dim(1), m[i].begin());
    return m;
}

/// Distinct labels in ascending order; throws unless there are at least two.
std::vector<int> distinct_labels(std::span<const int> labels) {
    std::vector<int> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) throw InvalidArgument("classifier needs at least two classes");
    return classes;
}

void check_rows(const Matrix& x, std::span<const int> labels) {
    if (x.size() != labels.size())
        throw ShapeError("embeddings have " + std::to_string(x.size()) + " rows but " + std::to_string(labels.size()) +
                         " labels");
    if (x.empty()) throw InvalidArgument("no embeddings");
    for (const auto& row : x)
        if (row.size() != x.front().size()) throw ShapeError("embedding rows differ in length");
}

Matrix rows_of(const Matrix& x, std::span<const std::size_t> idx) {
    Matrix out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(x[i]);
    return out;
}

std::vector<int> labels_of(std::span<const int> labels, std::span<const std::size_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Optimization

void adamw_step(AdamWState& state, std::span<const std::span<double>> params,
                std::span<const std::span<const double>> grads, double lr, double weight_decay) {
    if (params.size() != grads.size())
        throw ShapeError("adamw: " + std::to_string(params.size()) + " parameters but " + std::to_string(grads.size()) +
                         " gradients");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ShapeError("adamw: optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size() ||
            state.v[i].size() != params[i].size())
            throw ShapeError("adamw: parameter " + std::to_string(i) + " has length " + std::to_string(params[i].size()) +
                             ", gradient " + std::to_string(grads[i].size()) + ", moments " +
                             std::to_string(state.m[i].size()));

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = grads[i][j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[j] / c1;
            const double v_hat = v[j] / c2;
            double& theta = params[i][j];
            theta -= lr * (m_hat / (std::sqrt(v_hat) + state.eps) + weight_decay * theta);
        }
    }
}

void adamw_step(AdamWState& state, std::span<ad::Tensor> params, double lr, double weight_decay) {
    std::vector<std::vector<double>> zeros;
    std::vector<std::span<double>> values;
    std::vector<std::span<const double>> grads;
    zeros.reserve(params.size());
    for (auto& p : params) {
        values.push_back(p.mutable_data());
        if (p.grad().size() == p.numel()) {
            grads.push_back(p.grad());
        } else {
            zeros.emplace_back(p.numel(), 0.0);
            grads.push_back(zeros.back());
        }
    }
    adamw_step(state, values, grads, lr, weight_decay);
}

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
    if (total == 0) throw InvalidArgument("cosine_lr: total steps must be positive");
    if (t > total)
        throw InvalidArgument("cosine_lr: step " + std::to_string(t) + " beyond total " + std::to_string(total));
    const double x = static_cast<double>(t) / static_cast<double>(total);
    return std::max(0.0, lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * x)));
}

// ---------------------------------------------------------------------------
// Configuration

void validate(const TrainConfig& cfg) {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (cfg.batch_size < 2) fail("batch_size must be at least 2");
    if (cfg.epochs == 0 && cfg.steps == 0) fail("epochs or steps must be positive");
    if (!(cfg.lr0 > 0.0) || !std::isfinite(cfg.lr0)) fail("lr must be positive");
    if (!(cfg.weight_decay >= 0.0) || !std::isfinite(cfg.weight_decay)) fail("weight_decay must be non-negative");
    if (cfg.per_class == 0) fail("per_class must be positive");
    if (cfg.classes < 2 || cfg.classes > kNumSynthClasses)
        fail("classes must be in [2, " + std::to_string(kNumSynthClasses) + "]");
    validate(cfg.loss);
    validate(cfg.pipeline);
    validate(cfg.encoder);
    const auto& e = cfg.encoder;
    const auto& p = cfg.pipeline;
    if (e.k > p.n_points) fail("k exceeds n_points");
    if (e.groups > p.n_points || e.group_size > p.n_points) fail("groups and group_size must not exceed n_points");
    if (static_cast<std::size_t>(p.render_size) % e.patch != 0) fail("render_size must be divisible by patch");
    if (e.groups * e.group_size < e.k) fail("groups * group_size must be at least k");
    if (e.mask_ratio >= 1.0) fail("mask_ratio must leave a visible group");
}

TrainConfig parse_train_config(std::istream& in, const std::string& source) {
    TrainConfig cfg;
    apply_entries(cfg, in, source);
    validate(cfg);
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    return parse_train_config(in, path.string());
}

std::string to_config_string(const TrainConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << to_config_string(cfg.pipeline);
    os << "epochs=" << cfg.epochs << "\nsteps=" << cfg.steps << "\nbatch_size=" << cfg.batch_size << "\nlr=" << cfg.lr0
       << "\nweight_decay=" << cfg.weight_decay << "\nper_class=" << cfg.per_class << "\nclasses=" << cfg.classes
       << "\ndeterministic=" << (cfg.deterministic ? 1 : 0) << "\ntau=" << cfg.loss.tau << "\nalpha=" << cfg.loss.alpha
       << "\nbeta=" << cfg.loss.beta << "\ngamma=" << cfg.loss.gamma << "\ndelta=" << cfg.loss.delta
       << "\nd=" << cfg.encoder.d << "\nhidden=" << cfg.encoder.hidden << "\nk=" << cfg.encoder.k
       << "\npatch=" << cfg.encoder.patch << "\ngroups=" << cfg.encoder.groups
       << "\ngroup_size=" << cfg.encoder.group_size << "\nmask_ratio=" << cfg.encoder.mask_ratio << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Model and loss

Model::Model(const EncoderConfig& cfg, std::uint64_t seed) : config(cfg) {
    validate(cfg);
    Rng point_rng(derive_seed(seed, {kModelStream, 0}));
    Rng rgb_rng(derive_seed(seed, {kModelStream, 1}));
    Rng depth_rng(derive_seed(seed, {kModelStream, 2}));
    Rng mae_rng(derive_seed(seed, {kModelStream, 3}));
    point = PointEncoder(cfg, point_rng);
    rgb = ImageEncoder(cfg, 3, rgb_rng);
    depth = ImageEncoder(cfg, 1, depth_rng);
    mae = MaskedAutoencoder(cfg, mae_rng);
}

std::vector<NamedTensor> Model::parameters() const {
    std::vector<NamedTensor> out;
    point.collect("f_theta_P", out);
    rgb.collect("f_theta_I", out);
    depth.collect("f_theta_D", out);
    mae.collect("mae", out);
    return out;
}

LossTerms batch_loss(const Model& model, std::span<const Triplet* const> batch, const LossConfig& loss,
                     std::uint64_t mask_seed) {
    if (batch.empty()) throw InvalidArgument("batch_loss: empty batch");
    const EncoderConfig& ec = model.config;
    const std::size_t n = batch.size();

    std::vector<PointCloud> clouds;
    std::vector<Grouping> groupings;
    std::vector<ad::Tensor> gs;
    std::vector<Image> views, depths;
    clouds.reserve(n);
    for (std::size_t b = 0; b < n; ++b) {
        const Triplet& t = *batch[b];
        clouds.push_back(t.point_cloud);
        groupings.push_back(mask_groups(t.point_cloud, ec.groups, ec.group_size, ec.mask_ratio, derive_seed(mask_seed, {b})));
        gs.push_back(coordinates(t.gs_points));
        views.push_back(t.novel_view);
        depths.push_back(t.depth_map);
    }

    const MaeOutput rec = model.mae.forward(clouds, groupings);
    const ad::Tensor z1 = model.point.forward(rec.reconstruction, n);
    const ad::Tensor z2 = model.point.forward(gs);
    const ad::Tensor zbar = mean_embedding(z1, z2);
    const ad::Tensor h_rgb = model.rgb.forward(views);
    const ad::Tensor h_depth = model.depth.forward(depths);

    LossTerms terms;
    terms.l_im = intra_modal_loss(z1, z2, loss.tau);
    terms.l_cm_pi = cross_modal_loss(zbar, h_rgb, loss.tau);
    terms.l_cm_pd = cross_modal_loss(zbar, h_depth, loss.tau);
    terms.l_cd = rec.loss_cd;
    check_finite("l_im", terms.l_im);
    check_finite("l_cm_pi", terms.l_cm_pi);
    check_finite("l_cm_pd", terms.l_cm_pd);
    check_finite("l_cd", terms.l_cd);
    terms.total = total_loss(terms.l_im, terms.l_cm_pi, terms.l_cm_pd, terms.l_cd, loss);
    check_finite("total", terms.total);
    return terms;
}

std::vector<Triplet> build_triplets(std::span<const LabeledCloud> shapes, const PipelineConfig& cfg, std::uint64_t seed) {
    std::vector<Triplet> out;
    out.reserve(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        out.push_back(build_triplet(shapes[i].cloud, cfg, derive_seed(seed, {kTripletStream, i})));
        out.back().label = shapes[i].label;
    }
    return out;
}

ad::GradcheckResult gradcheck_objective(const TrainConfig& cfg, double eps) {
    validate(cfg);
    const auto shapes = make_dataset(cfg.pipeline, 1, cfg.seed(), 2);
    const auto triplets = build_triplets(shapes, cfg.pipeline, cfg.seed());
    const std::vector<const Triplet*> batch{&triplets[0], &triplets[1]};
    const Model model(cfg.encoder, cfg.seed());
    std::vector<ad::Tensor> params;
    for (const auto& p : model.parameters()) params.push_back(p.tensor);
    const std::uint64_t mask_seed = derive_seed(cfg.seed(), {kMaskStream, 0});
    return ad::gradcheck([&] { return batch_loss(model, batch, cfg.loss, mask_seed).total; }, params, eps);
}

// ---------------------------------------------------------------------------
// Training

std::string StepMetrics::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["lr"] = lr;
    j["l_im"] = l_im;
    j["l_cm_pi"] = l_cm_pi;
    j["l_cm_pd"] = l_cm_pd;
    j["l_cd"] = l_cd;
    j["total"] = total;
    return j.dump();
}

Trainer::Trainer(const TrainConfig& cfg) : Trainer(cfg, nullptr) {}

Trainer::Trainer(const TrainConfig& cfg, std::shared_ptr<const std::vector<Triplet>> data) : cfg_(cfg) {
    validate(cfg_);
    if (!data) {
        const auto shapes = make_dataset(cfg_.pipeline, cfg_.per_class, cfg_.seed(), cfg_.classes);
        data = std::make_shared<const std::vector<Triplet>>(build_triplets(shapes, cfg_.pipeline, cfg_.seed()));
    }
    data_ = std::move(data);
    if (data_->size() < cfg_.batch_size)
        throw ConfigError("train config: dataset of " + std::to_string(data_->size()) + " is smaller than batch_size " +
                          std::to_string(cfg_.batch_size));
    model_ = Model(cfg_.encoder, cfg_.seed());
    named_ = model_.parameters();
    for (const auto& p : named_) params_.push_back(p.tensor);
    total_steps_ = cfg_.steps > 0 ? cfg_.steps : cfg_.epochs * steps_per_epoch();
}

std::size_t Trainer::steps_per_epoch() const { return data_->size() / cfg_.batch_size; }

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
    const std::size_t per_epoch = steps_per_epoch();
    const std::size_t epoch = step / per_epoch, pos = step % per_epoch;
    std::vector<std::size_t> order(data_->size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg_.seed(), {kEpochStream, epoch}));
    rng.shuffle(order);
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(pos * cfg_.batch_size);
    return {first, first + static_cast<std::ptrdiff_t>(cfg_.batch_size)};
}

StepMetrics Trainer::train_step() {
    if (done()) throw InvalidArgument("train_step: all " + std::to_string(total_steps_) + " steps are done");
    const std::size_t t = step();
    std::vector<const Triplet*> batch;
    for (auto i : batch_indices(t)) batch.push_back(&(*data_)[i]);

    const LossTerms terms = batch_loss(model_, batch, cfg_.loss, derive_seed(cfg_.seed(), {kMaskStream, t}));
    for (auto& p : params_) p.zero_grad();
    ad::backward(terms.total);
    const double lr = cosine_lr(t, total_steps_, cfg_.lr0);
    adamw_step(adam_, params_, lr, cfg_.weight_decay);

    return {t, lr, terms.l_im.item(), terms.l_cm_pi.item(), terms.l_cm_pd.item(), terms.l_cd.item(), terms.total.item()};
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    for (const auto& [key, value] : config_entries(cfg_)) ckpt.meta["config." + key] = value;
    ckpt.meta["step"] = std::to_string(adam_.step);
    for (const auto& p : named_) {
        ckpt.records.emplace_back(p.name, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
        ckpt.shapes.push_back(p.tensor.shape());
    }
    for (std::size_t i = 0; i < named_.size(); ++i) {
        const auto& shape = named_[i].tensor.shape();
        const std::size_t len = named_[i].tensor.numel();
        ckpt.records.emplace_back("adam.m." + named_[i].name, adam_.m.empty() ? std::vector<double>(len) : adam_.m[i]);
        ckpt.shapes.push_back(shape);
        ckpt.records.emplace_back("adam.v." + named_[i].name, adam_.v.empty() ? std::vector<double>(len) : adam_.v[i]);
        ckpt.shapes.push_back(shape);
    }
    write_checkpoint(path, ckpt);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    const auto it = ckpt.meta.find("step");
    if (it == ckpt.meta.end()) throw CheckpointError(path.string() + ": no training step recorded");
    std::uint64_t step = 0;
    try {
        step = std::stoull(it->second);
    } catch (const std::exception&) {
        throw CheckpointError(path.string() + ": bad step \"" + it->second + "\"");
    }
    if (step > total_steps_)
        throw CheckpointError(path.string() + ": step " + it->second + " beyond the configured " +
                              std::to_string(total_steps_) + " steps");

    AdamWState adam;
    adam.step = step;
    for (const auto& p : named_) {
        const auto* m = ckpt.find("adam.m." + p.name);
        const auto* v = ckpt.find("adam.v." + p.name);
        if (!m || !v) throw CheckpointError(path.string() + ": missing optimizer moments for " + p.name);
        if (m->size() != p.tensor.numel() || v->size() != p.tensor.numel())
            throw CheckpointError(path.string() + ": optimizer moments for " + p.name + " have the wrong length");
        adam.m.push_back(*m);
        adam.v.push_back(*v);
    }
    load_into(ckpt, named_);
    adam_ = std::move(adam);
}

std::vector<StepMetrics> pretrain(const TrainConfig& cfg, const std::filesystem::path& out_dir, bool resume) {
    std::filesystem::create_directories(out_dir);
    const auto ckpt_path = out_dir / "checkpoint.txt";
    const auto log_path = out_dir / "metrics.jsonl";

    Trainer trainer(cfg);
    std::vector<std::string> kept;
    if (resume && std::filesystem::exists(ckpt_path)) {
        trainer.load_checkpoint(ckpt_path);
        std::ifstream old(log_path);
        std::string line;
        while (kept.size() < trainer.step() && std::getline(old, line)) kept.push_back(line);
    }
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw InvalidInput("cannot write " + log_path.string());
    for (const auto& line : kept) log << line << '\n';

    std::vector<StepMetrics> out;
    const std::size_t per_epoch = trainer.steps_per_epoch();
    while (!trainer.done()) {
        out.push_back(trainer.train_step());
        log << out.back().to_json() << '\n' << std::flush;
        if (trainer.step() % per_epoch == 0 || trainer.done()) trainer.save_checkpoint(ckpt_path);
    }
    if (!log) throw InvalidInput("write failed for " + log_path.string());
    return out;
}

Pretrained load_pretrained(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    std::ostringstream entries;
    for (const auto& [key, value] : ckpt.meta)
        if (key.starts_with("config.")) entries << key.substr(7) << '=' << value << '\n';
    Pretrained out;
    try {
        std::istringstream in(entries.str());
        apply_entries(out.config, in, path.string());
        validate(out.config);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint configuration: ") + e.what());
    }
    out.model = Model(out.config.encoder, out.config.seed());
    auto named = out.model.parameters();
    load_into(ckpt, named);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

Matrix embed(const Model& model, std::span<const LabeledCloud> shapes, const PipelineConfig& cfg) {
    Matrix out;
    out.reserve(shapes.size());
    for (const auto& s : shapes) {
        if (s.cloud.size() < cfg.n_points)
            throw InvalidInput("embed: cloud has " + std::to_string(s.cloud.size()) + " points, need " +
                               std::to_string(cfg.n_points));
        const PointCloud normalized = normalize_unit_sphere(s.cloud);
        const PointCloud sampled = select(normalized, fps(normalized, cfg.n_points));
        const Matrix row = to_matrix(ad::l2_normalize(model.point.forward(sampled)));
        out.push_back(row.front());
    }
    return out;
}

int LinearClassifier::predict(std::span<const double> x) const {
    if (x.size() != dim) throw ShapeError("classifier expects " + std::to_string(dim) + " features");
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
        double s = b[c];
        for (std::size_t j = 0; j < dim; ++j) s += w[c * dim + j] * x[j];
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return static_cast<int>(labels[best]);
}

LinearClassifier train_linear_classifier(const Matrix& x, std::span<const int> labels, const ProbeOptions& opt) {
    check_rows(x, labels);
    LinearClassifier clf;
    clf.labels = distinct_labels(labels);
    clf.classes = clf.labels.size();
    clf.dim = x.front().size();
    clf.w.assign(clf.classes * clf.dim, 0.0);
    clf.b.assign(clf.classes, 0.0);

    const std::size_t n = x.size(), d = clf.dim, C = clf.classes;
    std::vector<std::size_t> cls(n);
    for (std::size_t i = 0; i < n; ++i)
        cls[i] = static_cast<std::size_t>(std::lower_bound(clf.labels.begin(), clf.labels.end(), labels[i]) -
                                          clf.labels.begin());

    std::vector<double> gw(C * d), gb(C);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t step = 0; step < opt.steps; ++step) {
        for (std::size_t k = 0; k < C * d; ++k) gw[k] = 2.0 * opt.lambda * clf.w[k];
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < C; ++c) {
                const double y = cls[i] == c ? 1.0 : -1.0;
                double s = clf.b[c];
                for (std::size_t j = 0; j < d; ++j) s += clf.w[c * d + j] * x[i][j];
                const double margin = 1.0 - y * s;
                if (margin <= 0.0) continue;
                const double coef = -2.0 * y * margin * inv_n;
                for (std::size_t j = 0; j < d; ++j) gw[c * d + j] += coef * x[i][j];
                gb[c] += coef;
            }
        }
        for (std::size_t k = 0; k < C * d; ++k) clf.w[k] -= opt.lr * gw[k];
        for (std::size_t c = 0; c < C; ++c) clf.b[c] -= opt.lr * gb[c];
    }
    return clf;
}

double accuracy(const LinearClassifier& clf, const Matrix& x, std::span<const int> labels) {
    check_rows(x, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.size(); ++i) correct += clf.predict(x[i]) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(x.size());
}

double linear_probe(const Matrix& x, std::span<const int> labels, std::uint64_t seed, const ProbeOptions& opt) {
    check_rows(x, labels);
    const auto classes = distinct_labels(labels);
    std::vector<std::size_t> train, test;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == classes[c]) members.push_back(i);
        if (members.size() < 4)
            throw InvalidArgument("linear_probe: class " + std::to_string(classes[c]) + " has " +
                                  std::to_string(members.size()) + " samples, need 4");
        Rng rng(derive_seed(seed, {c}));
        rng.shuffle(members);
        const auto n_train = static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(members.size()) + 0.5));
        train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        test.insert(test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    const auto clf = train_linear_classifier(rows_of(x, train), labels_of(labels, train), opt);
    return accuracy(clf, rows_of(x, test), labels_of(labels, test));
}

FewShotResult fewshot_eval(const Matrix& x, std::span<const int> labels, const FewShotConfig& fs, std::uint64_t seed,
                           const ProbeOptions& opt) {
    check_rows(x, labels);
    if (fs.ways < 2 || fs.shots < 1 || fs.queries < 1 || fs.runs < 1)
        throw InvalidArgument("fewshot: need ways >= 2 and positive shots, queries and runs");
    const auto classes = distinct_labels(labels);
    std::vector<std::vector<std::size_t>> pools(classes.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        pools[static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin())]
            .push_back(i);
    for (std::size_t c = 0; c < classes.size(); ++c)
        if (pools[c].size() < fs.shots + fs.queries)
            throw InvalidArgument("fewshot: class " + std::to_string(classes[c]) + " has " +
                                  std::to_string(pools[c].size()) + " samples, need " +
                                  std::to_string(fs.shots + fs.queries));
    const std::size_t ways = std::min(fs.ways, classes.size());

    FewShotResult result;
    for (std::size_t run = 0; run < fs.runs; ++run) {
        Rng rng(fs.fixed_run_seed ? *fs.fixed_run_seed : derive_seed(seed, {run}));
        std::vector<std::size_t> order(classes.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::vector<std::size_t> support, query;
        for (std::size_t w = 0; w < ways; ++w) {
            auto pool = pools[order[w]];
            rng.shuffle(pool);
            support.insert(support.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(fs.shots));
            query.insert(query.end(), pool.begin() + static_cast<std::ptrdiff_t>(fs.shots),
                         pool.begin() + static_cast<std::ptrdiff_t>(fs.shots + fs.queries));
        }
        const auto clf = train_linear_classifier(rows_of(x, support), labels_of(labels, support), opt);
        result.accuracies.push_back(accuracy(clf, rows_of(x, query), labels_of(labels, query)));
    }
    // Shifted by the first run so identical runs give exactly zero spread.
    const double n = static_cast<double>(result.accuracies.size());
    const double shift = result.accuracies.front();
    double s1 = 0.0, s2 = 0.0;
    for (double a : result.accuracies) {
        s1 += a - shift;
        s2 += (a - shift) * (a - shift);
    }
    result.mean = shift + s1 / n;
    result.stddev = std::sqrt(std::max(0.0, s2 / n - (s1 / n) * (s1 / n)));
    return result;
}

void write_embeddings(const std::filesystem::path& path, const Matrix& x, std::span<const int> labels) {
    check_rows(x, labels);
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(17);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out << labels[i];
        for (double v : x[i]) out << ' ' << v;
        out << '\n';
    }
    if (!out) throw InvalidInput("write failed for " + path.string());
}

std::pair<Matrix, std::vector<int>> read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    Matrix x;
    std::vector<int> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        int label = 0;
        if (!(ls >> label)) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected a label", line_no);
        std::vector<double> row;
        double v = 0.0;
        while (ls >> v) row.push_back(v);
        if (!ls.eof() || row.empty() || (!x.empty() && row.size() != x.front().size()))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad embedding row", line_no);
        x.push_back(std::move(row));
        labels.push_back(label);
    }
    if (x.empty()) throw InvalidInput(path.string() + ": no embeddings");
    return {std::move(x), std::move(labels)};
}

} // namespace gspt
