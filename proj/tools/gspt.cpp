// Command-line front end: pretraining, embedding, evaluation and data tools.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gspt/errors.hpp"
#include "gspt/trainer_eval.hpp"

namespace fs = std::filesystem;
using namespace gspt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::vector<int> labels_of(const std::vector<LabeledCloud>& shapes) {
    std::vector<int> out;
    out.reserve(shapes.size());
    for (const auto& s : shapes) out.push_back(s.label);
    return out;
}

void print_json(const nlohmann::ordered_json& j) { std::cout << j.dump() << '\n'; }

int run_pretrain(const std::string& config, const fs::path& out, bool resume) {
    const TrainConfig cfg = load_train_config(config);
    const auto metrics = pretrain(cfg, out, resume);
    nlohmann::ordered_json j;
    j["steps"] = metrics.empty() ? 0 : metrics.back().step + 1;
    j["final_total"] = metrics.empty() ? 0.0 : metrics.back().total;
    j["checkpoint"] = (out / "checkpoint.txt").string();
    j["metrics"] = (out / "metrics.jsonl").string();
    print_json(j);
    return kExitOk;
}

int run_embed(const fs::path& ckpt, const fs::path& data, const fs::path& out) {
    const Pretrained pre = load_pretrained(ckpt);
    const auto shapes = read_dataset(data);
    const Matrix z = embed(pre.model, shapes, pre.config.pipeline);
    write_embeddings(out, z, labels_of(shapes));
    nlohmann::ordered_json j;
    j["samples"] = z.size();
    j["dim"] = z.front().size();
    j["out"] = out.string();
    print_json(j);
    return kExitOk;
}

int run_probe(const fs::path& emb, std::uint64_t seed) {
    const auto [x, y] = read_embeddings(emb);
    nlohmann::ordered_json j;
    j["accuracy"] = linear_probe(x, y, seed);
    print_json(j);
    return kExitOk;
}

int run_fewshot(const fs::path& ckpt, const fs::path& data, const FewShotConfig& fsc, std::uint64_t seed) {
    const Pretrained pre = load_pretrained(ckpt);
    const auto shapes = read_dataset(data);
    const Matrix z = embed(pre.model, shapes, pre.config.pipeline);
    const FewShotResult r = fewshot_eval(z, labels_of(shapes), fsc, seed);
    nlohmann::ordered_json j;
    j["mean"] = r.mean;
    j["std"] = r.stddev;
    j["accuracies"] = r.accuracies;
    print_json(j);
    return kExitOk;
}

int run_gradcheck(const std::string& config, double tolerance, double eps) {
    const TrainConfig cfg = load_train_config(config);
    const ad::GradcheckResult r = gradcheck_objective(cfg, eps);
    nlohmann::ordered_json j;
    j["max_rel_error"] = r.max_rel_error;
    j["checked"] = r.checked;
    j["masked"] = r.masked;
    j["pass"] = r.max_rel_error < tolerance;
    print_json(j);
    return r.max_rel_error < tolerance ? kExitOk : kExitFailure;
}

int run_gen_synthetic(const fs::path& out, const std::optional<std::string>& config, std::size_t per_class,
                      std::uint64_t seed, bool test_split) {
    const PipelineConfig pcfg = config ? load_pipeline_config(*config) : PipelineConfig{};
    const auto shapes = make_dataset(pcfg, per_class, test_split ? seed + kTestSplitSeedOffset : seed);
    write_dataset(out, shapes);
    nlohmann::ordered_json j;
    j["shapes"] = shapes.size();
    j["out"] = out.string();
    print_json(j);
    return kExitOk;
}

int run_render_preview(const fs::path& out, const std::optional<std::string>& config,
                       const std::optional<std::string>& input, const std::string& shape, std::uint64_t seed) {
    const PipelineConfig pcfg = config ? load_pipeline_config(*config) : PipelineConfig{};
    const PointCloud pc = input ? load_pointcloud(*input) : synth_shape(parse_synth_class(shape), 2 * pcfg.n_points, seed);
    const Triplet t = build_triplet(pc, pcfg, seed);
    fs::create_directories(out);
    for (std::size_t v = 0; v < t.input_views.size(); ++v)
        write_ppm(out / ("view_" + std::to_string(v) + ".ppm"), t.input_views[v]);
    write_ppm(out / "novel.ppm", t.novel_view);
    write_depth_pgm(out / "depth.pgm", out / "depth.range", t.depth_map, t.depth_alpha);
    write_pointcloud_text(out / "points.xyz", t.point_cloud);
    write_pointcloud_text(out / "gs_points.xyz", t.gs_points);
    nlohmann::ordered_json j;
    j["views"] = t.input_views.size();
    j["novel_azimuth_deg"] = t.novel_azimuth_deg;
    j["depth_view"] = t.depth_view;
    j["out"] = out.string();
    print_json(j);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tri-modal point cloud pretraining with Gaussian splatting"};
    app.require_subcommand(1);

    std::string config, ckpt, data, out, emb, shape = "sphere";
    std::optional<std::string> opt_config, opt_input;
    std::uint64_t seed = 0;
    bool resume = false, test_split = false;
    std::size_t per_class = 40;
    double tolerance = 1e-4;
    double eps = 1e-4;
    FewShotConfig fsc;

    auto* pretrain_cmd = app.add_subcommand("pretrain", "Train all encoders on the synthetic corpus");
    pretrain_cmd->add_option("--config", config, "key=value training config")->required()->check(CLI::ExistingFile);
    pretrain_cmd->add_option("--out", out, "Output directory")->required();
    pretrain_cmd->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");

    auto* embed_cmd = app.add_subcommand("embed", "Embed a dataset directory with a trained point encoder");
    embed_cmd->add_option("--ckpt", ckpt, "Checkpoint manifest")->required();
    embed_cmd->add_option("--data", data, "Dataset directory")->required();
    embed_cmd->add_option("--out", out, "Embedding file")->required();

    auto* probe_cmd = app.add_subcommand("probe", "Linear-probe accuracy of an embedding file");
    probe_cmd->add_option("--emb", emb, "Embedding file")->required();
    probe_cmd->add_option("--seed", seed, "Split seed");

    auto* fewshot_cmd = app.add_subcommand("fewshot", "K-way N-shot evaluation");
    fewshot_cmd->add_option("--ckpt", ckpt, "Checkpoint manifest")->required();
    fewshot_cmd->add_option("--data", data, "Dataset directory")->required();
    fewshot_cmd->add_option("--k", fsc.ways, "Ways")->capture_default_str();
    fewshot_cmd->add_option("--n", fsc.shots, "Shots")->capture_default_str();
    fewshot_cmd->add_option("--queries", fsc.queries, "Queries per class")->capture_default_str();
    fewshot_cmd->add_option("--runs", fsc.runs, "Independent runs")->capture_default_str();
    fewshot_cmd->add_option("--seed", seed, "Run seed");

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
    grad_cmd->add_option("--config", config, "key=value training config")->required()->check(CLI::ExistingFile);
    grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
    grad_cmd->add_option("--eps", eps, "Finite-difference step")->capture_default_str();

    auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a synthetic labeled dataset directory");
    gen_cmd->add_option("--out", out, "Output directory")->required();
    gen_cmd->add_option("--config", opt_config, "key=value pipeline config");
    gen_cmd->add_option("--per-class", per_class, "Shapes per class")->capture_default_str();
    gen_cmd->add_option("--seed", seed, "Dataset seed");
    gen_cmd->add_flag("--test-split", test_split, "Generate the held-out split for this seed");

    auto* preview_cmd = app.add_subcommand("render-preview", "Render one triplet to image and point files");
    preview_cmd->add_option("--out", out, "Output directory")->required();
    preview_cmd->add_option("--config", opt_config, "key=value pipeline config");
    preview_cmd->add_option("--input", opt_input, "Point cloud file (text or binary)");
    preview_cmd->add_option("--shape", shape, "Synthetic class when no input is given")->capture_default_str();
    preview_cmd->add_option("--seed", seed, "Triplet seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*pretrain_cmd) return run_pretrain(config, out, resume);
        if (*embed_cmd) return run_embed(ckpt, data, out);
        if (*probe_cmd) return run_probe(emb, seed);
        if (*fewshot_cmd) return run_fewshot(ckpt, data, fsc, seed);
        if (*grad_cmd) return run_gradcheck(config, tolerance, eps);
        if (*gen_cmd) return run_gen_synthetic(out, opt_config, per_class, seed, test_split);
        if (*preview_cmd) return run_render_preview(out, opt_config, opt_input, shape, seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}
